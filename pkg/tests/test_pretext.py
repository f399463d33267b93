import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bitemporal import autodiff as ad
from bitemporal.model import EncoderConfig, init_align_head, init_encoder, save_checkpoint
from bitemporal.pretext import (AugmentationSpec, CollapseWarning, PretextConfig, _batch, augment,
                                embed, pooled_embedding, pretrain, write_loss_log)
from bitemporal.raster import Raster, Window, save_png
from bitemporal.scenario import gen_patch_corpus

SMALL = EncoderConfig(stage_channels=(4, 8, 8), descriptor_dim=8)


def _identity(p, spec):
    return p


@pytest.fixture(scope="module")
def corpus():
    return gen_patch_corpus(16, 64, seed=1)


def test_identity_augmentation():
    p = gen_patch_corpus(1, 64)[0]
    assert augment(p, AugmentationSpec()).data.tobytes() == p.data.tobytes()


def test_half_turn_is_an_involution():
    p = gen_patch_corpus(1, 64)[0]
    spec = AugmentationSpec(quarter_turns=2)
    assert augment(augment(p, spec), spec).data.tobytes() == p.data.tobytes()


def test_gain_clamps():
    p = Raster(np.full((8, 8, 1), 0.6, np.float32))
    out = augment(p, AugmentationSpec(gain=2.0))
    np.testing.assert_array_equal(out.data, 1.0)


def test_augment_requires_square():
    with pytest.raises(ValueError):
        augment(Raster(np.zeros((8, 16, 1))), AugmentationSpec())


@settings(max_examples=50)
@given(st.integers(0, 2 ** 63 - 1))
def test_sampled_spec_ranges_and_determinism(seed):
    s = AugmentationSpec.sample(seed)
    assert s == AugmentationSpec.sample(seed)
    assert 0.6 <= s.gain <= 1.4 and -0.2 <= s.bias <= 0.2
    assert s.quarter_turns in (0, 1, 2, 3) and -15 <= s.jitter_deg <= 15


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_augment_stays_in_range(seed):
    p = gen_patch_corpus(1, 64, seed=seed % 50)[0]
    out = augment(p, AugmentationSpec.sample(seed))
    assert out.shape == p.shape
    assert 0.0 <= out.data.min() and out.data.max() <= 1.0


def test_pooled_embedding_contract():
    p = gen_patch_corpus(1, 64)[0]
    enc, head = init_encoder(), init_align_head()
    z = pooled_embedding(p, enc, head)
    assert z.shape == (64,)
    assert abs(np.linalg.norm(z) - 1) < 1e-5
    assert z.tobytes() == pooled_embedding(p, enc, head).tobytes()


def test_stop_gradient_matches_constant_bottom():
    """Analytic gradient through the top branch equals finite differences with the bottom held fixed."""
    patches = [p.crop(Window(8, 8, 16)) for p in gen_patch_corpus(2, 64, seed=4)]
    enc, head = init_encoder(SMALL, 1), init_align_head(SMALL, 1)
    views = [augment(p, AugmentationSpec(quarter_turns=1, gain=1.2)) for p in patches]
    bottom = embed(_batch(views), enc.params.frozen(), head.params.frozen())
    top_in = _batch(patches)
    frozen_enc = enc.params.frozen()

    def f(bias):
        hp = head.params.frozen()
        hp._params["proj2.bias"] = bias
        return ad.pretext_similarity_loss(embed(top_in, frozen_enc, hp), bottom)

    bias = head.params["proj2.bias"].value.astype(np.float64) + 0.1
    assert ad.gradient_check(f, bias, eps=1e-4) < 1e-3


def test_identity_views_give_minus_one(corpus):
    cfg = PretextConfig(epochs=2, batch_size=8, views=1, seed=0)
    res = pretrain(corpus, cfg, SMALL, augmentation=_identity)
    assert res.losses == pytest.approx([-1.0, -1.0], abs=1e-6)


def test_identity_views_update_only_by_decay(corpus):
    cfg = PretextConfig(epochs=1, batch_size=8, views=1, seed=0, weight_decay=0.0)
    init = init_encoder(SMALL, 0)
    res = pretrain(corpus, cfg, SMALL, augmentation=_identity)
    # cos(a, a) is stationary in a, so without decay nothing moves
    for n, t in res.encoder.params.items():
        np.testing.assert_allclose(t.value, init.params[n].value, atol=1e-6)


def test_pretrain_bit_reproducible(corpus, tmp_path):
    cfg = PretextConfig(epochs=2, batch_size=8, seed=5)
    paths = []
    for run in range(2):
        res = pretrain(corpus, cfg, SMALL)
        for ckpt in (res.encoder, res.head):
            path = tmp_path / f"{ckpt.role}_{run}.ckpt"
            save_checkpoint(ckpt, path)
            paths.append(path)
        assert all(-1 <= v <= 1 for v in res.losses)
    assert paths[0].read_bytes() == paths[2].read_bytes()
    assert paths[1].read_bytes() == paths[3].read_bytes()


def test_pretrain_from_directory(corpus, tmp_path):
    for i, p in enumerate(corpus):
        save_png(p, tmp_path / f"p{i:02d}.png")
    res = pretrain(tmp_path, PretextConfig(epochs=1, batch_size=8), SMALL)
    assert len(res.losses) == 1


def test_collapse_warning_is_observable(corpus):
    cfg = PretextConfig(epochs=1, batch_size=8, collapse_variance=10.0)
    with pytest.warns(CollapseWarning):
        pretrain(corpus, cfg, SMALL)


def test_pretrain_errors(corpus):
    with pytest.raises(ValueError):
        pretrain(corpus[:4], PretextConfig(batch_size=8), SMALL)
    with pytest.raises(ad.ShapeError):
        pretrain([Raster(np.zeros((64, 32, 3)))] * 8, PretextConfig(batch_size=8), SMALL)
    with pytest.raises(ValueError):
        PretextConfig(views=0)


def test_rotated_views_move_closer(corpus):
    enc0, head0 = init_encoder(SMALL, 0), init_align_head(SMALL, 0)
    rot = [augment(p, AugmentationSpec(quarter_turns=1)) for p in corpus]

    def mean_cos(enc, head):
        a = embed(_batch(corpus), enc.params.frozen(), head.params.frozen()).value
        b = embed(_batch(rot), enc.params.frozen(), head.params.frozen()).value
        return float((a * b).sum(axis=1).mean())

    before = mean_cos(enc0, head0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CollapseWarning)
        res = pretrain(corpus, PretextConfig(epochs=3, batch_size=8, seed=0), SMALL)
    assert mean_cos(res.encoder, res.head) > before


def test_loss_log_csv(tmp_path):
    write_loss_log([-0.5, -0.75], tmp_path / "l.csv")
    assert (tmp_path / "l.csv").read_text().splitlines() == ["epoch,mean_loss", "0,-0.500000", "1,-0.750000"]
