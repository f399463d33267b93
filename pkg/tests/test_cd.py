import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bitemporal import autodiff as ad
from bitemporal.cd import (CdPair, FinetuneConfig, finetune, fuse_features, infer_scene, stitch,
                           write_loss_log)
from bitemporal.model import DecoderConfig, EncoderConfig, init_decoder, init_encoder
from bitemporal.raster import GeometryError, Raster, tile_grid
from bitemporal.scenario import DistortionSpec, gen_toy_cd_dataset

SMALL = EncoderConfig(stage_channels=(4, 8, 8), descriptor_dim=8)
SMALL_DEC = DecoderConfig(feature_channels=3 + 8, channels=(8, 8, 4))


def _zero_bias_encoder(cfg=EncoderConfig()):
    enc = init_encoder(cfg, 0)
    for name, t in enc.params.items():
        if name.endswith(".bias"):
            t.value[...] = 0
    return enc


def _pairs(n, size=32, change_rate=0.05, zero_gt=False):
    scenes = gen_toy_cd_dataset(n, 128, change_rate, DistortionSpec(0.0, 0), seed=5)
    out = []
    for s in scenes:
        t1 = Raster(s.t1.data[:size, :size])
        t2 = Raster(s.t2.data[:size, :size])
        gt = np.zeros((size, size, 1), np.float32) if zero_gt else s.gt_mask.data[:size, :size]
        out.append(CdPair(t1, t2, Raster(gt)))
    return out


def test_fused_shape_default():
    patch = Raster(np.random.default_rng(0).random((256, 256, 3)).astype(np.float32))
    assert fuse_features(patch, init_encoder()).shape == (67, 256, 256)


def test_fused_zero_patch_zero_encoder():
    out = fuse_features(Raster(np.zeros((64, 64, 3))), _zero_bias_encoder())
    assert not out.value.any()


def test_fuse_leaves_encoder_untouched():
    enc = init_encoder(seed=4)
    before = enc.digest()
    fuse_features(Raster(np.random.default_rng(1).random((64, 64, 3)).astype(np.float32)), enc)
    assert enc.digest() == before


def test_fuse_keeps_raw_patch_first():
    patch = Raster(np.random.default_rng(2).random((32, 32, 3)).astype(np.float32))
    out = fuse_features(patch, init_encoder()).value
    np.testing.assert_array_equal(out[:3], patch.data.transpose(2, 0, 1))


def test_fuse_rejects_bad_side():
    with pytest.raises(ad.ShapeError):
        fuse_features(Raster(np.zeros((36, 36, 3))), init_encoder())


def test_pair_validation():
    a = Raster(np.zeros((8, 8, 3)))
    with pytest.raises(ValueError):
        CdPair(a, a, Raster(np.full((8, 8, 1), 0.5)))
    with pytest.raises(ValueError):
        CdPair(a, Raster(np.zeros((16, 16, 3))), Raster(np.zeros((8, 8, 1))))


def test_finetune_config_validation():
    with pytest.raises(ValueError):
        FinetuneConfig(batch_size=0)
    with pytest.raises(ValueError):
        FinetuneConfig(threshold=1.0)


def test_finetune_errors():
    enc = init_encoder(SMALL, 0)
    with pytest.raises(ValueError):
        finetune([], enc)
    with pytest.raises(ValueError):
        finetune(_pairs(2), enc, FinetuneConfig(batch_size=4))


def test_all_zero_labels_drive_probabilities_down():
    enc = init_encoder(SMALL, 0)
    pairs = _pairs(16, zero_gt=True)
    dec, losses = finetune(pairs, enc, FinetuneConfig(epochs=20, batch_size=8, lr=1e-2, seed=0), SMALL_DEC)
    assert losses[-1] < losses[0]
    probs = [infer_scene(p.t1_patch, p.t2_patch, enc, dec, tile=32, stride=32)[0].data.mean()
             for p in pairs]
    assert float(np.mean(probs)) < 0.1


def test_finetune_freezes_encoder_and_is_deterministic():
    enc = init_encoder(SMALL, 0)
    before = enc.digest()
    cfg = FinetuneConfig(epochs=2, batch_size=4, seed=3)
    a, la = finetune(_pairs(8), enc, cfg, SMALL_DEC)
    b, lb = finetune(_pairs(8), enc, cfg, SMALL_DEC)
    assert enc.digest() == before
    assert a.digest() == b.digest() and la == lb


def test_finetune_valid_mask_zeroes_loss_outside():
    enc = init_encoder(SMALL, 0)
    pairs = [CdPair(p.t1_patch, p.t2_patch, p.gt_mask, np.zeros((32, 32), bool)) for p in _pairs(4)]
    dec, losses = finetune(pairs, enc, FinetuneConfig(epochs=1, batch_size=4), SMALL_DEC)
    assert losses == [0.0]


# inference --------------------------------------------------------------------

def _constant(logit):
    return lambda a, b: np.full((a.height, a.width), logit)


def test_single_tile_equals_sigmoid_output():
    enc, dec = init_encoder(SMALL, 0), init_decoder(SMALL_DEC, 0)
    p = _pairs(1)[0]
    prob, mask = infer_scene(p.t1_patch, p.t2_patch, enc, dec, tile=32, stride=16)
    from bitemporal.cd import decoder_predictor
    logits = decoder_predictor(enc, dec)(p.t1_patch, p.t2_patch)
    np.testing.assert_allclose(prob.data[:, :, 0], 1 / (1 + np.exp(-logits)), atol=1e-6)
    np.testing.assert_array_equal(mask.data[:, :, 0], (prob.data[:, :, 0] >= 0.5).astype(np.float32))


def test_zero_logit_stub_gives_half_and_all_ones():
    t = Raster(np.zeros((96, 96, 3)))
    prob, mask = infer_scene(t, t, None, _constant(0.0), tile=32, stride=16)
    np.testing.assert_array_equal(prob.data, 0.5)
    np.testing.assert_array_equal(mask.data, 1.0)


def test_disjoint_tiles_union():
    t = Raster(np.zeros((64, 64, 3)))
    calls = iter(range(4))

    def stub(a, b):
        k = next(calls)
        return np.full((a.height, a.width), float(k - 2))

    prob, _ = infer_scene(t, t, None, stub, tile=32, stride=32)
    expect = 1 / (1 + np.exp(-(np.arange(4) - 2.0)))
    for (k, win) in enumerate(tile_grid(64, 64, 32, 32)):
        block = prob.data[win.y0:win.y0 + 32, win.x0:win.x0 + 32, 0]
        np.testing.assert_allclose(block, expect[k], atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(16, 80), st.integers(16, 80), st.integers(4, 16), st.integers(1, 16))
def test_stitch_is_mean_of_covering_tiles(h, w, tile, stride):
    tile = min(tile, h, w)
    stride = min(stride, tile)
    windows = tile_grid(h, w, tile, stride)
    tiles = [np.full((tile, tile), float(k)) for k in range(len(windows))]
    out = stitch(tiles, windows, h, w)
    sums = np.zeros((h, w))
    counts = np.zeros((h, w))
    for k, win in enumerate(windows):
        sums[win.y0:win.y0 + tile, win.x0:win.x0 + tile] += k
        counts[win.y0:win.y0 + tile, win.x0:win.x0 + tile] += 1
    np.testing.assert_allclose(out, sums / counts)


def test_infer_outputs_in_range_and_binary():
    enc, dec = init_encoder(SMALL, 0), init_decoder(SMALL_DEC, 1)
    s = gen_toy_cd_dataset(1, 128, 0.05, DistortionSpec(0.0, 0), seed=2)[0]
    before = enc.digest()
    prob, mask = infer_scene(s.t1, s.t2, enc, dec, tile=64, stride=32)
    assert enc.digest() == before
    assert 0 <= prob.data.min() and prob.data.max() <= 1
    assert set(np.unique(mask.data)) <= {0.0, 1.0}


def test_infer_errors():
    a, b = Raster(np.zeros((64, 64, 3))), Raster(np.zeros((64, 32, 3)))
    with pytest.raises(GeometryError):
        infer_scene(a, b, None, _constant(0.0), tile=32)
    with pytest.raises(GeometryError):
        infer_scene(a, a, None, _constant(0.0), tile=128)


def test_cd_loss_log(tmp_path):
    write_loss_log([0.5], tmp_path / "l.csv")
    assert (tmp_path / "l.csv").read_text().splitlines() == ["epoch,mean_loss", "0,0.500000"]
