import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bitemporal.align import dlt_homography
from bitemporal.raster import Homography, apply_homography, warp_perspective
from bitemporal.scenario import (DistortionSpec, alignment_error, draw_corner_offsets, gen_texture,
                                 gen_toy_cd_dataset, gen_toy_scene, image_corners, load_scene,
                                 save_scene, synth_perspective)


def test_texture_deterministic_and_textured():
    a, b = gen_texture(64, 64, 5), gen_texture(64, 64, 5)
    assert a.data.tobytes() == b.data.tobytes()
    for seed in range(10):
        assert gen_texture(64, 64, seed).data.std() > 0.05


def test_texture_seeds_differ():
    for seed in range(10):
        diff = np.abs(gen_texture(64, 64, seed).data - gen_texture(64, 64, seed + 1).data).mean()
        assert diff > 0.05


def test_texture_min_size():
    with pytest.raises(ValueError):
        gen_texture(32, 64, 0)


def test_zero_distortion_is_identity():
    src = gen_texture(64, 64, 0)
    out, H = synth_perspective(src, DistortionSpec(0.0, 3))
    np.testing.assert_array_equal(H.m, np.eye(3))
    assert out.data.tobytes() == src.data.tobytes()


@pytest.mark.parametrize("seed", range(5))
def test_synth_perspective_consistent(seed):
    src = gen_texture(96, 96, seed)
    spec = DistortionSpec(0.05, seed)
    out, H = synth_perspective(src, spec)
    assert out.data.tobytes() == warp_perspective(src, H, 96, 96).data.tobytes()
    c = image_corners(96, 96)
    moved = apply_homography(H, c)
    np.testing.assert_allclose(dlt_homography(c, moved).m, H.m, atol=1e-9)
    assert np.abs(moved - c).max() <= 0.05 * 96 + 1e-9


def test_alignment_error_examples():
    H = Homography(np.array([[1.01, 0.02, 3], [0.0, 0.99, -2], [1e-5, 0, 1]]))
    assert alignment_error(H, H, 512, 512) == 0.0
    assert alignment_error(Homography.translation(1, 0) @ H, H, 512, 512) == pytest.approx(1.0)


def test_alignment_error_identity_vs_offsets():
    spec = DistortionSpec(0.05, 9)
    offs = draw_corner_offsets(spec, 512, 512)
    c = image_corners(512, 512)
    H = dlt_homography(c, c + offs)
    expected = np.linalg.norm(offs, axis=1).mean()
    assert alignment_error(Homography.identity(), H, 512, 512) == pytest.approx(expected, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 0.2), st.integers(0, 2 ** 31))
def test_alignment_error_nonnegative(disp, seed):
    c = image_corners(128, 128)
    offs = draw_corner_offsets(DistortionSpec(disp, seed), 128, 128)
    H = dlt_homography(c, c + offs) if np.any(offs) else Homography.identity()
    assert alignment_error(Homography.identity(), H, 128, 128) >= 0
    assert alignment_error(H, H, 128, 128) == pytest.approx(0.0, abs=1e-9)


def test_change_rate_zero():
    s = gen_toy_scene(128, 0.0, DistortionSpec(0.05, 1), 4)
    assert not s.gt_mask.data.any()


def test_change_rate_measured():
    for seed in range(10):
        s = gen_toy_scene(256, 0.05, DistortionSpec(0.05, 0), seed)
        rate = s.gt_mask.data.mean()
        assert 0.025 <= rate <= 0.10


def test_undistorted_changes_only_inside_mask():
    s = gen_toy_scene(128, 0.05, DistortionSpec(0.0, 0), 2)
    diff = np.abs(s.t1.data - s.t2.data).max(axis=2)
    assert not diff[s.gt_mask.data[:, :, 0] == 0].any()
    assert diff[s.gt_mask.data[:, :, 0] == 1].mean() > 0.05


def test_scene_t2_is_t1_frame_content_under_h():
    s = gen_toy_scene(128, 0.0, DistortionSpec(0.05, 3), 1)
    back = warp_perspective(s.t2, s.H_gt.inverse(), 128, 128)
    inner = np.zeros((128, 128), bool)
    inner[16:-16, 16:-16] = True
    assert np.abs(back.data - s.t1.data).max(axis=2)[inner].mean() < 0.03


def test_generators_are_pure():
    a = gen_toy_cd_dataset(2, 128, 0.05, DistortionSpec(0.05, 1), seed=3)
    b = gen_toy_cd_dataset(2, 128, 0.05, DistortionSpec(0.05, 1), seed=3)
    for x, y in zip(a, b):
        assert x.t2.data.tobytes() == y.t2.data.tobytes()
        assert x.H_gt.m.tobytes() == y.H_gt.m.tobytes()


def test_scene_bundle_round_trip(tmp_path):
    s = gen_toy_scene(128, 0.05, DistortionSpec(0.05, 1), 0)
    save_scene(s, tmp_path / "scene")
    assert sorted(p.name for p in (tmp_path / "scene").iterdir()) == ["gt.png", "h_gt.json", "t1.png", "t2.png"]
    back = load_scene(tmp_path / "scene")
    np.testing.assert_array_equal(back.gt_mask.data, s.gt_mask.data)
    np.testing.assert_array_equal(back.H_gt.m, s.H_gt.m)
    assert np.abs(back.t1.data - s.t1.data).max() <= 1 / 255 + 1e-7


def test_distortion_spec_validation():
    with pytest.raises(ValueError):
        DistortionSpec(0.3)
