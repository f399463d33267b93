"""Synthetic bitemporal scenes with known homographies and change masks."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple

import cv2
import numpy as np

from .align import dlt_homography
from .raster import (Homography, Raster, apply_homography, load_png, save_mask_png, save_png,
                     warp_perspective)


@dataclass(frozen=True)
class DistortionSpec:
    max_corner_disp: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.max_corner_disp < 0.25:
            raise ValueError("max_corner_disp must lie in [0, 0.25)")


@dataclass(frozen=True)
class ToyScene:
    t1: Raster
    t2: Raster
    gt_mask: Raster
    H_gt: Homography


def image_corners(h: int, w: int) -> np.ndarray:
    return np.array([[0.0, 0.0], [w - 1.0, 0.0], [w - 1.0, h - 1.0], [0.0, h - 1.0]])


def _rng(*keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]))


# texture --------------------------------------------------------------------

def _value_noise(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    out = np.zeros((h, w), dtype=np.float64)
    amp, total = 1.0, 0.0
    for cell in (32, 16, 8, 4):
        gh, gw = h // cell + 2, w // cell + 2
        grid = rng.random((gh, gw)).astype(np.float32)
        layer = cv2.resize(grid, (gw * cell, gh * cell), interpolation=cv2.INTER_LINEAR)
        out += amp * layer[:h, :w]
        total += amp
        amp *= 0.5
    out /= total
    lo, hi = out.min(), out.max()
    return (out - lo) / max(hi - lo, 1e-9)


def _rectangles(rng: np.random.Generator, img: np.ndarray, count: int, lo: int, hi: int) -> None:
    h, w = img.shape[:2]
    for _ in range(count):
        rh, rw = rng.integers(lo, hi + 1, size=2)
        y0 = int(rng.integers(0, max(h - rh, 1)))
        x0 = int(rng.integers(0, max(w - rw, 1)))
        base = rng.choice([rng.uniform(0.7, 0.95), rng.uniform(0.05, 0.25)])
        color = np.clip(base + rng.uniform(-0.05, 0.05, size=3), 0.0, 1.0)
        img[y0:y0 + rh, x0:x0 + rw] = color


def gen_texture(h: int, w: int, seed: int = 0) -> Raster:
    """Multi-octave value noise with bright/dark rectangular "buildings"."""
    if h < 64 or w < 64:
        raise ValueError("texture needs h, w >= 64")
    rng = _rng(seed, 1)
    base = _value_noise(rng, h, w)
    tint = rng.uniform(0.8, 1.0, size=3)
    img = 0.15 + 0.7 * base[:, :, None] * tint[None, None, :]
    img += 0.05 * (_value_noise(rng, h, w)[:, :, None] - 0.5)
    n_rect = max(1, int(round(1.5 * h * w / 64 ** 2)))
    _rectangles(rng, img, n_rect, 6, 24)
    return Raster(np.clip(img, 0.0, 1.0).astype(np.float32))


# perspective ---------------------------------------------------------------

def _convex(quad: np.ndarray) -> bool:
    crosses = []
    for k in range(4):
        a, b, c = quad[k], quad[(k + 1) % 4], quad[(k + 2) % 4]
        crosses.append((b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]))
    crosses = np.array(crosses)
    return bool(np.all(crosses > 0) or np.all(crosses < 0))


def draw_corner_offsets(spec: DistortionSpec, h: int, w: int) -> np.ndarray:
    """(4, 2) corner displacements; non-convex draws are redrawn."""
    rng = _rng(spec.seed, 2)
    d = spec.max_corner_disp * min(h, w)
    corners = image_corners(h, w)
    while True:
        offs = rng.uniform(-d, d, size=(4, 2))
        if _convex(corners + offs):
            return offs


def perspective_from_offsets(h: int, w: int, offsets: np.ndarray) -> Homography:
    corners = image_corners(h, w)
    if not np.any(offsets):
        return Homography.identity()
    return dlt_homography(corners, corners + offsets)


def synth_perspective(src: Raster, spec: DistortionSpec) -> Tuple[Raster, Homography]:
    """Randomly displace the four corners; return (warped src, H src -> warped)."""
    H = perspective_from_offsets(src.height, src.width, draw_corner_offsets(spec, src.height, src.width))
    return warp_perspective(src, H, src.height, src.width), H


def alignment_error(H_est: Homography, H_gt: Homography, h: int, w: int) -> float:
    """Mean distance between where the two homographies send the image corners."""
    c = image_corners(h, w)
    return float(np.linalg.norm(apply_homography(H_est, c) - apply_homography(H_gt, c), axis=1).mean())


# change-detection scenes ---------------------------------------------------

def _paint_changes(rng: np.random.Generator, canvas: np.ndarray, m: int, size: int,
                   change_rate: float) -> np.ndarray:
    """Paint rectangles inside the central size x size window; returns the mask."""
    mask = np.zeros((size, size), dtype=bool)
    target = change_rate * size * size
    if target <= 0:
        return mask
    side_lo = max(6, int(size * 0.05))
    side_hi = max(side_lo + 1, int(size * 0.16))
    for _ in range(200):
        if mask.sum() >= target:
            break
        rh, rw = rng.integers(side_lo, side_hi + 1, size=2)
        y0 = int(rng.integers(2, size - rh - 2))
        x0 = int(rng.integers(2, size - rw - 2))
        region = canvas[m + y0:m + y0 + rh, m + x0:m + x0 + rw]
        if rng.random() < 0.6:
            # new building: a flat colour far from what was there
            old = region.mean()
            base = rng.uniform(0.05, 0.2) if old > 0.5 else rng.uniform(0.8, 0.95)
            region[:] = np.clip(base + rng.uniform(-0.03, 0.03, size=3), 0, 1)
        else:
            # demolition: replaced by fresh ground texture with a shifted mean
            noise = _value_noise(rng, max(rh, 64), max(rw, 64))[:rh, :rw]
            shift = 0.35 if region.mean() < 0.5 else -0.35
            region[:] = np.clip(region.mean() + shift + 0.3 * (noise[:, :, None] - 0.5), 0, 1)
        mask[y0:y0 + rh, x0:x0 + rw] = True
    return mask


def gen_toy_scene(size: int, change_rate: float, spec: DistortionSpec, seed: int) -> ToyScene:
    """One bitemporal scene; T2 is a distorted view of a changed, larger canvas.

    Drawing T2 from a canvas with a margin avoids black fill inside T2 itself;
    H_gt maps T1 pixel coordinates to T2 pixel coordinates.
    """
    disp = spec.max_corner_disp * size
    m = int(np.ceil(disp)) + 2
    canvas_t1 = gen_texture(size + 2 * m, size + 2 * m, seed).data
    rng = _rng(seed, spec.seed, 3)
    canvas_t2 = canvas_t1.copy()
    mask = _paint_changes(rng, canvas_t2, m, size, change_rate)
    offsets = draw_corner_offsets(DistortionSpec(spec.max_corner_disp, spec.seed * 1000003 + seed),
                                  size, size)
    H_gt = perspective_from_offsets(size, size, offsets)
    # T2(q) = canvas(H_gt^-1 q + m)
    H_canvas = H_gt @ Homography.translation(-m, -m)
    t2 = warp_perspective(Raster(canvas_t2), H_canvas, size, size)
    t1 = Raster(canvas_t1[m:m + size, m:m + size])
    return ToyScene(t1, t2, Raster(mask.astype(np.float32)), H_gt)


def gen_toy_cd_dataset(n_pairs: int, size: int = 256, change_rate: float = 0.05,
                       spec: DistortionSpec = DistortionSpec(), seed: int = 0) -> List[ToyScene]:
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    return [gen_toy_scene(size, change_rate, spec, seed * 100003 + i) for i in range(n_pairs)]


def gen_patch_corpus(n: int, size: int = 64, seed: int = 0) -> List[Raster]:
    """Unlabelled single-date patches for pretext training."""
    return [gen_texture(size, size, seed * 7919 + i) for i in range(n)]


# bundles --------------------------------------------------------------------

def save_scene(scene: ToyScene, directory) -> Path:
    """Write t1.png, t2.png, gt.png and h_gt.json into `directory`."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_png(scene.t1, d / "t1.png")
    save_png(scene.t2, d / "t2.png")
    save_mask_png(scene.gt_mask.data[:, :, 0], d / "gt.png")
    scene.H_gt.save(d / "h_gt.json")
    return d


def load_scene(directory) -> ToyScene:
    d = Path(directory)
    gt = load_png(d / "gt.png")
    return ToyScene(load_png(d / "t1.png"), load_png(d / "t2.png"),
                    Raster((gt.data > 0.5).astype(np.float32)), Homography.load(d / "h_gt.json"))
