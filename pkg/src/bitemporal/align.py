"""Keypoints, descriptors, matching and robust homography estimation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .model import Checkpoint, align_head, encode, raster_to_tensor
from .raster import (GeometryError, Homography, Raster, bilinear_sample,
                     tile_grid, warp_perspective)

log = logging.getLogger(__name__)


class AlignmentFailed(RuntimeError):
    """Not enough consistent matches to estimate a homography."""


class EstimationError(ValueError):
    """Degenerate point configuration for DLT."""


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    score: float


@dataclass(frozen=True)
class Descriptor:
    keypoint: Keypoint
    v: np.ndarray


@dataclass(frozen=True)
class Match:
    i: int
    j: int
    similarity: float


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 2000
    inlier_threshold_px: float = 3.0
    min_inliers: int = 12
    tau: float = 0.85
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.inlier_threshold_px <= 0:
            raise ValueError("inlier threshold must be positive")


@dataclass(frozen=True)
class AlignConfig:
    ransac: RansacConfig = field(default_factory=RansacConfig)
    tile: int = 256
    stride: int = 128
    max_keypoints: int = 300
    nms_radius: float = 4.0
    raw_patch_size: int = 17


# keypoints ------------------------------------------------------------------

_GAUSS3 = np.outer([1.0, 2.0, 1.0], [1.0, 2.0, 1.0]) / 16.0


def harris_response(gray: np.ndarray, k: float = 0.04) -> np.ndarray:
    g = np.asarray(gray, dtype=np.float64)
    ix = ndimage.sobel(g, axis=1, mode="nearest")
    iy = ndimage.sobel(g, axis=0, mode="nearest")
    sxx = ndimage.convolve(ix * ix, _GAUSS3, mode="nearest")
    syy = ndimage.convolve(iy * iy, _GAUSS3, mode="nearest")
    sxy = ndimage.convolve(ix * iy, _GAUSS3, mode="nearest")
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


def _as_gray(img) -> np.ndarray:
    if isinstance(img, Raster):
        return img.gray()
    arr = np.asarray(img, dtype=np.float32)
    return arr[:, :, 0] if arr.ndim == 3 else arr


def detect_keypoints(gray, max_k: int = 300, nms_radius: float = 4.0, k: float = 0.04,
                     rel_threshold: float = 0.01, border: int = 3) -> List[Keypoint]:
    """Harris corners, greedy radius NMS, strongest first.

    Candidates are 3x3 local maxima above `rel_threshold` times the peak
    response; positions are refined by a per-axis parabola fit.
    """
    g = _as_gray(gray)
    h, w = g.shape
    if h < 16 or w < 16:
        raise GeometryError(f"image {h}x{w} too small for keypoint detection")
    r = harris_response(g, k)
    peak = r.max()
    if not peak > 0:
        return []
    local_max = r == ndimage.maximum_filter(r, size=3, mode="nearest")
    cand = local_max & (r > rel_threshold * peak)
    cand[:border] = cand[-border:] = False
    cand[:, :border] = cand[:, -border:] = False
    ys, xs = np.nonzero(cand)
    scores = r[ys, xs]
    order = np.lexsort((xs, ys, -scores))
    ys, xs, scores = ys[order], xs[order], scores[order]

    # parabola refinement, clipped to half a pixel
    def offset(m, c, p):
        den = m - 2 * c + p
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(np.abs(den) > 1e-12, 0.5 * (m - p) / den, 0.0)
        return np.clip(d, -0.5, 0.5)

    xr = xs + offset(r[ys, xs - 1], scores, r[ys, xs + 1])
    yr = ys + offset(r[ys - 1, xs], scores, r[ys + 1, xs])

    kept: List[int] = []
    kx = np.empty(max_k)
    ky = np.empty(max_k)
    r2 = nms_radius * nms_radius
    for idx in range(len(xs)):
        if len(kept) >= max_k:
            break
        n = len(kept)
        if n and np.any((kx[:n] - xr[idx]) ** 2 + (ky[:n] - yr[idx]) ** 2 < r2):
            continue
        kx[n], ky[n] = xr[idx], yr[idx]
        kept.append(idx)
    return [Keypoint(float(xr[i]), float(yr[i]), float(scores[i])) for i in kept]


# descriptors ----------------------------------------------------------------

def _check_bounds(keypoints: Sequence[Keypoint], h: int, w: int) -> None:
    for kp in keypoints:
        if not (0 <= kp.x < w and 0 <= kp.y < h):
            raise GeometryError(f"keypoint ({kp.x:.2f}, {kp.y:.2f}) outside {w}x{h} patch")


def _unit_rows(v: np.ndarray) -> np.ndarray:
    n = np.sqrt((v.astype(np.float64) ** 2).sum(axis=1, keepdims=True))
    return (v / (n + 1e-12)).astype(np.float32)


def descriptor_map(patch: Raster, enc_ckpt: Checkpoint, head_ckpt: Checkpoint) -> np.ndarray:
    """Unit-vector map D x H/4 x W/4 from the frozen encoder and head."""
    desc, _ = encode(raster_to_tensor(patch), enc_ckpt.params.frozen())
    return align_head(desc, head_ckpt.params.frozen()).value[0]


def describe(patch: Raster, keypoints: Sequence[Keypoint], enc_ckpt: Checkpoint,
             head_ckpt: Checkpoint) -> List[Descriptor]:
    """Sample the head's unit-vector map at (x/4, y/4) and renormalize."""
    _check_bounds(keypoints, patch.height, patch.width)
    if not keypoints:
        return []
    dmap = descriptor_map(patch, enc_ckpt, head_ckpt)
    _, mh, mw = dmap.shape
    xs = np.clip(np.array([kp.x for kp in keypoints]) / 4.0, 0, mw - 1)
    ys = np.clip(np.array([kp.y for kp in keypoints]) / 4.0, 0, mh - 1)
    vecs = _unit_rows(bilinear_sample(dmap.transpose(1, 2, 0), xs, ys))
    return [Descriptor(kp, v) for kp, v in zip(keypoints, vecs)]


def describe_raw(gray, keypoints: Sequence[Keypoint], size: int = 17) -> List[Descriptor]:
    """Mean-removed, unit-norm grayscale patches centred on each keypoint."""
    g = _as_gray(gray)
    _check_bounds(keypoints, *g.shape)
    if not keypoints:
        return []
    half = (size - 1) / 2.0
    offs = np.arange(size) - half
    kx = np.array([kp.x for kp in keypoints])[:, None, None]
    ky = np.array([kp.y for kp in keypoints])[:, None, None]
    xs = kx + offs[None, None, :]
    ys = ky + offs[None, :, None]
    xs, ys = np.broadcast_arrays(xs, ys)
    patches = bilinear_sample(g[:, :, None], xs, ys)[..., 0].reshape(len(keypoints), -1)
    patches = patches - patches.mean(axis=1, keepdims=True)
    return [Descriptor(kp, v) for kp, v in zip(keypoints, _unit_rows(patches))]


def stack(descs: Sequence[Descriptor]) -> Tuple[np.ndarray, np.ndarray]:
    """(N, 2) coordinates and (N, D) vectors."""
    if not descs:
        return np.zeros((0, 2)), np.zeros((0, 0), dtype=np.float32)
    xy = np.array([[d.keypoint.x, d.keypoint.y] for d in descs], dtype=np.float64)
    return xy, np.stack([d.v for d in descs]).astype(np.float32)


# matching -------------------------------------------------------------------

def match_descriptors(d1: Sequence[Descriptor], d2: Sequence[Descriptor],
                      cfg: RansacConfig = RansacConfig()) -> List[Match]:
    """Mutual nearest neighbours by cosine similarity, kept if similarity >= tau.

    The result is ordered by similarity, highest first.
    """
    if not d1 or not d2:
        raise ValueError("cannot match an empty descriptor list")
    _, v1 = stack(d1)
    _, v2 = stack(d2)
    sim = np.clip(v1.astype(np.float64) @ v2.astype(np.float64).T, -1.0, 1.0)
    best_j = sim.argmax(axis=1)
    best_i = sim.argmax(axis=0)
    ii = np.arange(len(d1))
    mutual = best_i[best_j] == ii
    s = sim[ii, best_j]
    keep = mutual & (s >= cfg.tau)
    out = [Match(int(i), int(best_j[i]), float(s[i])) for i in ii[keep]]
    out.sort(key=lambda m: (-m.similarity, m.i, m.j))
    return out


# homography estimation ------------------------------------------------------

def _hartley(pts: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    if d < 1e-12:
        raise EstimationError("all points coincide")
    s = np.sqrt(2.0) / d
    T = np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])
    return (pts - c) * s, T


def dlt_homography(src, dst) -> Homography:
    """Normalized DLT: H with dst ~ H src for >= 4 point pairs."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) != len(dst):
        raise EstimationError("src and dst must have the same number of points")
    if len(src) < 4:
        raise EstimationError(f"need at least 4 correspondences, got {len(src)}")
    ns, ts = _hartley(src)
    nd, td = _hartley(dst)
    n = len(src)
    x, y = ns[:, 0], ns[:, 1]
    u, v = nd[:, 0], nd[:, 1]
    zero, one = np.zeros(n), np.ones(n)
    a = np.empty((2 * n, 9))
    a[0::2] = np.stack([x, y, one, zero, zero, zero, -u * x, -u * y, -u], axis=1)
    a[1::2] = np.stack([zero, zero, zero, x, y, one, -v * x, -v * y, -v], axis=1)
    _, sv, vt = np.linalg.svd(a)
    if sv[7] < 1e-9 * sv[0]:
        raise EstimationError("degenerate configuration (rank < 8)")
    hn = vt[-1].reshape(3, 3)
    m = np.linalg.inv(td) @ hn @ ts
    if abs(m[2, 2]) < 1e-12:
        raise EstimationError("homography maps the origin to infinity")
    try:
        return Homography(m / m[2, 2])
    except GeometryError as exc:
        raise EstimationError(str(exc)) from exc


def _collinear(p: np.ndarray, tol: float = 1e-6) -> bool:
    scale = max(np.ptp(p[:, 0]), np.ptp(p[:, 1]), 1e-12) ** 2
    for a, b, c in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        area = abs((p[b, 0] - p[a, 0]) * (p[c, 1] - p[a, 1]) - (p[b, 1] - p[a, 1]) * (p[c, 0] - p[a, 0]))
        if area < tol * scale:
            return True
    return False


def _reprojection_errors(m: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    q = src @ m[:, :2].T + m[:, 2]
    w = q[:, 2:3]
    w = np.where(np.abs(w) < 1e-12, 1e-12, w)
    return np.sqrt(((q[:, :2] / w - dst) ** 2).sum(axis=1))


def ransac_homography(src: np.ndarray, dst: np.ndarray, cfg: RansacConfig) -> Tuple[Homography, np.ndarray]:
    """Robust H with dst ~ H src; returns (H, boolean inlier mask)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n = len(src)
    if n < 4:
        raise AlignmentFailed(f"need at least 4 matches, got {n}")
    rng = np.random.default_rng(cfg.seed)
    thr = cfg.inlier_threshold_px
    best_count, best_cost, best_mask = -1, np.inf, None
    for _ in range(cfg.iterations):
        idx = rng.choice(n, size=4, replace=False)
        if _collinear(src[idx]) or _collinear(dst[idx]):
            continue
        try:
            H = dlt_homography(src[idx], dst[idx])
        except EstimationError:
            continue
        err = _reprojection_errors(H.m, src, dst)
        mask = err < thr
        count = int(mask.sum())
        cost = float(np.minimum(err, thr).sum())
        if count > best_count or (count == best_count and cost < best_cost):
            best_count, best_cost, best_mask = count, cost, mask
    if best_mask is None or best_count < 4:
        raise AlignmentFailed("no non-degenerate minimal sample found")

    # refit on the consensus set until it stops changing
    mask = best_mask
    H = None
    for _ in range(10):
        try:
            H_new = dlt_homography(src[mask], dst[mask])
        except EstimationError as exc:
            if H is None:
                raise AlignmentFailed(f"refit failed: {exc}") from exc
            break
        new_mask = _reprojection_errors(H_new.m, src, dst) < thr
        if new_mask.sum() < 4:
            break
        H = H_new
        if np.array_equal(new_mask, mask):
            break
        mask = new_mask
    if H is None:
        raise AlignmentFailed("refit failed")
    mask = _reprojection_errors(H.m, src, dst) < thr
    if mask.sum() < cfg.min_inliers:
        raise AlignmentFailed(f"only {int(mask.sum())} inliers, need {cfg.min_inliers}")
    return H, mask


def estimate_homography_ransac(matches: Sequence[Match], d1: Sequence[Descriptor],
                               d2: Sequence[Descriptor], cfg: RansacConfig = RansacConfig()
                               ) -> Tuple[Homography, List[Match]]:
    """H mapping d2 coordinates onto d1 coordinates, plus the inlier matches."""
    if len(matches) < 4:
        raise AlignmentFailed(f"need at least 4 matches, got {len(matches)}")
    xy1, _ = stack(d1)
    xy2, _ = stack(d2)
    dst = xy1[[m.i for m in matches]]
    src = xy2[[m.j for m in matches]]
    H, mask = ransac_homography(src, dst, cfg)
    return H, [m for m, ok in zip(matches, mask) if ok]


# scene alignment -----------------------------------------------------------

class AlignResult(NamedTuple):
    calibrated: Raster
    homography: Homography
    report: Dict


def _tile_owner(xy: np.ndarray, windows) -> np.ndarray:
    centers = np.array([[w.x0 + w.size / 2.0, w.y0 + w.size / 2.0] for w in windows])
    d = ((xy[:, None, :] - centers[None]) ** 2).sum(axis=2)
    return d.argmin(axis=1)


def scene_descriptors(scene: Raster, enc_ckpt: Optional[Checkpoint], head_ckpt: Optional[Checkpoint],
                      cfg: AlignConfig = AlignConfig()) -> List[Descriptor]:
    """Detect and describe per overlapping tile, in global coordinates.

    A keypoint is kept only by the tile whose centre is nearest to it, so
    overlapping tiles do not produce duplicates. Without checkpoints the
    raw-patch descriptor is used.
    """
    windows = tile_grid(scene.height, scene.width, cfg.tile, cfg.stride)
    out: List[Descriptor] = []
    for wi, win in enumerate(windows):
        patch = scene.crop(win)
        kps = detect_keypoints(patch.gray(), cfg.max_keypoints, cfg.nms_radius)
        if not kps:
            continue
        xy = np.array([[k.x + win.x0, k.y + win.y0] for k in kps])
        own = _tile_owner(xy, windows) == wi
        kps = [k for k, o in zip(kps, own) if o]
        if not kps:
            continue
        if enc_ckpt is None:
            descs = describe_raw(patch.gray(), kps, cfg.raw_patch_size)
        else:
            descs = describe(patch, kps, enc_ckpt, head_ckpt)
        for d in descs:
            kp = Keypoint(d.keypoint.x + win.x0, d.keypoint.y + win.y0, d.keypoint.score)
            out.append(Descriptor(kp, d.v))
    return out


def align_scene(t1: Raster, t2: Raster, enc_ckpt: Optional[Checkpoint] = None,
                head_ckpt: Optional[Checkpoint] = None, cfg: AlignConfig = AlignConfig()) -> AlignResult:
    """Estimate H (T2 -> T1 frame) and resample T2 onto T1's pixel grid.

    Pass ``enc_ckpt=None`` to use raw-patch descriptors instead of the
    learned head.
    """
    if min(t1.height, t1.width, t2.height, t2.width) < cfg.tile:
        raise GeometryError(f"scenes must be at least {cfg.tile}x{cfg.tile}")
    if (enc_ckpt is None) != (head_ckpt is None):
        raise ValueError("pass both encoder and head checkpoints, or neither")
    d1 = scene_descriptors(t1, enc_ckpt, head_ckpt, cfg)
    d2 = scene_descriptors(t2, enc_ckpt, head_ckpt, cfg)
    if not d1 or not d2:
        raise AlignmentFailed("no keypoints found in one of the scenes")
    matches = match_descriptors(d1, d2, cfg.ransac)
    log.info("align: %d/%d keypoints, %d matches", len(d1), len(d2), len(matches))
    H, inliers = estimate_homography_ransac(matches, d1, d2, cfg.ransac)
    xy1, _ = stack(d1)
    xy2, _ = stack(d2)
    src = xy2[[m.j for m in inliers]]
    dst = xy1[[m.i for m in inliers]]
    err = _reprojection_errors(H.m, src, dst)
    report = {
        "matches": len(matches),
        "inliers": len(inliers),
        "mean_error_px": float(err.mean()),
        "homography": H.to_list(),
    }
    calibrated = warp_perspective(t2, H, t1.height, t1.width)
    return AlignResult(calibrated, H, report)
