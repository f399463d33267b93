"""Raster images, homographies, tiling and perspective warping."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

import cv2
import numpy as np

PathLike = Union[str, Path]

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class DecodeError(ValueError):
    """Raised when an image file cannot be decoded."""


class GeometryError(ValueError):
    """Raised for invalid tiling or point-at-infinity mappings."""


class SingularHomographyError(GeometryError):
    pass


@dataclass(frozen=True)
class Raster:
    """An H x W x C image with float samples in [0, 1].

    The array is stored read-only, so rasters can be shared freely.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValueError(f"raster must be HxWx1 or HxWx3, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("raster samples must be finite")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("raster samples must lie in [0, 1]")
        if arr is self.data or np.shares_memory(arr, self.data):
            arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape

    def gray(self) -> np.ndarray:
        """Channel-mean intensity as an H x W float32 array."""
        if self.channels == 1:
            return self.data[:, :, 0]
        return self.data.mean(axis=2, dtype=np.float32)

    def crop(self, window: "Window") -> "Raster":
        y0, x0, s = window.y0, window.x0, window.size
        return Raster(self.data[y0:y0 + s, x0:x0 + s])

    @classmethod
    def from_array(cls, arr: np.ndarray, clip: bool = False) -> "Raster":
        arr = np.asarray(arr, dtype=np.float32)
        if clip:
            arr = np.clip(arr, 0.0, 1.0)
        return cls(arr)


@dataclass(frozen=True)
class Homography:
    """3x3 projective transform stored with m[2, 2] == 1."""

    m: np.ndarray

    def __post_init__(self):
        mat = np.array(self.m, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(mat)):
            raise SingularHomographyError("homography entries must be finite")
        if abs(mat[2, 2]) < 1e-12:
            raise SingularHomographyError("cannot normalize homography with m[2,2] == 0")
        mat = mat / mat[2, 2]
        mat[2, 2] = 1.0
        if abs(np.linalg.det(mat)) <= 1e-12:
            raise SingularHomographyError(f"homography is singular (det={np.linalg.det(mat):.3e})")
        mat.setflags(write=False)
        object.__setattr__(self, "m", mat)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        return cls(np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]]))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.m))

    def __matmul__(self, other: "Homography") -> "Homography":
        return Homography(self.m @ other.m)

    def to_list(self) -> List[float]:
        return [float(v) for v in self.m.ravel()]

    def to_json(self) -> str:
        return json.dumps(self.to_list())

    @classmethod
    def from_json(cls, text: str) -> "Homography":
        values = json.loads(text)
        if not isinstance(values, list) or len(values) != 9:
            raise ValueError("homography JSON must be an array of 9 numbers")
        return cls(np.array(values, dtype=np.float64))

    def save(self, path: PathLike) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: PathLike) -> "Homography":
        return cls.from_json(Path(path).read_text())


@dataclass(frozen=True)
class Window:
    x0: int
    y0: int
    size: int


def _png_header(path: Path) -> Tuple[int, int]:
    with open(path, "rb") as fh:
        head = fh.read(33)
    if len(head) < 33 or head[:8] != _PNG_SIGNATURE or head[12:16] != b"IHDR":
        raise DecodeError(f"{path}: not a PNG file")
    bit_depth, color_type = struct.unpack(">BB", head[24:26])
    return bit_depth, color_type


def load_png(path: PathLike) -> Raster:
    """Read an 8/16-bit grayscale or RGB(A) PNG; alpha is dropped."""
    path = Path(path)
    if not path.is_file():
        raise DecodeError(f"{path}: no such file")
    bit_depth, color_type = _png_header(path)
    # color types: 0 gray, 2 rgb, 3 palette, 4 gray+alpha, 6 rgba
    if color_type == 3:
        raise DecodeError(f"{path}: palette PNGs are not supported")
    if bit_depth not in (8, 16) or color_type not in (0, 2, 4, 6):
        raise DecodeError(f"{path}: unsupported PNG (bit depth {bit_depth}, color type {color_type})")
    flag = cv2.IMREAD_UNCHANGED
    if color_type == 4:
        # OpenCV expands gray+alpha to BGRA; read as gray instead.
        flag = cv2.IMREAD_GRAYSCALE | cv2.IMREAD_ANYDEPTH
    img = cv2.imread(str(path), flag)
    if img is None:
        raise DecodeError(f"{path}: decode failed")
    scale = 65535.0 if img.dtype == np.uint16 else 255.0
    if img.ndim == 2:
        img = img[:, :, None]
    elif img.shape[2] == 4:
        img = cv2.cvtColor(img, cv2.COLOR_BGRA2RGB)
    else:
        img = cv2.cvtColor(img, cv2.COLOR_BGR2RGB)
    return Raster(img.astype(np.float32) / np.float32(scale))


def to_uint8(raster: Raster) -> np.ndarray:
    return np.rint(raster.data * 255.0).astype(np.uint8)


def save_png(raster: Raster, path: PathLike) -> None:
    """Write an 8-bit PNG (gray for 1 channel, RGB for 3)."""
    if raster.channels not in (1, 3):
        raise ValueError(f"cannot save a {raster.channels}-channel raster as PNG")
    img = to_uint8(raster)
    if raster.channels == 3:
        img = cv2.cvtColor(img, cv2.COLOR_RGB2BGR)
    else:
        img = img[:, :, 0]
    path = Path(path)
    if not path.parent.is_dir():
        raise OSError(f"{path}: parent directory does not exist")
    if not cv2.imwrite(str(path), img):
        raise OSError(f"{path}: write failed")


def save_mask_png(mask: np.ndarray, path: PathLike) -> None:
    """Write a binary mask as a 0/255 single-channel PNG."""
    save_png(Raster((np.asarray(mask) > 0).astype(np.float32)), path)


def tile_grid(h: int, w: int, tile: int, stride: int) -> List[Window]:
    """Row-major square windows covering an h x w image.

    The last row/column is clamped to end at the border, so windows may overlap
    but never extend past the image.
    """
    if stride < 1:
        raise GeometryError("stride must be >= 1")
    if tile < 1 or tile > min(h, w):
        raise GeometryError(f"tile {tile} does not fit a {h}x{w} image")

    def starts(n: int) -> List[int]:
        out = list(range(0, n - tile + 1, stride))
        if out[-1] + tile < n:
            out.append(n - tile)
        return out

    return [Window(x0, y0, tile) for y0 in starts(h) for x0 in starts(w)]


def apply_homography_point(H: Homography, x: float, y: float) -> Tuple[float, float]:
    m = H.m
    w = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    if abs(w) <= 1e-12:
        raise GeometryError(f"point ({x}, {y}) maps to infinity")
    return ((m[0, 0] * x + m[0, 1] * y + m[0, 2]) / w,
            (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / w)


def apply_homography(H: Union[Homography, np.ndarray], pts: np.ndarray) -> np.ndarray:
    """Map an (N, 2) array of points; raises on points at infinity."""
    m = H.m if isinstance(H, Homography) else np.asarray(H, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    q = pts @ m[:, :2].T + m[:, 2]
    if np.any(np.abs(q[:, 2]) <= 1e-12):
        raise GeometryError("point maps to infinity")
    return q[:, :2] / q[:, 2:3]


def bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample an H x W x C array at float coordinates with zero padding.

    Neighbours outside the pixel lattice contribute zero.
    """
    h, w = img.shape[:2]
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = (xs - x0).astype(np.float32)[..., None]
    fy = (ys - y0).astype(np.float32)[..., None]
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    out = np.zeros(xs.shape + (img.shape[2],), dtype=np.float32)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi = x0 + dx
            yi = y0 + dy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            vals = np.zeros_like(out)
            vals[ok] = img[yi[ok], xi[ok]]
            out += vals * (wx * wy)
    return out


def warp_perspective(src: Raster, H: Homography, out_h: int, out_w: int) -> Raster:
    """Warp `src` by H using inverse mapping and bilinear sampling.

    Output pixel (x, y) takes the value of src at H^-1 (x, y); samples that
    fall outside src are zero.
    """
    hinv = np.linalg.inv(H.m)
    ys, xs = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    den = hinv[2, 0] * xs + hinv[2, 1] * ys + hinv[2, 2]
    safe = np.abs(den) > 1e-12
    den = np.where(safe, den, 1.0)
    sx = (hinv[0, 0] * xs + hinv[0, 1] * ys + hinv[0, 2]) / den
    sy = (hinv[1, 0] * xs + hinv[1, 1] * ys + hinv[1, 2]) / den
    # behind-the-camera and far-away samples are empty
    far = ~safe | (den < 0) | (np.abs(sx) > 1e7) | (np.abs(sy) > 1e7)
    sx[far] = -10.0
    sy[far] = -10.0
    out = bilinear_sample(src.data, sx, sy)
    np.clip(out, 0.0, 1.0, out=out)
    return Raster(out)


def valid_region(src_h: int, src_w: int, H: Homography, out_h: int, out_w: int) -> np.ndarray:
    """Boolean mask of output pixels whose source sample lies fully inside src."""
    ones = Raster(np.ones((src_h, src_w, 1), dtype=np.float32))
    return warp_perspective(ones, H, out_h, out_w).data[:, :, 0] >= 1.0 - 1e-4
