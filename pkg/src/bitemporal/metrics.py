"""Confusion counts and Pre/Rec/F1/IoU for binary change masks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .raster import Raster

MaskLike = Union[Raster, np.ndarray]


@dataclass(frozen=True)
class Confusion:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


@dataclass(frozen=True)
class Metrics:
    pre: float
    rec: float
    f1: float
    iou: float
    degenerate: bool = False

    def csv_row(self, scenario: str = "") -> str:
        return f"{scenario},{self.pre:.4f},{self.rec:.4f},{self.f1:.4f},{self.iou:.4f}"


CSV_HEADER = "scenario,pre,rec,f1,iou"


def _binary(mask: MaskLike, what: str) -> np.ndarray:
    arr = mask.data if isinstance(mask, Raster) else np.asarray(mask)
    if arr.ndim == 3:
        if arr.shape[2] != 1:
            raise ValueError(f"{what} must be single-channel")
        arr = arr[:, :, 0]
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{what} is not strictly binary")
    return arr.astype(bool)


def confusion(pred: MaskLike, gt: MaskLike, valid: Optional[np.ndarray] = None) -> Confusion:
    """Pixel counts with 'changed' as the positive class.

    `valid`, if given, restricts counting to pixels where it is true.
    """
    p = _binary(pred, "prediction")
    g = _binary(gt, "ground truth")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: prediction {p.shape} vs ground truth {g.shape}")
    if valid is not None:
        v = np.asarray(valid, dtype=bool)
        if v.shape != p.shape:
            raise ValueError("valid mask shape mismatch")
        p, g = p[v], g[v]
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return Confusion(tp, fp, fn, int(p.size) - tp - fp - fn)


def metrics(c: Confusion) -> Metrics:
    """Precision, recall, F1 and IoU; any 0/0 yields 0 and sets `degenerate`."""
    degenerate = False

    def ratio(num, den):
        nonlocal degenerate
        if den == 0:
            degenerate = True
            return 0.0
        return num / den

    pre = ratio(c.tp, c.tp + c.fp)
    rec = ratio(c.tp, c.tp + c.fn)
    f1 = ratio(2 * pre * rec, pre + rec)
    iou = ratio(c.tp, c.tp + c.fp + c.fn)
    return Metrics(pre, rec, f1, iou, degenerate)


def metrics_from_rates(pre: float, rec: float) -> Metrics:
    """F1 and IoU implied by a precision/recall pair (IoU = F1 / (2 - F1))."""
    if pre + rec == 0:
        return Metrics(pre, rec, 0.0, 0.0, True)
    f1 = 2 * pre * rec / (pre + rec)
    return Metrics(pre, rec, f1, f1 / (2 - f1))
