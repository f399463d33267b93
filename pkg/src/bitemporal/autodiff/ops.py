"""Differentiable layers and losses.

Every function takes and returns :class:`Tensor` objects; image tensors use
NCHW layout. Backward closures return one gradient per parent.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, Tensor, make_node

EPS = 1e-8

Scalar = Union[int, float]


class ShapeError(ValueError):
    pass


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.value + b.value
    return make_node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.value - b.value
    return make_node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.value * b.value
    return make_node(out, (a, b), lambda g: (_unbroadcast(g * b.value, a.shape),
                                             _unbroadcast(g * a.value, b.shape)))


def neg(a: Tensor) -> Tensor:
    return make_node(-a.value, (a,), lambda g: (-g,))


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.value)
    return make_node(np.abs(a.value), (a,), lambda g: (g * sign,))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return make_node(np.where(mask, a.value, a.value.dtype.type(0)), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.value)
    return make_node(out, (a,), lambda g: (g * out * (1 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)


def stop_gradient(a: Tensor) -> Tensor:
    """Treat `a` as a constant: the result has no path back to `a`."""
    return Tensor(a.value)


# reductions and reshapes ---------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    """Sum of all entries as a float64 scalar."""
    return make_node(np.asarray(a.value.sum(dtype=np.float64)), (a,),
                     lambda g: (np.broadcast_to(g, a.shape).astype(a.value.dtype),))


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.value.mean(axis=axis, keepdims=keepdims, dtype=np.float64))
    if out.ndim:
        out = out.astype(a.value.dtype)
    n = a.value.size // max(out.size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).astype(a.value.dtype),)

    return make_node(out, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    return make_node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return make_node(np.ascontiguousarray(a.value.transpose(axes)), (a,),
                     lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW tensors along the channel axis."""
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"cannot concat {t.shape} with {ref}")
    sizes = [t.shape[1] for t in tensors]
    out = np.concatenate([t.value for t in tensors], axis=1)
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return make_node(out, tensors, backward)


# convolution ---------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with an OIkk kernel."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and OIkk weight")
    n, c, h, w = x.shape
    o, i, kh, kw = weight.shape
    if i != c:
        raise ShapeError(f"input has {c} channels, kernel expects {i}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"bias shape {bias.shape} != ({o},)")
    hp, wp = h + 2 * pad, w + 2 * pad
    if hp < kh or wp < kw:
        raise ShapeError("kernel larger than padded input")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.value, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.value
    # (n, c, ho, wo, kh, kw) view -> (n, ho, wo, c, kh, kw) columns
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.value.reshape(o, c * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.value
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, o)
        gw = (gmat.T @ cols).reshape(weight.shape) if _needs(weight) else None
        gb = gmat.sum(axis=0) if bias is not None and _needs(bias) else None
        gx = None
        if _needs(x):
            gcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros((n, c, hp, wp), dtype=gcols.dtype)
            for di in range(kh):
                for dj in range(kw):
                    gxp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += \
                        gcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    if bias is None:
        return make_node(out, parents, lambda g: backward(g)[:2])
    return make_node(out, parents, backward)


def _needs(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


# pooling and resampling ----------------------------------------------------

def avg_pool2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial size, got {h}x{w}")
    out = x.value.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        g = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * g.dtype.type(0.25)
        return (g,)

    return make_node(out.astype(x.value.dtype), (x,), backward)


@lru_cache(maxsize=64)
def _upsample_matrix(n: int) -> np.ndarray:
    """(2n, n) linear interpolation matrix with half-pixel centers and edge clamping."""
    m = np.zeros((2 * n, n), dtype=DTYPE)
    for o in range(2 * n):
        src = (o + 0.5) / 2 - 0.5
        src = min(max(src, 0.0), n - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n - 1)
        f = src - i0
        m[o, i0] += 1 - f
        m[o, i1] += f
    m.setflags(write=False)
    return m


def upsample_bilinear2x(x: Tensor) -> Tensor:
    """Double H and W with bilinear interpolation (half-pixel centers)."""
    n, c, h, w = x.shape
    uh, uw = _upsample_matrix(h), _upsample_matrix(w)
    tmp = np.matmul(uh, x.value)               # (n, c, 2h, w)
    out = np.matmul(tmp, uw.T)                 # (n, c, 2h, 2w)

    def backward(g):
        gt = np.matmul(g, uw)                  # (n, c, 2h, w)
        return (np.matmul(uh.T, gt),)

    return make_node(out, (x,), backward)


# normalization and similarity ----------------------------------------------

def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """x / (||x|| + eps) along `axis`."""
    v = x.value
    norm = np.sqrt((v.astype(np.float64) ** 2).sum(axis=axis, keepdims=True)).astype(v.dtype)
    den = norm + v.dtype.type(EPS)
    out = v / den

    def backward(g):
        # d/dx [x / (|x| + e)] = g/den - x * <g, x> / (|x| den^2)
        dot = (g * v).sum(axis=axis, keepdims=True)
        safe = np.where(norm > 0, norm, v.dtype.type(1))
        gx = g / den - v * dot / (safe * den * den)
        return (gx.astype(v.dtype),)

    return make_node(out.astype(v.dtype), (x,), backward)


def l2_normalize_rows(x: Tensor) -> Tensor:
    return l2_normalize(x, axis=-1)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """a.b / (|a||b| + eps) for two equal-length vectors."""
    av = a.value.astype(np.float64).ravel()
    bv = b.value.astype(np.float64).ravel()
    if av.shape != bv.shape or av.size < 1:
        raise ShapeError(f"cosine_similarity needs equal non-empty lengths, got {a.shape} and {b.shape}")
    na, nb = np.linalg.norm(av), np.linalg.norm(bv)
    den = na * nb + EPS
    dot = float(av @ bv)
    out = np.asarray(dot / den, dtype=np.float64)

    def backward(g):
        g = float(g)
        # d/da = b/den - dot * nb * (a/na) / den^2
        ga = bv / den - (dot * nb / den ** 2) * (av / na if na > 0 else 0 * av)
        gb = av / den - (dot * na / den ** 2) * (bv / nb if nb > 0 else 0 * bv)
        return ((g * ga).reshape(a.shape).astype(a.value.dtype),
                (g * gb).reshape(b.shape).astype(b.value.dtype))

    return make_node(out, (a, b), backward)


def cosine_similarity_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity of two (N, D) tensors -> (N,) in float64."""
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"need two equal (N, D) tensors, got {a.shape} and {b.shape}")
    av = a.value.astype(np.float64)
    bv = b.value.astype(np.float64)
    na = np.linalg.norm(av, axis=1, keepdims=True)
    nb = np.linalg.norm(bv, axis=1, keepdims=True)
    den = na * nb + EPS
    dot = (av * bv).sum(axis=1, keepdims=True)
    out = (dot / den)[:, 0]

    def backward(g):
        g = g[:, None]
        ua = np.divide(av, na, out=np.zeros_like(av), where=na > 0)
        ub = np.divide(bv, nb, out=np.zeros_like(bv), where=nb > 0)
        ga = bv / den - (dot * nb / den ** 2) * ua
        gb = av / den - (dot * na / den ** 2) * ub
        return (g * ga).astype(a.value.dtype), (g * gb).astype(b.value.dtype)

    return make_node(out, (a, b), backward)


def pretext_similarity_loss(z_top: Tensor, z_bottom: Tensor) -> Tensor:
    """Negative cosine similarity with the bottom branch detached.

    Vectors give a scalar; (N, D) batches give the mean over rows.
    """
    if z_top.shape != z_bottom.shape:
        raise ShapeError(f"embedding shapes differ: {z_top.shape} vs {z_bottom.shape}")
    if z_top.ndim == 2:
        return neg(mean(cosine_similarity_rows(z_top, stop_gradient(z_bottom))))
    return neg(cosine_similarity(z_top, stop_gradient(z_bottom)))


# losses --------------------------------------------------------------------

def bce_with_logits(logits: Tensor, target, weight: Optional[np.ndarray] = None) -> Tensor:
    """Mean binary cross-entropy on logits, stable for large |logit|.

    `weight` optionally masks pixels (e.g. zero outside a valid region); the
    mean is then taken over the weighted pixels.
    """
    t = target.value if isinstance(target, Tensor) else np.asarray(target, dtype=DTYPE)
    if t.shape != logits.shape:
        raise ShapeError(f"target shape {t.shape} != logits shape {logits.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("bce targets must be 0 or 1")
    x = logits.value.astype(np.float64)
    per = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    wgt = np.ones_like(x) if weight is None else np.broadcast_to(weight, x.shape).astype(np.float64)
    total = max(wgt.sum(), 1e-12)
    out = np.asarray((per * wgt).sum() / total, dtype=np.float64)

    def backward(g):
        return ((float(g) * (_sigmoid(x) - t) * wgt / total).astype(logits.value.dtype),)

    return make_node(out, (logits,), backward)


def dice_loss(logits: Tensor, target, smooth: float = 1.0) -> Tensor:
    """Soft Dice loss on sigmoid probabilities."""
    t = np.asarray(target.value if isinstance(target, Tensor) else target, dtype=np.float64)
    p = _sigmoid(logits.value).astype(np.float64)
    inter = (p * t).sum()
    denom = p.sum() + t.sum() + smooth
    out = np.asarray(1.0 - (2 * inter + smooth) / denom, dtype=np.float64)

    def backward(g):
        dp = -(2 * t * denom - (2 * inter + smooth)) / denom ** 2
        return ((float(g) * dp * p * (1 - p)).astype(logits.value.dtype),)

    return make_node(out, (logits,), backward)
