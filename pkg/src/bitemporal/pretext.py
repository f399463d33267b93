"""Self-supervised pre-training of the encoder and alignment head.

Each sample p goes through the top branch with gradients; its augmented
views go through the bottom branch as constants. Both branches share one
parameter set.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import OptimState, ParamSet, Tensor
from .model import (Checkpoint, EncoderConfig, _check_patch, align_head, encode, init_align_head,
                    init_encoder)
from .raster import Raster, bilinear_sample, load_png

log = logging.getLogger(__name__)


class CollapseWarning(UserWarning):
    pass


@dataclass(frozen=True)
class AugmentationSpec:
    gain: float = 1.0
    bias: float = 0.0
    quarter_turns: int = 0
    jitter_deg: float = 0.0
    hflip: bool = False
    seed: Optional[int] = None

    @property
    def rotation_deg(self) -> float:
        return 90.0 * self.quarter_turns + self.jitter_deg

    @classmethod
    def sample(cls, seed) -> "AugmentationSpec":
        """Draw every field from `seed` (an int or a sequence of ints)."""
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        return cls(gain=float(rng.uniform(0.6, 1.4)),
                   bias=float(rng.uniform(-0.2, 0.2)),
                   quarter_turns=int(rng.integers(0, 4)),
                   jitter_deg=float(rng.uniform(-15.0, 15.0)),
                   hflip=bool(rng.random() < 0.5),
                   seed=seed if isinstance(seed, int) else None)


def _rotate(img: np.ndarray, deg: float) -> np.ndarray:
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    t = np.deg2rad(deg)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse rotation of output coordinates
    dx, dy = xs - cx, ys - cy
    sx = np.cos(t) * dx + np.sin(t) * dy + cx
    sy = -np.sin(t) * dx + np.cos(t) * dy + cy
    return bilinear_sample(img, sx, sy)


def augment(p: Raster, spec: AugmentationSpec) -> Raster:
    """Gain/bias (clamped), quarter turns, jitter rotation, then optional flip."""
    if p.height != p.width:
        raise ValueError("augment expects a square patch")
    img = p.data
    if spec.gain != 1.0 or spec.bias != 0.0:
        img = np.clip(img * np.float32(spec.gain) + np.float32(spec.bias), 0.0, 1.0)
    if spec.quarter_turns % 4:
        img = np.rot90(img, k=spec.quarter_turns % 4, axes=(0, 1))
    if spec.jitter_deg != 0.0:
        img = np.clip(_rotate(img, spec.jitter_deg), 0.0, 1.0)
    if spec.hflip:
        img = img[:, ::-1]
    return Raster(np.ascontiguousarray(img, dtype=np.float32))


@dataclass(frozen=True)
class PretextConfig:
    epochs: int = 100
    batch_size: int = 16
    views: int = 2
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    collapse_variance: float = 1e-4
    center: bool = False

    def __post_init__(self):
        if self.views < 1:
            raise ValueError("views must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class PretrainResult:
    encoder: Checkpoint
    head: Checkpoint
    losses: List[float] = field(default_factory=list)


def embed(x: Tensor, enc: ParamSet, head: ParamSet) -> Tensor:
    """Batched pooled embedding: N x D unit vectors."""
    desc, _ = encode(x, enc)
    u = align_head(desc, head)
    return ad.l2_normalize(ad.mean(u, axis=(2, 3)), axis=1)


def _center(z: Tensor) -> Tensor:
    """Subtract the batch mean embedding (differentiable)."""
    return ad.sub(z, ad.mean(z, axis=0, keepdims=True))


def _batch(rasters: Sequence[Raster]) -> Tensor:
    return Tensor(np.stack([r.data.transpose(2, 0, 1) for r in rasters]))


def pooled_embedding(raster: Raster, enc: Union[Checkpoint, ParamSet],
                     head: Union[Checkpoint, ParamSet]) -> np.ndarray:
    enc_p = enc.params if isinstance(enc, Checkpoint) else enc
    head_p = head.params if isinstance(head, Checkpoint) else head
    _check_patch(raster, enc_p["stage1.conv1.weight"].shape[1])
    return embed(_batch([raster]), enc_p.frozen(), head_p.frozen()).value[0]


def load_patches(patch_dir) -> List[Raster]:
    paths = sorted(Path(patch_dir).glob("*.png"))
    return [load_png(p) for p in paths]


def _check_corpus(patches: Sequence[Raster], cfg: PretextConfig, in_channels: int) -> None:
    if len(patches) < cfg.batch_size:
        raise ValueError(f"need at least {cfg.batch_size} patches, got {len(patches)}")
    for p in patches:
        _check_patch(p, in_channels)


def pretrain(patches: Union[str, Path, Sequence[Raster]], cfg: PretextConfig = PretextConfig(),
             enc_cfg: EncoderConfig = EncoderConfig(),
             augmentation: Callable[[Raster, AugmentationSpec], Raster] = augment,
             init: Optional[tuple] = None) -> PretrainResult:
    """Minimise the mean over views of -cos(z(p), stopgrad(z(p_i))) with SGD-momentum.

    Deterministic given ``cfg.seed``; the last partial batch of each epoch is
    dropped. ``init`` optionally supplies (encoder, head) checkpoints to start from.
    """
    if isinstance(patches, (str, Path)):
        patches = load_patches(patches)
    patches = list(patches)
    _check_corpus(patches, cfg, enc_cfg.in_channels)
    if init is None:
        enc_ckpt, head_ckpt = init_encoder(enc_cfg, cfg.seed), init_align_head(enc_cfg, cfg.seed)
    else:
        enc_ckpt, head_ckpt = (Checkpoint(c.role, c.params.copy(), dict(c.config)) for c in init)
    params = ParamSet()
    for n, t in enc_ckpt.params.items():
        params[f"encoder.{n}"] = t
    for n, t in head_ckpt.params.items():
        params[f"head.{n}"] = t
    state = OptimState()
    n_batches = len(patches) // cfg.batch_size
    losses: List[float] = []

    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(patches))
        total = 0.0
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch = [patches[i] for i in idx]
            frozen_enc, frozen_head = enc_ckpt.params.frozen(), head_ckpt.params.frozen()
            views = []
            for v in range(cfg.views):
                aug = [augmentation(p, AugmentationSpec.sample([cfg.seed, epoch, int(i), v]))
                       for p, i in zip(batch, idx)]
                views.append(embed(_batch(aug), frozen_enc, frozen_head))
            params.zero_grad()
            z = embed(_batch(batch), enc_ckpt.params, head_ckpt.params)
            if cfg.center:
                z_top = _center(z)
                views = [Tensor(zv.value - zv.value.mean(axis=0, keepdims=True)) for zv in views]
            else:
                z_top = z
            terms = [ad.pretext_similarity_loss(z_top, zv) for zv in views]
            loss = terms[0]
            for t in terms[1:]:
                loss = ad.add(loss, t)
            loss = ad.mul(loss, 1.0 / cfg.views)
            value = float(loss.value)
            if not -1.0 - 1e-6 <= value <= 1.0 + 1e-6:
                raise FloatingPointError(f"pretext loss {value} left [-1, 1]")
            loss.backward()
            ad.sgd_momentum_step(params, state, cfg.lr, cfg.momentum, cfg.weight_decay)
            total += value
            var = float(z.value.var(axis=0).mean())
            if var < cfg.collapse_variance:
                warnings.warn(f"epoch {epoch} batch {b}: embedding variance {var:.2e} "
                              "suggests representational collapse", CollapseWarning)
        losses.append(total / n_batches)
        log.info("pretext epoch %d: loss %.4f", epoch, losses[-1])
    return PretrainResult(enc_ckpt, head_ckpt, losses)


def write_loss_log(losses: Sequence[float], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss"])
        for e, v in enumerate(losses):
            w.writerow([e, f"{v:.6f}"])
