"""Change detection with a frozen encoder: feature fusion, decoder training, tiled inference."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import OptimState, Tensor
from .model import (Checkpoint, DecoderConfig, _check_patch, decode, encode, encoder_config,
                    init_decoder)
from .raster import GeometryError, Raster, save_mask_png, save_png, tile_grid

log = logging.getLogger(__name__)

# (t1 tile, t2 tile) -> H x W logits
TilePredictor = Callable[[Raster, Raster], np.ndarray]


@dataclass(frozen=True)
class CdPair:
    """Co-registered patches plus the change mask in the T1 frame.

    ``valid`` optionally marks pixels that carry real T2 content after
    alignment; the others get zero loss weight.
    """
    t1_patch: Raster
    t2_patch: Raster
    gt_mask: Raster
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        shapes = {self.t1_patch.shape[:2], self.t2_patch.shape[:2], self.gt_mask.shape[:2]}
        if len(shapes) != 1:
            raise ValueError(f"pair members differ in size: {sorted(shapes)}")
        if self.gt_mask.channels != 1:
            raise ValueError("gt_mask must be single-channel")
        if not np.all((self.gt_mask.data == 0) | (self.gt_mask.data == 1)):
            raise ValueError("gt_mask is not strictly binary")
        if self.valid is not None and np.shape(self.valid) != self.t1_patch.shape[:2]:
            raise ValueError("valid mask shape mismatch")


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 50
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    threshold: float = 0.5
    dice_weight: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")


# fusion ---------------------------------------------------------------------

def _upsample_to(deep: np.ndarray, side: int) -> np.ndarray:
    x = Tensor(deep[None])
    while x.shape[-1] < side:
        x = ad.upsample_bilinear2x(x)
    if x.shape[-1] != side:
        raise ad.ShapeError(f"cannot upsample {deep.shape[-1]} to {side} by doubling")
    return x.value[0]


def deep_features(patch: Raster, enc_ckpt: Checkpoint) -> np.ndarray:
    """Stride-8 deep features of one patch from the frozen encoder (C' x H/8 x W/8)."""
    enc = enc_ckpt.params.frozen()
    _check_patch(patch, enc["stage1.conv1.weight"].shape[1])
    _, deep = encode(Tensor(patch.data.transpose(2, 0, 1)[None]), enc)
    return deep.value[0]


def fuse_deep(patch: Raster, deep: np.ndarray) -> np.ndarray:
    """Concatenate the raw patch with deep features upsampled to patch size."""
    up = _upsample_to(deep, patch.width)
    return np.concatenate([patch.data.transpose(2, 0, 1), up.astype(np.float32)], axis=0)


def fuse_features(patch: Raster, enc_ckpt: Checkpoint) -> Tensor:
    """(C + C') x H x W fused tensor: raw patch next to upsampled deep features."""
    return Tensor(fuse_deep(patch, deep_features(patch, enc_ckpt)))


# fine-tuning ----------------------------------------------------------------

def _loss(logits: Tensor, target: np.ndarray, weight: np.ndarray, cfg: FinetuneConfig) -> Tensor:
    loss = ad.bce_with_logits(logits, target, weight)
    if cfg.dice_weight > 0:
        loss = ad.add(loss, ad.mul(ad.dice_loss(logits, target), cfg.dice_weight))
    return loss


def finetune(pairs: Sequence[CdPair], enc_ckpt: Checkpoint, cfg: FinetuneConfig = FinetuneConfig(),
             dec_cfg: Optional[DecoderConfig] = None) -> Tuple[Checkpoint, List[float]]:
    """Train a fresh decoder with AdamW; the encoder only runs forward.

    Deep features are computed once per patch, which is equivalent to
    recomputing them every step because the encoder never changes. The last
    partial batch of each epoch is dropped.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("finetune needs at least one pair")
    if len(pairs) < cfg.batch_size:
        raise ValueError(f"need at least {cfg.batch_size} pairs, got {len(pairs)}")
    deep_ch = encoder_config(enc_ckpt).deep_channels
    if dec_cfg is None:
        dec_cfg = DecoderConfig(feature_channels=pairs[0].t1_patch.channels + deep_ch)
    dec = init_decoder(dec_cfg, cfg.seed)
    cache = [(deep_features(p.t1_patch, enc_ckpt), deep_features(p.t2_patch, enc_ckpt)) for p in pairs]
    state = OptimState()
    n_batches = len(pairs) // cfg.batch_size
    losses: List[float] = []
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(pairs))
        total = 0.0
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            f1 = np.stack([fuse_deep(pairs[i].t1_patch, cache[i][0]) for i in idx])
            f2 = np.stack([fuse_deep(pairs[i].t2_patch, cache[i][1]) for i in idx])
            target = np.stack([pairs[i].gt_mask.data[:, :, 0] for i in idx])[:, None]
            weight = np.stack([np.ones(target.shape[2:], np.float32) if pairs[i].valid is None
                               else np.asarray(pairs[i].valid, np.float32) for i in idx])[:, None]
            dec.params.zero_grad()
            loss = _loss(decode(Tensor(f1), Tensor(f2), dec.params), target, weight, cfg)
            loss.backward()
            ad.adamw_step(dec.params, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay)
            total += float(loss.value)
        losses.append(total / n_batches)
        log.info("finetune epoch %d: loss %.4f", epoch, losses[-1])
    return dec, losses


# inference ------------------------------------------------------------------

def decoder_predictor(enc_ckpt: Checkpoint, dec_ckpt: Checkpoint) -> TilePredictor:
    """Tile predictor running the frozen encoder and the trained decoder."""
    dec = dec_ckpt.params.frozen()

    def predict(a: Raster, b: Raster) -> np.ndarray:
        f1, f2 = fuse_features(a, enc_ckpt), fuse_features(b, enc_ckpt)
        return decode(Tensor(f1.value[None]), Tensor(f2.value[None]), dec).value[0, 0]
    return predict


def stitch(tiles: Sequence[np.ndarray], windows, h: int, w: int) -> np.ndarray:
    """Average overlapping tile maps with uniform weights, in window order."""
    acc = np.zeros((h, w), dtype=np.float64)
    count = np.zeros((h, w), dtype=np.int64)
    for t, win in zip(tiles, windows):
        acc[win.y0:win.y0 + win.size, win.x0:win.x0 + win.size] += t
        count[win.y0:win.y0 + win.size, win.x0:win.x0 + win.size] += 1
    if np.any(count == 0):
        raise GeometryError("tiles do not cover the scene")
    return acc / count


def infer_scene(t1: Raster, t2_calibrated: Raster, enc_ckpt: Optional[Checkpoint],
                dec_ckpt: Union[Checkpoint, TilePredictor], tile: int = 256, stride: int = 128,
                threshold: float = 0.5) -> Tuple[Raster, Raster]:
    """Tiled prediction over a co-registered scene pair -> (probability map, mask).

    ``dec_ckpt`` may also be a callable mapping a tile pair to logits, which
    bypasses the encoder entirely.
    """
    if t1.shape != t2_calibrated.shape:
        raise GeometryError(f"scene extents differ: {t1.shape} vs {t2_calibrated.shape}")
    if min(t1.height, t1.width) < tile:
        raise GeometryError(f"scene {t1.height}x{t1.width} is smaller than one {tile}px tile")
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    predict = dec_ckpt if callable(dec_ckpt) else decoder_predictor(enc_ckpt, dec_ckpt)
    windows = tile_grid(t1.height, t1.width, tile, stride)
    probs = []
    for win in windows:
        logits = np.asarray(predict(t1.crop(win), t2_calibrated.crop(win)), dtype=np.float64)
        probs.append(ad.ops._sigmoid(logits))
    prob = stitch(probs, windows, t1.height, t1.width)
    mask = (prob >= threshold).astype(np.float32)
    return Raster(prob.astype(np.float32)[:, :, None]), Raster(mask[:, :, None])


def save_prediction(prob: Raster, mask: Raster, prob_path, mask_path) -> None:
    save_png(prob, prob_path)
    save_mask_png(mask.data[:, :, 0], mask_path)


def write_loss_log(losses: Sequence[float], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss"])
        for e, v in enumerate(losses):
            w.writerow([e, f"{v:.6f}"])
