"""Encoder, alignment head and change decoder, plus checkpoint files.

Checkpoint layout (all integers little-endian)::

    b"DCD1" | u32 version | u8 role | u32 len | config JSON
    | u32 count | per tensor: u16 len, name, u8 ndim, u32 dims..., float32 data
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .raster import Raster

MAGIC = b"DCD1"
FORMAT_VERSION = 1
ROLES = ("encoder", "align_head", "decoder")


class CheckpointError(ValueError):
    """Malformed, truncated or incompatible checkpoint file."""


class RoleMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 3
    stage_channels: Tuple[int, ...] = (16, 32, 64)
    descriptor_dim: int = 64
    patch_size: int = 256

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        if len(self.stage_channels) != 3:
            raise ValueError("encoder needs exactly three stages")

    @property
    def desc_channels(self) -> int:
        return self.stage_channels[2]

    @property
    def deep_channels(self) -> int:
        return self.stage_channels[2]


@dataclass(frozen=True)
class DecoderConfig:
    feature_channels: int = 3 + 64
    channels: Tuple[int, ...] = (32, 32, 16)

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))


@dataclass
class Checkpoint:
    role: str
    params: ParamSet
    config: Dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown checkpoint role {self.role!r}")

    def digest(self) -> str:
        return self.params.digest()


# initialization -------------------------------------------------------------

def _glorot(rng: np.random.Generator, shape: Sequence[int]) -> np.ndarray:
    o, i, kh, kw = shape
    fan_in, fan_out = i * kh * kw, o * kh * kw
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def _init(shapes: Dict[str, Tuple[int, ...]], seed: int) -> ParamSet:
    rng = np.random.default_rng(seed)
    params = ParamSet()
    for name in sorted(shapes):
        shape = shapes[name]
        if name.endswith(".bias"):
            params[name] = Tensor(np.zeros(shape, dtype=np.float32))
        else:
            params[name] = Tensor(_glorot(rng, shape))
    return params


def encoder_shapes(cfg: EncoderConfig) -> Dict[str, Tuple[int, ...]]:
    shapes = {}
    cin = cfg.in_channels
    for s, c in enumerate(cfg.stage_channels, start=1):
        shapes[f"stage{s}.conv1.weight"] = (c, cin, 3, 3)
        shapes[f"stage{s}.conv1.bias"] = (c,)
        shapes[f"stage{s}.conv2.weight"] = (c, c, 3, 3)
        shapes[f"stage{s}.conv2.bias"] = (c,)
        cin = c
    return shapes


def head_shapes(cfg: EncoderConfig) -> Dict[str, Tuple[int, ...]]:
    c = cfg.desc_channels
    return {
        "proj1.weight": (c, c, 1, 1), "proj1.bias": (c,),
        "proj2.weight": (cfg.descriptor_dim, c, 1, 1), "proj2.bias": (cfg.descriptor_dim,),
    }


def decoder_shapes(cfg: DecoderConfig) -> Dict[str, Tuple[int, ...]]:
    c1, c2, c3 = cfg.channels
    cin = 3 * cfg.feature_channels
    return {
        "block1.weight": (c1, cin, 3, 3), "block1.bias": (c1,),
        "block2.weight": (c2, c1, 3, 3), "block2.bias": (c2,),
        "block3.weight": (c3, c2, 3, 3), "block3.bias": (c3,),
        "out.weight": (1, c3, 1, 1), "out.bias": (1,),
    }


def init_encoder(cfg: EncoderConfig = EncoderConfig(), seed: int = 0) -> Checkpoint:
    return Checkpoint("encoder", _init(encoder_shapes(cfg), seed), _config_dict(cfg))


def init_align_head(cfg: EncoderConfig = EncoderConfig(), seed: int = 0) -> Checkpoint:
    return Checkpoint("align_head", _init(head_shapes(cfg), seed + 1), _config_dict(cfg))


def init_decoder(cfg: DecoderConfig = DecoderConfig(), seed: int = 0) -> Checkpoint:
    return Checkpoint("decoder", _init(decoder_shapes(cfg), seed + 2), _config_dict(cfg))


def _config_dict(cfg) -> Dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def encoder_config(ckpt: Checkpoint) -> EncoderConfig:
    return EncoderConfig(**ckpt.config) if ckpt.config else EncoderConfig()


def decoder_config(ckpt: Checkpoint) -> DecoderConfig:
    return DecoderConfig(**ckpt.config) if ckpt.config else DecoderConfig()


# forward passes -------------------------------------------------------------

def raster_to_tensor(raster: Raster) -> Tensor:
    """H x W x C raster -> 1 x C x H x W tensor."""
    return Tensor(np.ascontiguousarray(raster.data.transpose(2, 0, 1))[None])


def _params(p: Union[ParamSet, Checkpoint]) -> ParamSet:
    return p.params if isinstance(p, Checkpoint) else p


def encode(x: Tensor, params: Union[ParamSet, Checkpoint]) -> Tuple[Tensor, Tensor]:
    """Batched encoder: NCHW input -> (stride-4 descriptor source, stride-8 deep features).

    Each stage is conv3x3-ReLU-conv3x3-ReLU-avgpool2. The descriptor source is
    the last stage's activation just before its pooling.
    """
    p = _params(params)
    h = x
    pre_pool = None
    for s in (1, 2, 3):
        h = ad.relu(ad.conv2d(h, p[f"stage{s}.conv1.weight"], p[f"stage{s}.conv1.bias"], 1, 1))
        h = ad.relu(ad.conv2d(h, p[f"stage{s}.conv2.weight"], p[f"stage{s}.conv2.bias"], 1, 1))
        pre_pool = h
        h = ad.avg_pool2(h)
    return pre_pool, h


def _check_patch(raster: Raster, in_channels: int) -> None:
    if raster.height != raster.width:
        raise ad.ShapeError(f"patch must be square, got {raster.height}x{raster.width}")
    if raster.height % 8:
        raise ad.ShapeError(f"patch side {raster.height} is not divisible by 8")
    if raster.channels != in_channels:
        raise ad.ShapeError(f"patch has {raster.channels} channels, encoder expects {in_channels}")


def encoder_forward(raster: Raster, params: Union[ParamSet, Checkpoint]) -> Tuple[Tensor, Tensor]:
    """Encode one patch; returns (C x H/4 x W/4, C' x H/8 x W/8) tensors."""
    _check_patch(raster, _params(params)["stage1.conv1.weight"].shape[1])
    desc, deep = encode(raster_to_tensor(raster), params)
    return Tensor(desc.value[0]), Tensor(deep.value[0])


def align_head(desc: Tensor, params: Union[ParamSet, Checkpoint]) -> Tensor:
    """Batched head: 1x1 conv, ReLU, 1x1 conv, unit-normalize each position."""
    p = _params(params)
    h = ad.relu(ad.conv2d(desc, p["proj1.weight"], p["proj1.bias"]))
    h = ad.conv2d(h, p["proj2.weight"], p["proj2.bias"])
    return ad.l2_normalize(h, axis=1)


def align_head_forward(desc_map: Tensor, params: Union[ParamSet, Checkpoint]) -> Tensor:
    single = desc_map.ndim == 3
    if single:
        desc_map = ad.reshape(desc_map, (1,) + desc_map.shape)
    if desc_map.ndim != 4:
        raise ad.ShapeError(f"descriptor map must be CxHxW or NCHW, got {desc_map.shape}")
    out = align_head(desc_map, params)
    return ad.reshape(out, out.shape[1:]) if single else out


def decode(f_t1: Tensor, f_t2: Tensor, params: Union[ParamSet, Checkpoint]) -> Tensor:
    """Batched decoder on fused NCHW features -> N x 1 x H x W logits."""
    if f_t1.shape != f_t2.shape:
        raise ad.ShapeError(f"temporal features differ in shape: {f_t1.shape} vs {f_t2.shape}")
    p = _params(params)
    diff = ad.absolute(ad.sub(f_t1, f_t2))
    x = ad.concat_channels([diff, f_t1, f_t2])
    x = ad.relu(ad.conv2d(x, p["block1.weight"], p["block1.bias"], stride=2, pad=1))
    x = ad.relu(ad.conv2d(x, p["block2.weight"], p["block2.bias"], stride=2, pad=1))
    x = ad.upsample_bilinear2x(x)
    x = ad.relu(ad.conv2d(x, p["block3.weight"], p["block3.bias"], stride=1, pad=1))
    x = ad.upsample_bilinear2x(x)
    return ad.conv2d(x, p["out.weight"], p["out.bias"])


def decoder_forward(f_t1: Tensor, f_t2: Tensor, params: Union[ParamSet, Checkpoint]) -> Tensor:
    if f_t1.shape != f_t2.shape:
        raise ad.ShapeError(f"temporal features differ in shape: {f_t1.shape} vs {f_t2.shape}")
    if f_t1.ndim == 3:
        out = decode(ad.reshape(f_t1, (1,) + f_t1.shape), ad.reshape(f_t2, (1,) + f_t2.shape), params)
        return ad.reshape(out, out.shape[1:])
    return decode(f_t1, f_t2, params)


# checkpoint I/O -------------------------------------------------------------

def save_checkpoint(ckpt: Checkpoint, path) -> None:
    cfg = json.dumps(ckpt.config, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<IB", FORMAT_VERSION, ROLES.index(ckpt.role)),
             struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(ckpt.params))]
    for name, t in ckpt.params.items():
        raw = name.encode()
        arr = np.ascontiguousarray(t.value, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expected_role: Optional[str] = None) -> Checkpoint:
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    version, role_code = r.unpack("<IB")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    if role_code >= len(ROLES):
        raise CheckpointError(f"{path}: unknown role code {role_code}")
    role = ROLES[role_code]
    if expected_role is not None and role != expected_role:
        raise RoleMismatchError(f"{path}: expected a {expected_role} checkpoint, found {role}")
    (cfg_len,) = r.unpack("<I")
    try:
        config = json.loads(r.take(cfg_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt config block") from exc
    (count,) = r.unpack("<I")
    params = ParamSet()
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I") if ndim else ()
        n = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32).reshape(dims)
        params[name] = Tensor(data)
    if r.pos != len(r.buf):
        raise CheckpointError(f"{path}: trailing bytes after tensor table")
    return Checkpoint(role, params, config, version)
