"""Encoder with inception large-kernel attention and a deformable block.

Parameters live in a plain ``dict[str, Tensor]`` whose insertion order is
the declaration order (and the checkpoint order).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .nn_ops import (ConvSpec, batchnorm2d, bilinear_sample, conv2d, deformable_conv2d,
                     depthwise_conv2d, relu, same_padding)
from .tensor import ShapeError, Tensor

BN_EPS = 1e-5


class InputTooSmallError(ShapeError):
    pass


@dataclass(frozen=True)
class LKAConfig:
    channels: int = 64
    dilation: int = 3
    kernel: int = 21
    inception: tuple[int, ...] = (3, 5)

    def __post_init__(self):
        object.__setattr__(self, "inception", tuple(int(r) for r in self.inception))
        if self.dilation < 1 or self.kernel < 1:
            raise ValueError("dilation and kernel must be >= 1")
        for k in (self.dw_kernel, self.dwd_kernel, *self.inception):
            if k < 1 or k % 2 == 0:
                raise ValueError(f"kernel sizes must be odd and >= 1, got {k}")

    @property
    def dw_kernel(self) -> int:
        return 2 * self.dilation - 1

    @property
    def dwd_kernel(self) -> int:
        return math.ceil(self.kernel / self.dilation)

    @property
    def receptive_step(self) -> int:
        return self.dilation * (self.dwd_kernel - 1) + 1


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    channels: int = 64
    n_blocks: int = 2
    n_clusters: int = 100
    lka_kernel: int = 21
    dilation: int = 3
    inception: tuple[int, ...] = (3, 5)
    deform_kernel: int = 3
    seed: int = 0
    dtype: str = "float64"
    head_norm: bool = True
    gate_init: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "inception", tuple(int(r) for r in self.inception))
        if self.in_channels not in (1, 3):
            raise ValueError("in_channels must be 1 or 3")
        if self.n_clusters < 2 or self.n_blocks < 1 or self.channels < 8:
            raise ValueError("need n_clusters >= 2, n_blocks >= 1, channels >= 8")
        if self.deform_kernel < 1 or self.deform_kernel % 2 == 0:
            raise ValueError("deform_kernel must be odd")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")
        self.lka  # validates kernel arithmetic

    @property
    def lka(self) -> LKAConfig:
        return LKAConfig(self.channels, self.dilation, self.lka_kernel, self.inception)

    @property
    def min_size(self) -> int:
        return self.lka.receptive_step


# -- parameter counting ---------------------------------------------------

def attention_path_params(channels: int, kernel: int, dilation: int, inception=(3, 5)) -> int:
    """Kernel weights of one attention path (inception DW, DW-D, 1x1); biases excluded."""
    lka = LKAConfig(channels, dilation, kernel, tuple(inception))
    dw = sum(channels * r * r for r in lka.inception)
    dwd = channels * lka.dwd_kernel ** 2
    return dw + dwd + channels * channels


def dense_conv_params(channels: int, kernel: int) -> int:
    """Weights of the dense kernel x kernel, C -> C convolution being replaced."""
    return channels * channels * kernel * kernel


# -- initialisation -------------------------------------------------------

def init_params(cfg: ModelConfig) -> dict[str, Tensor]:
    dtype = np.dtype(cfg.dtype)
    rng = np.random.default_rng(cfg.seed)
    params: dict[str, Tensor] = {}

    def kaiming(name, shape):
        fan_in = int(np.prod(shape[1:]))
        bound = math.sqrt(6.0 / fan_in)
        params[name] = Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)

    def const(name, shape, value):
        params[name] = Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)

    c, lka = cfg.channels, cfg.lka
    kaiming("stem.conv.w", (c, cfg.in_channels, 3, 3))
    const("stem.bn.gamma", (c,), 1.0)
    const("stem.bn.beta", (c,), 0.0)
    for b in range(cfg.n_blocks):
        p = f"block{b}."
        kaiming(p + "proj.w", (c, c, 1, 1))
        const(p + "proj.b", (c,), 0.0)
        for r in lka.inception:
            kaiming(p + f"inc{r}.w", (c, 1, r, r))
        kaiming(p + "dwd.w", (c, 1, lka.dwd_kernel, lka.dwd_kernel))
        if cfg.gate_init == "identity":
            const(p + "attn.w", (c, c, 1, 1), 0.0)
            const(p + "attn.b", (c,), 1.0)
        else:
            kaiming(p + "attn.w", (c, c, 1, 1))
            const(p + "attn.b", (c,), 0.0)
        kaiming(p + "fuse.w", (c, c, 1, 1))
        const(p + "bn.gamma", (c,), 1.0)
        const(p + "bn.beta", (c,), 0.0)
    k = cfg.deform_kernel
    const("deform.offset.w", (2 * k * k, c, 3, 3), 0.0)
    const("deform.offset.b", (2 * k * k,), 0.0)
    kaiming("deform.conv.w", (c, c, k, k))
    const("deform.bn.gamma", (c,), 1.0)
    const("deform.bn.beta", (c,), 0.0)
    kaiming("head.main.w", (cfg.n_clusters, c, 1, 1))
    const("head.main.b", (cfg.n_clusters,), 0.0)
    if cfg.head_norm:
        const("head.main.bn.gamma", (cfg.n_clusters,), 1.0)
        const("head.main.bn.beta", (cfg.n_clusters,), 0.0)
    kaiming("head.aux.w", (cfg.n_clusters, c, 1, 1))
    const("head.aux.b", (cfg.n_clusters,), 0.0)
    if cfg.head_norm:
        const("head.aux.bn.gamma", (cfg.n_clusters,), 1.0)
        const("head.aux.bn.beta", (cfg.n_clusters,), 0.0)
    return params


# -- forward --------------------------------------------------------------

def _pointwise(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    spec = ConvSpec(x.shape[1], w.shape[0], 1)
    return conv2d(x, w, b, spec)


def _depthwise(x: Tensor, w: Tensor, dilation: int = 1) -> Tensor:
    c, k = x.shape[1], w.shape[-1]
    spec = ConvSpec(c, c, k, padding=same_padding(k, dilation), dilation=dilation, groups=c)
    return depthwise_conv2d(x, w, spec)


def attention(x: Tensor, params: dict[str, Tensor], prefix: str, lka: LKAConfig) -> tuple[Tensor, Tensor]:
    """Return (F(x), attention map) for one block."""
    feat = _pointwise(x, params[prefix + "proj.w"], params[prefix + "proj.b"])
    inc = feat
    for r in lka.inception:
        inc = inc + _depthwise(feat, params[prefix + f"inc{r}.w"])
    long_range = _depthwise(inc, params[prefix + "dwd.w"], lka.dilation)
    attn = _pointwise(long_range, params[prefix + "attn.w"], params[prefix + "attn.b"])
    return feat, attn


def ilka_block(x: Tensor, params: dict[str, Tensor], lka: LKAConfig, index: int = 0) -> Tensor:
    if x.data.ndim != 4 or x.shape[1] != lka.channels:
        raise ShapeError(f"block expects {lka.channels} channels, got shape {x.shape}")
    p = f"block{index}."
    feat, attn = attention(x, params, p, lka)
    gated = T.mul(attn, feat)
    fused = _pointwise(gated + x, params[p + "fuse.w"], None)
    return relu(batchnorm2d(fused, params[p + "bn.gamma"], params[p + "bn.beta"], BN_EPS))


def deformable_block(x: Tensor, params: dict[str, Tensor], kernel: int) -> Tensor:
    c = x.shape[1]
    off_spec = ConvSpec(c, 2 * kernel * kernel, 3, padding=1)
    offset = conv2d(x, params["deform.offset.w"], params["deform.offset.b"], off_spec)
    spec = ConvSpec(c, c, kernel, padding=same_padding(kernel))
    y = deformable_conv2d(x, offset, params["deform.conv.w"], None, spec)
    return relu(batchnorm2d(y, params["deform.bn.gamma"], params["deform.bn.beta"], BN_EPS))


def encode(image: Tensor, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    if image.data.ndim != 4 or image.shape[0] != 1 or image.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected image of shape (1,{cfg.in_channels},H,W), got {image.shape}")
    h, w = image.shape[2:]
    if min(h, w) < cfg.min_size:
        raise InputTooSmallError(f"image {h}x{w} smaller than receptive step {cfg.min_size}")
    spec = ConvSpec(cfg.in_channels, cfg.channels, 3, padding=1)
    x = conv2d(image, params["stem.conv.w"], None, spec)
    x = relu(batchnorm2d(x, params["stem.bn.gamma"], params["stem.bn.beta"], BN_EPS))
    for b in range(cfg.n_blocks):
        x = ilka_block(x, params, cfg.lka, b)
    return deformable_block(x, params, cfg.deform_kernel)


def head(features: Tensor, params: dict[str, Tensor], which: str = "main") -> Tensor:
    logits = _pointwise(features, params[f"head.{which}.w"], params[f"head.{which}.b"])
    if f"head.{which}.bn.gamma" in params:
        logits = batchnorm2d(logits, params[f"head.{which}.bn.gamma"], params[f"head.{which}.bn.beta"], BN_EPS)
    return T.softmax_channels(logits)


def forward(image: Tensor, params: dict[str, Tensor], cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Return (features, soft prediction) for a (1, Cin, H, W) image."""
    features = encode(image, params, cfg)
    return features, head(features, params, "main")


def surrogate_forward(features: Tensor, grid, params: dict[str, Tensor]) -> Tensor:
    """Warp features through ``grid`` and apply the auxiliary head."""
    g = grid.data if isinstance(grid, Tensor) else np.asarray(grid)
    if g.ndim == 3:
        g = g[None]
    if g.shape[1:3] != features.shape[2:]:
        raise ShapeError(f"grid {g.shape} does not match features {features.shape}")
    warped = bilinear_sample(features, g.astype(features.dtype))
    return head(warped, params, "aux")


# -- checkpoint -----------------------------------------------------------

MAGIC = b"S3NT"
VERSION = 1


def save_checkpoint(path, params: dict[str, Tensor], cfg: ModelConfig) -> None:
    """Flat little-endian layout: header, config ints, then named float32 tensors."""
    ints = [cfg.in_channels, cfg.channels, cfg.n_blocks, cfg.n_clusters, cfg.lka_kernel,
            cfg.dilation, cfg.deform_kernel, cfg.seed, len(cfg.inception), *cfg.inception]
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", VERSION)
    buf += struct.pack(f"<I{len(ints)}q", len(ints), *ints)
    buf += struct.pack("<I", len(params))
    for name, t in params.items():
        raw = name.encode()
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack(f"<I{t.data.ndim}I", t.data.ndim, *t.shape)
        buf += np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> tuple[dict[str, Tensor], ModelConfig]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError("not an s3seg checkpoint")
    pos = 4
    (version,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (n_ints,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    ints = struct.unpack_from(f"<{n_ints}q", blob, pos)
    pos += 8 * n_ints
    cin, c, nb, k, kl, d, dk, seed, n_inc = ints[:9]
    inception = tuple(ints[9:9 + n_inc])
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    params: dict[str, Tensor] = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + ln].decode()
        pos += ln
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        size = int(np.prod(shape))
        data = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        params[name] = Tensor(data.astype(np.float64), requires_grad=True)
    cfg = ModelConfig(cin, c, nb, k, kl, d, inception, dk, seed,
                      head_norm="head.main.bn.gamma" in params)
    return params, cfg
