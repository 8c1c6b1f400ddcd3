"""Self-labelling cross-entropy, Sobel spatial consistency, affine consistency."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn_ops import ConvSpec, depthwise_conv2d, pad2d
from .tensor import ContractError, ShapeError, Tensor

LOG_FLOOR = 1e-12

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T.copy()
SOBEL_XY = np.array([[0, 1, 2], [-1, 0, 1], [-2, -1, 0]], dtype=np.float64)


class DegenerateTransformError(ValueError):
    """The affine warp left no valid pixel to supervise."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    ce: float = 1.2
    affine: float = 0.3
    spatial: float = 0.3

    def __post_init__(self):
        if min(self.ce, self.affine, self.spatial) < 0:
            raise ConfigError(f"loss weights must be non-negative: {self}")
        if max(self.ce, self.affine, self.spatial) <= 0:
            raise ConfigError("at least one loss weight must be positive")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.ce, self.affine, self.spatial)


SKIN = LossWeights(1.2, 0.3, 0.3)
LUNG = LossWeights(1.0, 0.5, 0.6)


@dataclass
class EdgeMaps:
    ex: Tensor
    ey: Tensor
    exy: Tensor


def _labels(Y, shape) -> np.ndarray:
    Y = np.asarray(Y)
    n, k, h, w = shape
    if Y.shape == (h, w):
        Y = Y[None]
    if Y.shape != (n, h, w):
        raise ShapeError(f"label map {Y.shape} does not match prediction {shape}")
    if Y.min() < 0 or Y.max() >= k:
        raise ContractError(f"label outside [0, {k})")
    return Y


def self_label_ce(S: Tensor, Y) -> Tensor:
    """Mean over pixels of -log S[label]; ``Y`` is a plain integer array."""
    Y = _labels(Y, S.shape)
    picked = T.clamp_min(T.take_channel(S, Y), LOG_FLOOR)
    return -T.mean(T.log(picked))


def sobel_edges(S: Tensor) -> EdgeMaps:
    """Valid-region Sobel responses per channel, zero-padded back to H x W.

    Each kernel is applied as (positive taps) - (negative taps). Both halves
    carry the weights 1, 2, 1 in the same tap order, so flat regions cancel
    to exactly zero rather than to rounding noise.
    """
    n, k, h, w = S.shape
    if h < 3 or w < 3:
        raise ShapeError(f"sobel needs H, W >= 3, got {h}x{w}")
    spec = ConvSpec(k, k, 3, groups=k)

    def half(kern):
        return Tensor(np.broadcast_to(kern.astype(S.dtype), (k, 1, 3, 3)).copy())

    maps = []
    for kern in (SOBEL_X, SOBEL_Y, SOBEL_XY):
        pos = depthwise_conv2d(S, half(np.maximum(kern, 0)), spec)
        neg = depthwise_conv2d(S, half(np.maximum(-kern, 0)), spec)
        maps.append(pad2d(pos - neg, 1))
    return EdgeMaps(*maps)


def spatial_consistency(S: Tensor) -> Tensor:
    """Pairwise L1 disagreement of X, Y and XY edges, averaged over H*W*K."""
    e = sobel_edges(S)
    total = (T.tensor_sum(abs(e.ex - e.ey)) + T.tensor_sum(abs(e.ex - e.exy))
             + T.tensor_sum(abs(e.ey - e.exy)))
    n, k, h, w = S.shape
    return total * (1.0 / (n * h * w * k))


def affine_consistency(S_aux: Tensor, Y_a, valid) -> Tensor:
    """Masked mean cross-entropy of the surrogate prediction vs warped labels."""
    valid = np.asarray(valid, dtype=bool)
    n, k, h, w = S_aux.shape
    if valid.shape == (h, w):
        valid = valid[None]
    count = int(valid.sum())
    if count == 0:
        raise DegenerateTransformError("affine warp left no valid pixels")
    Y_a = np.asarray(Y_a)
    if Y_a.ndim == 2:
        Y_a = Y_a[None]
    Y_a = _labels(np.where(valid, Y_a, 0), S_aux.shape)
    picked = T.clamp_min(T.take_channel(S_aux, Y_a), LOG_FLOOR)
    mask = Tensor(valid.astype(S_aux.dtype))
    return T.tensor_sum(T.mul(T.log(picked), mask)) * (-1.0 / count)


def joint(l_ce: Tensor, l_at: Tensor, l_s: Tensor, w: LossWeights) -> Tensor:
    for t in (l_ce, l_at, l_s):
        if t.size != 1:
            raise ShapeError("joint expects scalar losses")
    return l_ce * w.ce + l_at * w.affine + l_s * w.spatial
