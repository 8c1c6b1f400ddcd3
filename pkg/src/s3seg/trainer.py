"""Per-image optimisation: pseudo-labels, joint loss, momentum SGD."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from . import model as M
from .affine import AffineParams, AffineRanges, affine_grid, sample_affine, warp_labels
from .losses import LossWeights
from .model import ModelConfig
from .tensor import Tensor, backward

log = logging.getLogger(__name__)


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.36
    momentum: float = 0.9
    max_iters: int = 50
    min_clusters: int | None = None
    seed: int = 0
    offset_lr_scale: float = 0.01  # learning-rate multiplier for the deformable offset branch

    def __post_init__(self):
        if self.lr <= 0 or not 0 <= self.momentum < 1 or self.max_iters < 1 or self.offset_lr_scale < 0:
            raise ValueError(f"invalid optimiser config {self}")


@dataclass(frozen=True)
class IterRecord:
    iteration: int
    ce: float
    affine: float
    spatial: float
    joint: float
    n_clusters: int
    transform: AffineParams | None


@dataclass
class TrainHistory:
    records: list[IterRecord] = field(default_factory=list)
    surrogate_calls: int = 0
    sobel_calls: int = 0

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["iteration", "L_ce", "L_AT", "L_S", "L_joint", "unique_clusters"])
        for r in self.records:
            wr.writerow([r.iteration, repr(r.ce), repr(r.affine), repr(r.spatial), repr(r.joint), r.n_clusters])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> TrainHistory:
        rows = list(csv.reader(io.StringIO(text)))[1:]
        recs = [IterRecord(int(r[0]), float(r[1]), float(r[2]), float(r[3]), float(r[4]), int(r[5]), None)
                for r in rows]
        return cls(recs)


def sgd_step(params: dict[str, Tensor], velocity: dict[str, np.ndarray], cfg: OptimConfig) -> None:
    """v <- momentum * v + grad; p <- p - lr * v; then clear grads.

    Parameters under ``deform.offset`` use ``lr * offset_lr_scale``.
    """
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(f"non-finite gradient in {name}")
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        v = velocity.get(name)
        v = g.copy() if v is None else cfg.momentum * v + g
        velocity[name] = v
        lr = cfg.lr * cfg.offset_lr_scale if name.startswith("deform.offset") else cfg.lr
        p.data = p.data - lr * v
        p.grad = None


def train_single_image(image, model_cfg: ModelConfig, optim_cfg: OptimConfig,
                       weights: LossWeights = L.SKIN, ranges: AffineRanges = AffineRanges(),
                       params: dict[str, Tensor] | None = None, callback=None):
    """Fit a fresh encoder to one image; return (labels, params, history).

    ``image`` is a (1, Cin, H, W) array or Tensor, already standardised.
    ``callback(iteration, pseudo_labels)`` is invoked once per iteration.
    """
    dtype = np.dtype(model_cfg.dtype)
    x = Tensor(np.asarray(image.data if isinstance(image, Tensor) else image, dtype=dtype))
    params = M.init_params(model_cfg) if params is None else params
    rng = np.random.default_rng(optim_cfg.seed)
    velocity: dict[str, np.ndarray] = {}
    hist = TrainHistory()
    h, w = x.shape[2:]

    for it in range(optim_cfg.max_iters):
        features, S = M.forward(x, params, model_cfg)
        Y = S.data.argmax(axis=1)[0]
        l_ce = L.self_label_ce(S, Y)
        zero = Tensor(np.zeros((), dtype=dtype))
        l_s, l_at, tf = zero, zero, None
        if weights.spatial > 0:
            l_s = L.spatial_consistency(S)
            hist.sobel_calls += 1
        if weights.affine > 0:
            tf = sample_affine(rng, ranges)
            grid, mask = affine_grid(tf, h, w)
            S_aux = M.surrogate_forward(features, grid, params)
            hist.surrogate_calls += 1
            l_at = L.affine_consistency(S_aux, warp_labels(Y, grid, mask), mask)
        total = L.joint(l_ce, l_at, l_s, weights)
        vals = [float(t.data) for t in (l_ce, l_at, l_s, total)]
        if not np.all(np.isfinite(vals)):
            raise NonFiniteGradientError(f"non-finite loss at iteration {it}: {vals}")
        n_clusters = int(np.unique(Y).size)
        hist.records.append(IterRecord(it, *vals, n_clusters, tf))
        log.debug("iter %d joint %.4g clusters %d", it, vals[3], n_clusters)
        backward(total)
        sgd_step(params, velocity, optim_cfg)
        if callback is not None:
            callback(it, Y)
        if optim_cfg.min_clusters is not None and n_clusters < optim_cfg.min_clusters:
            break

    _, S = M.forward(x, params, model_cfg)
    labels = S.data.argmax(axis=1)[0]
    return labels, params, hist


@dataclass
class AblationRow:
    weights: LossWeights
    labels: np.ndarray
    history: TrainHistory
    metrics: object | None  # metrics.ImageMetrics when ground truth was given

    def record(self) -> str:
        import json

        m = self.metrics
        return json.dumps({
            "weights": list(self.weights.as_tuple()),
            "dsc": m.dsc if m else None, "hm": m.hm if m else None, "xor": m.xor if m else None,
            "surrogate_calls": self.history.surrogate_calls, "sobel_calls": self.history.sobel_calls,
        }, sort_keys=True)


def ablation_presets(w: LossWeights) -> list[LossWeights]:
    """CE only, CE + affine, CE + spatial, all three."""
    return [LossWeights(w.ce, 0.0, 0.0), LossWeights(w.ce, w.affine, 0.0),
            LossWeights(w.ce, 0.0, w.spatial), LossWeights(w.ce, w.affine, w.spatial)]


def run_ablation(image, presets, model_cfg: ModelConfig, optim_cfg: OptimConfig,
                 ranges: AffineRanges = AffineRanges(), gt=None) -> list[AblationRow]:
    """Train once per preset from the same seeds; score against ``gt`` if given."""
    from . import metrics as Me

    rows = []
    for w in presets:
        labels, _, hist = train_single_image(image, model_cfg, optim_cfg, w, ranges)
        m = Me.evaluate("ablation", labels, gt) if gt is not None else None
        rows.append(AblationRow(w, labels, hist, m))
    return rows
