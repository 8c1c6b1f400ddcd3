"""Best-overlap cluster selection and DSC / XOR / HM metrics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage


class EvaluationError(ValueError):
    pass


def best_overlap_cluster(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Indicator of the cluster with the largest intersection with ``gt``.

    Ties go to the smallest cluster id.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise EvaluationError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if not gt.any():
        raise EvaluationError("ground truth mask is empty")
    ids, counts = np.unique(pred[gt], return_counts=True)
    best = ids[np.argmax(counts)]  # np.unique sorts ids, argmax takes the first max
    return pred == best


def chosen_cluster(pred: np.ndarray, gt: np.ndarray) -> int:
    gt = np.asarray(gt, dtype=bool)
    ids, counts = np.unique(np.asarray(pred)[gt], return_counts=True)
    return int(ids[np.argmax(counts)])


def dsc(pred: np.ndarray, gt: np.ndarray) -> float:
    p, g = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise EvaluationError(f"shape mismatch {p.shape} vs {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 100.0
    return 100.0 * 2 * int((p & g).sum()) / denom


def xor_metric(pred: np.ndarray, gt: np.ndarray) -> float:
    p, g = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise EvaluationError(f"shape mismatch {p.shape} vs {g.shape}")
    area = int(g.sum())
    if area == 0:
        raise EvaluationError("ground truth mask is empty")
    return 100.0 * int((p ^ g).sum()) / area


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with a 4-neighbour outside the mask (image border counts)."""
    m = np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(m, structure=ndimage.generate_binary_structure(2, 1),
                                   border_value=0)
    return m & ~inner


def _directed(a: np.ndarray, b: np.ndarray) -> float:
    # exact Euclidean distance from every pixel to the nearest pixel of b
    dist = ndimage.distance_transform_edt(~b)
    return float(dist[a].max())


def hm_distance(pred: np.ndarray, gt: np.ndarray) -> float:
    """Symmetric Hausdorff distance between the two boundary pixel sets."""
    p, g = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise EvaluationError(f"shape mismatch {p.shape} vs {g.shape}")
    if not p.any() or not g.any():
        raise EvaluationError("hm_distance needs two non-empty masks")
    bp, bg = boundary(p), boundary(g)
    return max(_directed(bp, bg), _directed(bg, bp))


@dataclass
class ImageMetrics:
    image_id: str
    dsc: float
    hm: float
    xor: float
    cluster: int


@dataclass
class MetricsReport:
    images: list[ImageMetrics] = field(default_factory=list)
    dsc: float = float("nan")
    hm: float = float("nan")
    xor: float = float("nan")
    meta: dict = field(default_factory=dict)

    def table(self) -> str:
        lines = [f"{'image':<24} {'DSC':>8} {'HM':>8} {'XOR':>8}"]
        for m in self.images:
            lines.append(f"{m.image_id:<24} {_fmt(m.dsc):>8} {_fmt(m.hm):>8} {_fmt(m.xor):>8}")
        lines.append(f"{'mean':<24} {_fmt(self.dsc):>8} {_fmt(self.hm):>8} {_fmt(self.xor):>8}")
        return "\n".join(lines) + "\n"

    def records(self) -> str:
        """One JSON object per image, then a trailing aggregate record."""
        out = [json.dumps({"type": "image", **asdict(m)}, sort_keys=True) for m in self.images]
        agg = {"type": "aggregate", "dsc": self.dsc, "hm": self.hm, "xor": self.xor,
               "n": len(self.images), **self.meta}
        out.append(json.dumps(agg, sort_keys=True))
        return "\n".join(out) + "\n"


def _fmt(v: float) -> str:
    return "nan" if v is None or math.isnan(v) else f"{v:.4g}"


def evaluate(image_id: str, pred_labels: np.ndarray, gt: np.ndarray) -> ImageMetrics:
    """Select the best-overlap cluster and score it; empty predictions get sentinels."""
    fg = best_overlap_cluster(pred_labels, gt)
    cid = chosen_cluster(pred_labels, gt)
    if not fg.any():
        return ImageMetrics(image_id, 0.0, float("nan"), 100.0, cid)
    return ImageMetrics(image_id, dsc(fg, gt), hm_distance(fg, gt), xor_metric(fg, gt), cid)


def aggregate(reports, meta: dict | None = None) -> MetricsReport:
    reports = list(reports)
    if not reports:
        raise EvaluationError("nothing to aggregate")

    def mean(vals):
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")

    return MetricsReport(reports, mean(r.dsc for r in reports), mean(r.hm for r in reports),
                         mean(r.xor for r in reports), dict(meta or {}))
