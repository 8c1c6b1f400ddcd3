"""Central finite-difference gradient checks for every differentiable op."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import losses as L
from . import tensor as T
from .nn_ops import (ConvSpec, batchnorm2d, bilinear_sample, conv2d, deformable_conv2d,
                     depthwise_conv2d, pad2d, relu)
from .tensor import Tensor

H = 1e-4
TOL = 1e-4
TOL_OFFSETS = 1e-3


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, h: float = H) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``t``."""
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(fn().data)
        flat[i] = old - h
        fm = float(fn().data)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max entrywise |a - n| / max(|a|, |n|, floor), floor = 1e-3 * max|n| (>= 1e-8).

    The floor keeps entries that are tiny relative to the tensor's scale from
    turning rounding noise into large relative errors.
    """
    scale = max(float(np.abs(numeric).max(initial=0.0)), float(np.abs(analytic).max(initial=0.0)))
    floor = max(1e-3 * scale, 1e-8)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max(initial=0.0))


def check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = H) -> list[float]:
    """Relative error of the backward pass vs central differences, per input."""
    for t in inputs:
        t.grad = None
    T.backward(fn())
    errs = []
    for t in inputs:
        analytic = t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
        errs.append(rel_error(analytic, numerical_grad(fn, t, h)))
    for t in inputs:
        t.grad = None
    return errs


def projected(out_fn: Callable[[], Tensor], rng: np.random.Generator) -> Callable[[], Tensor]:
    """Turn a tensor-valued function into a scalar via a fixed random projection."""
    cache = {}

    def fn():
        out = out_fn()
        if "r" not in cache:
            cache["r"] = Tensor(rng.normal(size=out.shape))
        return T.tensor_sum(T.mul(out, cache["r"]))

    return fn


def _leaf(rng, shape, lo=None, hi=None) -> Tensor:
    data = rng.normal(size=shape) if lo is None else rng.uniform(lo, hi, size=shape)
    return Tensor(data, requires_grad=True)


def _away_from_kinks(rng, shape, low=0.1):
    """Normal draws with |x| >= low, so abs/relu kinks are not straddled."""
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < low, np.sign(x + 1e-12) * (low + np.abs(x)), x)


def _half_offsets(rng, shape):
    # x.5 offsets keep bilinear taps away from integer coordinates
    return rng.integers(-1, 2, size=shape) + 0.5 + rng.uniform(-0.2, 0.2, size=shape)


@dataclass
class CaseResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.error < self.tol


def _cases(rng: np.random.Generator):
    """Yield (name, scalar fn, inputs, tol)."""
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 4))
    yield "add", projected(lambda: T.add(a, b), rng), [a, b], TOL
    yield "sub", projected(lambda: T.sub(a, b), rng), [a, b], TOL
    yield "mul", projected(lambda: T.mul(a, b), rng), [a, b], TOL
    yield "scalar_mul", projected(lambda: T.scalar_mul(a, -1.7), rng), [a], TOL
    ab = Tensor(_away_from_kinks(rng, (3, 4)), requires_grad=True)
    yield "abs", projected(lambda: T.tensor_abs(ab), rng), [ab], TOL
    pos = _leaf(rng, (3, 4), 0.5, 2.0)
    yield "log", projected(lambda: T.log(pos), rng), [pos], TOL
    yield "sum", projected(lambda: T.tensor_sum(a, axes=1), rng), [a], TOL
    yield "mean", projected(lambda: T.mean(a, axes=0), rng), [a], TOL
    lg = _leaf(rng, (1, 4, 3, 3))
    yield "softmax_channels", projected(lambda: T.softmax_channels(lg), rng), [lg], TOL

    x = _leaf(rng, (1, 3, 6, 6))
    w = _leaf(rng, (4, 3, 3, 3))
    bias = _leaf(rng, (4,))
    spec = ConvSpec(3, 4, 3, padding=1)
    yield "conv2d", projected(lambda: conv2d(x, w, bias, spec), rng), [x, w, bias], TOL
    spec_s = ConvSpec(3, 4, 3, stride=2, padding=1)
    yield "conv2d_strided", projected(lambda: conv2d(x, w, None, spec_s), rng), [x, w], TOL
    xg = _leaf(rng, (1, 4, 6, 6))
    wg = _leaf(rng, (4, 2, 3, 3))
    spec_g = ConvSpec(4, 4, 3, padding=2, dilation=2, groups=2)
    yield "conv2d_grouped_dilated", projected(lambda: conv2d(xg, wg, None, spec_g), rng), [xg, wg], TOL
    wd = _leaf(rng, (4, 1, 3, 3))
    spec_d = ConvSpec(4, 4, 3, padding=2, dilation=2, groups=4)
    yield "depthwise_dilated", projected(lambda: depthwise_conv2d(xg, wd, spec_d), rng), [xg, wd], TOL
    spec_dw = ConvSpec(4, 4, 3, padding=1, groups=4)
    yield "depthwise", projected(lambda: depthwise_conv2d(xg, wd, spec_dw), rng), [xg, wd], TOL

    gam, bet = _leaf(rng, (4,)), _leaf(rng, (4,))
    yield "batchnorm2d", projected(lambda: batchnorm2d(xg, gam, bet, 1e-5), rng), [xg, gam, bet], TOL
    xr = Tensor(_away_from_kinks(rng, (1, 2, 3, 3)), requires_grad=True)
    yield "relu", projected(lambda: relu(xr), rng), [xr], TOL
    yield "pad2d", projected(lambda: pad2d(xr, 1), rng), [xr], TOL

    xs = _leaf(rng, (1, 2, 5, 5))
    grid = Tensor(rng.uniform(0.1, 0.9, size=(1, 4, 4, 2)) + rng.integers(-1, 5, size=(1, 4, 4, 2)),
                  requires_grad=True)
    yield "bilinear_sample", projected(lambda: bilinear_sample(xs, grid), rng), [xs, grid], TOL

    xd = _leaf(rng, (1, 2, 5, 5))
    wdf = _leaf(rng, (3, 2, 3, 3))
    off = Tensor(_half_offsets(rng, (1, 18, 5, 5)), requires_grad=True)
    spec_df = ConvSpec(2, 3, 3, padding=1)
    fn = projected(lambda: deformable_conv2d(xd, off, wdf, None, spec_df), rng)
    yield "deformable_conv2d", fn, [xd, wdf], TOL
    yield "deformable_conv2d_offsets", fn, [off], TOL_OFFSETS

    logits = rng.normal(size=(1, 3, 5, 5))
    S = Tensor(logits, requires_grad=True)
    labels = rng.integers(0, 3, size=(5, 5))
    yield "self_label_ce", lambda: L.self_label_ce(T.softmax_channels(S), labels), [S], TOL
    S2 = Tensor(rng.normal(size=(1, 2, 5, 5)), requires_grad=True)
    yield "spatial_consistency", lambda: L.spatial_consistency(S2), [S2], TOL
    valid = rng.random((5, 5)) > 0.3
    yield "affine_consistency", (lambda: L.affine_consistency(T.softmax_channels(S), labels, valid)), [S], TOL


def run_suite(seed: int = 0, repeats: int = 5) -> list[CaseResult]:
    """Check every op on ``repeats`` seeded random instances; keep the worst error."""
    worst: dict[str, CaseResult] = {}
    for r in range(repeats):
        rng = np.random.default_rng([seed, r])
        for name, fn, inputs, tol in _cases(rng):
            err = max(check(fn, inputs))
            if name not in worst or err > worst[name].error:
                worst[name] = CaseResult(name, err, tol)
    return list(worst.values())


def main(seed: int = 0, repeats: int = 5) -> int:
    t0 = time.perf_counter()
    results = run_suite(seed, repeats)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<28} max rel err {r.error:.4g} (tol {r.tol:g})")
    print(f"{sum(r.passed for r in results)}/{len(results)} passed in {time.perf_counter() - t0:.4g} s")
    return 0 if all(r.passed for r in results) else 1
