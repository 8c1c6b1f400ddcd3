"""Dense tensors with reverse-mode differentiation.

Every differentiable op creates a new node that remembers its parents and a
closure mapping the output gradient to parent gradients. Nodes carry a
monotonically increasing creation index, so sorting reachable nodes by that
index in reverse yields a valid (and reproducible) reverse topological order.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_counter = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible or invalid."""


class DomainError(ValueError):
    """An op was evaluated outside its mathematical domain."""


class ContractError(RuntimeError):
    """An API precondition was violated."""


class Tensor:
    """An n-dimensional array node on the differentiation tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._id = next(_counter)
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- tape plumbing ----------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scalar_mul(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, float(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __abs__(self):
        return tensor_abs(self)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def create(shape: Sequence[int], init: str | tuple = "zeros", seed: int | None = None,
           requires_grad: bool = False, dtype=np.float64, fan_in: int | None = None) -> Tensor:
    """Allocate a tensor from an init spec.

    ``init`` is one of ``"zeros"``, ``"ones"``, ``("constant", c)``,
    ``("uniform", a, b)`` or ``"kaiming_fan_in"``. Kaiming draws are uniform
    in +-sqrt(6 / fan_in), where fan_in defaults to prod(shape[1:]).
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s < 1 for s in shape):
        raise ShapeError(f"invalid shape {shape}: every extent must be >= 1")
    kind = init if isinstance(init, str) else init[0]
    if kind == "zeros":
        data = np.zeros(shape, dtype=dtype)
    elif kind == "ones":
        data = np.ones(shape, dtype=dtype)
    elif kind == "constant":
        data = np.full(shape, float(init[1]), dtype=dtype)
    elif kind == "uniform":
        rng = np.random.default_rng(seed)
        data = rng.uniform(init[1], init[2], size=shape).astype(dtype)
    elif kind == "kaiming_fan_in":
        rng = np.random.default_rng(seed)
        fi = fan_in if fan_in is not None else int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
        bound = np.sqrt(6.0 / fi)
        data = rng.uniform(-bound, bound, size=shape).astype(dtype)
    else:
        raise ValueError(f"unknown init spec {init!r}")
    return Tensor(data, requires_grad=requires_grad)


# -- elementwise ops ------------------------------------------------------

def _scalar_other(a: Tensor, b):
    """Return b as Tensor; plain numbers become 0-d constants."""
    if isinstance(b, Tensor):
        return b
    return Tensor(np.asarray(b, dtype=a.dtype))


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    # scalar operands are the only broadcast allowed
    if t.data.ndim == 0 or t.size == 1 and g.size != 1:
        return np.asarray(g.sum(), dtype=t.dtype).reshape(t.shape)
    return g


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b) -> Tensor:
    b = _scalar_other(a, b)
    _binary_shapes(a, b, "add")

    def bw(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a))
        if b.requires_grad:
            b._accumulate(_reduce_to(g, b))

    return _node(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b) -> Tensor:
    b = _scalar_other(a, b)
    _binary_shapes(a, b, "sub")

    def bw(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a))
        if b.requires_grad:
            b._accumulate(_reduce_to(-g, b))

    return _node(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    b = _scalar_other(a, b)
    _binary_shapes(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g * b.data, a))
        if b.requires_grad:
            b._accumulate(_reduce_to(g * a.data, b))

    return _node(a.data * b.data, (a, b), bw)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    def bw(g):
        a._accumulate(g * c)

    return _node(a.data * c, (a,), bw)


def tensor_abs(a: Tensor) -> Tensor:
    sign = np.sign(a.data)

    def bw(g):
        a._accumulate(g * sign)

    return _node(np.abs(a.data), (a,), bw)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")

    def bw(g):
        a._accumulate(g / a.data)

    return _node(np.log(a.data), (a,), bw)


def clamp_min(a: Tensor, lo: float) -> Tensor:
    """max(a, lo); gradient passes only where a > lo."""
    keep = a.data > lo

    def bw(g):
        a._accumulate(g * keep)

    return _node(np.maximum(a.data, lo), (a,), bw)


def elementwise(op_kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, abs, log, scalar_mul."""
    if op_kind == "add":
        return add(a, b)
    if op_kind == "sub":
        return sub(a, b)
    if op_kind == "mul":
        return mul(a, b)
    if op_kind == "abs":
        return tensor_abs(a)
    if op_kind == "log":
        return log(a)
    if op_kind == "scalar_mul":
        return scalar_mul(a, float(b))
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# -- shape / reductions ---------------------------------------------------

def _norm_axes(a: Tensor, axes) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(a.data.ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -a.data.ndim <= ax < a.data.ndim:
            raise ShapeError(f"axis {ax} invalid for shape {a.shape}")
        out.append(ax % a.data.ndim)
    return tuple(sorted(set(out)))


def tensor_sum(a: Tensor, axes=None) -> Tensor:
    ax = _norm_axes(a, axes)
    out = a.data.sum(axis=ax)

    def bw(g):
        a._accumulate(np.broadcast_to(np.expand_dims(g, ax), a.shape))

    return _node(np.asarray(out), (a,), bw)


def mean(a: Tensor, axes=None) -> Tensor:
    ax = _norm_axes(a, axes)
    count = int(np.prod([a.shape[i] for i in ax])) if ax else 1
    out = a.data.sum(axis=ax) / count

    def bw(g):
        a._accumulate(np.broadcast_to(np.expand_dims(g, ax), a.shape) / count)

    return _node(np.asarray(out), (a,), bw)


def reduce(op_kind: str, a: Tensor, axes=None) -> Tensor:
    if op_kind == "sum":
        return tensor_sum(a, axes)
    if op_kind == "mean":
        return mean(a, axes)
    raise ValueError(f"unknown reduction {op_kind!r}")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape

    def bw(g):
        a._accumulate(g.reshape(old))

    return _node(a.data.reshape(tuple(shape)), (a,), bw)


def softmax_channels(a: Tensor) -> Tensor:
    """Softmax over axis 1 of an (N, K, H, W) tensor, max-shifted."""
    if a.data.ndim != 4 or a.shape[1] < 1:
        raise ShapeError(f"softmax_channels expects (N,K,H,W), got {a.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        a._accumulate(s * (g - (g * s).sum(axis=1, keepdims=True)))

    return _node(s, (a,), bw)


def take_channel(a: Tensor, labels: np.ndarray) -> Tensor:
    """Pick a[n, labels[n,h,w], h, w] for an (N,K,H,W) tensor -> (N,H,W)."""
    labels = np.asarray(labels)
    n, k, h, w = a.shape
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} does not match {(n, h, w)}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"label outside [0, {k})")
    idx = labels[:, None].astype(np.intp)
    out = np.take_along_axis(a.data, idx, axis=1)[:, 0]

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, g[:, None], axis=1)
        a._accumulate(full)

    return _node(out, (a,), bw)


# -- backward -------------------------------------------------------------

def _reachable(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t._id in seen:
            continue
        seen[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    return [seen[k] for k in sorted(seen, reverse=True)]


def backward(loss: Tensor) -> None:
    """Accumulate dloss/dleaf into every reachable ``requires_grad`` leaf.

    Interior gradients are dropped once propagated; calling twice without
    resetting leaf grads accumulates.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any requires_grad tensor")
    order = _reachable(loss)
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss._accumulate(np.ones_like(loss.data))
    for node in order:
        if node._backward is None or node.grad is None:
            continue
        g = node.grad
        node.grad = None
        node._backward(g)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
