"""Differentiable image operators on top of :mod:`s3seg.tensor`.

Conventions: NCHW layout, cross-correlation (no kernel flip), zero padding.
Sampling grids store ``(row, col)`` pixel coordinates in their last axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, _node


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel_size, self.stride,
               self.dilation, self.groups) < 1 or self.padding < 0:
            raise ShapeError(f"invalid conv spec {self}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(f"channels not divisible by groups in {self}")

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        k_eff = self.dilation * (self.kernel_size - 1) + 1
        ho = (h + 2 * self.padding - k_eff) // self.stride + 1
        wo = (w + 2 * self.padding - k_eff) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"input {h}x{w} too small for {self}")
        return ho, wo

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        k = self.kernel_size
        return (self.out_channels, self.in_channels // self.groups, k, k)


def same_padding(kernel_size: int, dilation: int = 1) -> int:
    return dilation * (kernel_size - 1) // 2


def _check_input(x: Tensor, spec: ConvSpec) -> tuple[int, int, int, int]:
    if x.data.ndim != 4:
        raise ShapeError(f"expected NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ShapeError(f"input has {c} channels, spec expects {spec.in_channels}")
    return n, c, h, w


def _pad(a: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (p, p), (p, p)))


def _tap_slices(spec: ConvSpec, ho: int, wo: int):
    k, d, s = spec.kernel_size, spec.dilation, spec.stride
    for ki in range(k):
        for kj in range(k):
            yield (ki * k + kj,
                   slice(ki * d, ki * d + s * (ho - 1) + 1, s),
                   slice(kj * d, kj * d + s * (wo - 1) + 1, s))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, spec: ConvSpec) -> Tensor:
    """Grouped, dilated, strided 2-D cross-correlation via im2col + matmul."""
    n, cin, h, w = _check_input(x, spec)
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {weight.shape} != {spec.weight_shape}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(f"bias shape {bias.shape} != {(spec.out_channels,)}")
    ho, wo = spec.out_size(h, w)
    g, kk = spec.groups, spec.kernel_size ** 2
    cg, og, p = cin // g, spec.out_channels // g, ho * wo

    xp = _pad(x.data, spec.padding)
    cols = np.empty((n, cin, kk, ho, wo), dtype=x.dtype)
    for t, sy, sx in _tap_slices(spec, ho, wo):
        cols[:, :, t] = xp[:, :, sy, sx]
    cols = cols.reshape(n, g, cg * kk, p)
    wmat = weight.data.reshape(g, og, cg * kk)
    out = np.matmul(wmat, cols).reshape(n, spec.out_channels, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bw(grad):
        gm = grad.reshape(n, g, og, p)
        if weight.requires_grad:
            dw = np.matmul(gm, cols.transpose(0, 1, 3, 2)).sum(axis=0)
            weight._accumulate(dw.reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(grad.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.matmul(wmat.transpose(0, 2, 1), gm).reshape(n, cin, kk, ho, wo)
            dxp = np.zeros_like(xp)
            for t, sy, sx in _tap_slices(spec, ho, wo):
                dxp[:, :, sy, sx] += dcols[:, :, t]
            pd = spec.padding
            x._accumulate(dxp[:, :, pd:pd + h, pd:pd + w] if pd else dxp)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, bw)


def depthwise_conv2d(x: Tensor, weight: Tensor, spec: ConvSpec, bias: Tensor | None = None) -> Tensor:
    """One k x k filter per channel; channels never mix.

    Computed as a sum of shifted, per-channel scaled slices rather than
    through im2col, so it is an independent route from :func:`conv2d`.
    """
    n, c, h, w = _check_input(x, spec)
    if spec.groups != c or spec.out_channels != c:
        raise ShapeError("depthwise conv needs groups == in_channels == out_channels")
    k = spec.kernel_size
    if weight.shape != (c, 1, k, k):
        raise ShapeError(f"weight shape {weight.shape} != {(c, 1, k, k)}")
    ho, wo = spec.out_size(h, w)
    xp = _pad(x.data, spec.padding)
    wf = weight.data.reshape(c, k * k)
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for t, sy, sx in _tap_slices(spec, ho, wo):
        out += wf[None, :, t, None, None] * xp[:, :, sy, sx]
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(grad):
        if weight.requires_grad:
            dw = np.empty_like(wf)
            for t, sy, sx in _tap_slices(spec, ho, wo):
                dw[:, t] = np.einsum("nchw,nchw->c", grad, xp[:, :, sy, sx])
            weight._accumulate(dw.reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(grad.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for t, sy, sx in _tap_slices(spec, ho, wo):
                dxp[:, :, sy, sx] += wf[None, :, t, None, None] * grad
            pd = spec.padding
            x._accumulate(dxp[:, :, pd:pd + h, pd:pd + w] if pd else dxp)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, bw)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation using the current batch statistics only."""
    if x.data.ndim != 4:
        raise ShapeError(f"expected NCHW input, got shape {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("gamma/beta must have shape (C,)")
    m = x.shape[0] * x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bw(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None]
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            x._accumulate(inv_std / m * (m * dxhat - s1 - xhat * s2))

    return _node(out, (x, gamma, beta), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        x._accumulate(g * mask)

    return _node(np.where(mask, x.data, 0.0).astype(x.dtype), (x,), bw)


def pad2d(x: Tensor, p: int) -> Tensor:
    """Zero-pad both spatial axes by ``p`` pixels."""
    if p == 0:
        return x

    def bw(g):
        x._accumulate(g[:, :, p:-p, p:-p])

    return _node(_pad(x.data, p), (x,), bw)


# -- bilinear sampling ----------------------------------------------------

class _Bilinear:
    """Precomputed four-neighbour weights for sampling an (H, W) plane.

    ``ys``/``xs`` have shape (N, P). Reads outside the image return 0.
    """

    def __init__(self, ys: np.ndarray, xs: np.ndarray, h: int, w: int):
        y0 = np.floor(ys)
        x0 = np.floor(xs)
        wy1, wx1 = ys - y0, xs - x0
        wy0, wx0 = 1.0 - wy1, 1.0 - wx1
        y0 = y0.astype(np.int64)
        x0 = x0.astype(np.int64)
        self.h, self.w = h, w
        self.wy, self.wx = (wy0, wy1), (wx0, wx1)
        self.corners = []
        for dy in (0, 1):
            for dx in (0, 1):
                yy, xx = y0 + dy, x0 + dx
                valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
                idx = np.where(valid, np.clip(yy, 0, h - 1) * w + np.clip(xx, 0, w - 1), 0)
                self.corners.append((dy, dx, idx, valid))

    def gather(self, planes: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """planes: (N, C, H*W) -> samples (N, C, P) and per-corner reads."""
        out = None
        reads = []
        for dy, dx, idx, valid in self.corners:
            v = np.stack([planes[b][:, idx[b]] for b in range(planes.shape[0])])
            v = v * valid[:, None, :]
            reads.append(v)
            term = v * (self.wy[dy] * self.wx[dx])[:, None, :]
            out = term if out is None else out + term
        return out, reads

    def scatter(self, grad: np.ndarray, n_channels: int) -> np.ndarray:
        """Adjoint of :meth:`gather` w.r.t. the planes; grad (N, C, P)."""
        n, c, _ = grad.shape
        hw = self.h * self.w
        out = np.zeros((n, c * hw), dtype=grad.dtype)
        base = (np.arange(c) * hw)[:, None]
        for dy, dx, idx, valid in self.corners:
            wgt = (self.wy[dy] * self.wx[dx] * valid)[:, None, :]
            contrib = grad * wgt
            for b in range(n):
                flat = (base + idx[b][None, :]).ravel()
                out[b] += np.bincount(flat, weights=contrib[b].ravel(), minlength=c * hw)
        return out.reshape(n, c, hw)

    def coord_grads(self, grad: np.ndarray, reads: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        """d(sum grad*sample)/d(ys), d/d(xs), summed over channels."""
        i00, i01, i10, i11 = reads
        (wy0, wy1), (wx0, wx1) = self.wy, self.wx
        dv_dy = wx0[:, None] * (i10 - i00) + wx1[:, None] * (i11 - i01)
        dv_dx = wy0[:, None] * (i01 - i00) + wy1[:, None] * (i11 - i10)
        return (grad * dv_dy).sum(axis=1), (grad * dv_dx).sum(axis=1)


def bilinear_sample(x: Tensor, grid) -> Tensor:
    """Sample ``x`` (N,C,H,W) at ``grid`` (N,Ho,Wo,2) of (row, col) coordinates."""
    if not isinstance(grid, Tensor):
        grid = Tensor(np.asarray(grid, dtype=x.dtype))
    if x.data.ndim != 4:
        raise ShapeError(f"expected NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    if grid.data.ndim != 4 or grid.shape[0] != n or grid.shape[3] != 2:
        raise ShapeError(f"grid shape {grid.shape} incompatible with input {x.shape}")
    ho, wo = grid.shape[1], grid.shape[2]
    ys = grid.data[..., 0].reshape(n, -1)
    xs = grid.data[..., 1].reshape(n, -1)
    bl = _Bilinear(ys, xs, h, w)
    planes = x.data.reshape(n, c, h * w)
    vals, reads = bl.gather(planes)

    def bw(g):
        gf = g.reshape(n, c, ho * wo)
        if x.requires_grad:
            x._accumulate(bl.scatter(gf, c).reshape(x.shape))
        if grid.requires_grad:
            gy, gx = bl.coord_grads(gf, reads)
            grid._accumulate(np.stack([gy.reshape(n, ho, wo), gx.reshape(n, ho, wo)], axis=-1))

    return _node(vals.reshape(n, c, ho, wo), (x, grid), bw)


def deformable_conv2d(x: Tensor, offset: Tensor, weight: Tensor, bias: Tensor | None,
                      spec: ConvSpec) -> Tensor:
    """Deformable convolution (offsets only, no modulation).

    ``offset`` has shape (N, 2*k*k, Ho, Wo); channels ``2t`` and ``2t+1`` hold
    the (row, col) displacement of kernel tap ``t`` (row-major over the
    kernel). Only stride 1 and groups 1 are supported.
    """
    n, cin, h, w = _check_input(x, spec)
    if spec.stride != 1 or spec.groups != 1:
        raise ShapeError("deformable_conv2d supports stride 1 and groups 1 only")
    k, d, pd = spec.kernel_size, spec.dilation, spec.padding
    kk = k * k
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {weight.shape} != {spec.weight_shape}")
    ho, wo = spec.out_size(h, w)
    if offset.data.ndim != 4 or offset.shape[1] != 2 * kk:
        raise ShapeError(f"offset needs {2 * kk} channels, got shape {offset.shape}")
    if offset.shape != (n, 2 * kk, ho, wo):
        raise ShapeError(f"offset shape {offset.shape} != {(n, 2 * kk, ho, wo)}")
    p = ho * wo

    taps = np.arange(kk)
    ii, jj = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    base_y = (ii[None] - pd + (taps // k)[:, None, None] * d).astype(x.dtype)
    base_x = (jj[None] - pd + (taps % k)[:, None, None] * d).astype(x.dtype)
    off = offset.data.reshape(n, kk, 2, ho, wo)
    ys = (base_y[None] + off[:, :, 0]).reshape(n, kk * p)
    xs = (base_x[None] + off[:, :, 1]).reshape(n, kk * p)
    bl = _Bilinear(ys, xs, h, w)
    cols, reads = bl.gather(x.data.reshape(n, cin, h * w))  # (N, Cin, kk*P)
    cols = cols.reshape(n, cin * kk, p)
    wmat = weight.data.reshape(spec.out_channels, cin * kk)
    out = np.matmul(wmat, cols).reshape(n, spec.out_channels, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bw(grad):
        gm = grad.reshape(n, spec.out_channels, p)
        if weight.requires_grad:
            dw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0)
            weight._accumulate(dw.reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(grad.sum(axis=(0, 2, 3)))
        if x.requires_grad or offset.requires_grad:
            dcols = np.matmul(wmat.T, gm).reshape(n, cin, kk * p)
            if x.requires_grad:
                x._accumulate(bl.scatter(dcols, cin).reshape(x.shape))
            if offset.requires_grad:
                gy, gx = bl.coord_grads(dcols, reads)
                doff = np.stack([gy.reshape(n, kk, ho, wo), gx.reshape(n, kk, ho, wo)], axis=2)
                offset._accumulate(doff.reshape(offset.shape))

    parents = (x, offset, weight) if bias is None else (x, offset, weight, bias)
    return _node(out, parents, bw)
