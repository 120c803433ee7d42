"""Differentiable 3D CNN operators over ``[N, C, D, H, W]`` tensors."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ArgumentError, ShapeError
from .tensor import Tensor, make_node

SPATIAL = (2, 3, 4)


def _out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, out_sp: tuple[int, int, int]) -> np.ndarray:
    """Gather ``(C*k^3, N*Do*Ho*Wo)`` patch columns from a padded input."""
    n, c = xp.shape[:2]
    do, ho, wo = out_sp
    if k == 1:
        view = xp[:, :, ::stride, ::stride, ::stride][:, :, :do, :ho, :wo]
        return np.ascontiguousarray(view.transpose(1, 0, 2, 3, 4)).reshape(c, -1)
    win = sliding_window_view(xp, (k, k, k), axis=SPATIAL)
    win = win[:, :, ::stride, ::stride, ::stride][:, :, :do, :ho, :wo]
    cols = np.ascontiguousarray(win.transpose(1, 5, 6, 7, 0, 2, 3, 4))
    return cols.reshape(c * k**3, n * do * ho * wo)


def _col2im(cols: np.ndarray, xshape: tuple, k: int, stride: int, pad: int, out_sp) -> np.ndarray:
    n, c, d, h, w = xshape
    do, ho, wo = out_sp
    gxp = np.zeros((n, c, d + 2 * pad, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols = cols.reshape(c, k, k, k, n, do, ho, wo)
    for a in range(k):
        for b in range(k):
            for e in range(k):
                gxp[:, :, a : a + stride * do : stride, b : b + stride * ho : stride, e : e + stride * wo : stride] += (
                    cols[:, a, b, e].transpose(1, 0, 2, 3, 4)
                )
    if pad:
        gxp = gxp[:, :, pad:-pad, pad:-pad, pad:-pad]
    return gxp


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int | None = None) -> Tensor:
    """Cross-correlation with a cubic kernel; ``padding`` defaults to ``k // 2``."""
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(f"conv3d expects 5D input and kernel, got {x.shape} and {w.shape}")
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    if w.shape[2:] != (k, k, k):
        raise ShapeError(f"kernel must be cubic, got {w.shape[2:]}")
    if x.shape[1] != cin:
        raise ShapeError(f"conv3d: input has {x.shape[1]} channels, kernel expects {cin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv3d: bias shape {b.shape} != ({cout},)")
    if stride not in (1, 2):
        raise ArgumentError(f"stride must be 1 or 2, got {stride}")
    pad = k // 2 if padding is None else padding
    n = x.shape[0]
    out_sp = tuple(_out_size(s, k, stride, pad) for s in x.shape[2:])
    if min(out_sp) < 1:
        raise ShapeError(f"conv3d: input {x.shape} too small for kernel {k}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, k, stride, out_sp)
    w2 = w.data.reshape(cout, -1)
    out = w2 @ cols
    if b is not None:
        out += b.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, n, *out_sp).transpose(1, 0, 2, 3, 4))
    xshape = x.shape
    need_cols = w.requires_grad

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3, 4)).reshape(cout, -1)
        gx = _col2im(w2.T @ g2, xshape, k, stride, pad, out_sp) if x.requires_grad else None
        gw = np.ascontiguousarray((cols @ g2.T).T).reshape(w.shape) if need_cols else None
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=1))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return make_node(out, parents, bw, "conv3d")


def conv_transpose3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2) -> Tensor:
    """Transposed convolution with kernel == stride (exact spatial upscaling).

    ``w`` has shape ``[Cin, Cout, k, k, k]``; each input voxel spreads into a
    disjoint ``k^3`` output block.
    """
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(f"conv_transpose3d expects 5D input and kernel, got {x.shape} and {w.shape}")
    cin, cout, k = w.shape[0], w.shape[1], w.shape[2]
    if w.shape[2:] != (k, k, k) or k != stride:
        raise ShapeError(f"conv_transpose3d supports cubic kernels equal to the stride, got {w.shape}")
    if x.shape[1] != cin:
        raise ShapeError(f"conv_transpose3d: input has {x.shape[1]} channels, kernel expects {cin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv_transpose3d: bias shape {b.shape} != ({cout},)")
    n, _, d, h, wd = x.shape
    xm = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3, 4)).reshape(cin, -1)
    wm = w.data.reshape(cin, cout * k**3)
    y = (wm.T @ xm).reshape(cout, k, k, k, n, d, h, wd)
    out = y.transpose(4, 0, 5, 1, 6, 2, 7, 3).reshape(n, cout, d * k, h * k, wd * k)
    if b is not None:
        out = out + b.data[None, :, None, None, None]
    else:
        out = np.ascontiguousarray(out)

    def bw(g):
        gm = g.reshape(n, cout, d, k, h, k, wd, k).transpose(1, 3, 5, 7, 0, 2, 4, 6).reshape(cout * k**3, -1)
        gx = (wm @ gm).reshape(cin, n, d, h, wd).transpose(1, 0, 2, 3, 4) if x.requires_grad else None
        gw = (xm @ gm.T).reshape(w.shape) if w.requires_grad else None
        grads = [None if gx is None else np.ascontiguousarray(gx), gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return make_node(out, parents, bw, "conv_transpose3d")


def batch_norm3d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over N, D, H, W.

    In training mode the running statistics are updated in place (unbiased
    variance, as is conventional); in eval mode they are used as-is.
    """
    if x.ndim != 5:
        raise ShapeError(f"batch_norm3d expects 5D input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm3d: affine params must have shape ({c},)")
    axes = (0, 2, 3, 4)
    bshape = (1, c, 1, 1, 1)
    xd = x.data
    if training:
        m = xd.size // c
        mu = xd.mean(axis=axes, dtype=np.float64)
        var = xd.var(axis=axes, dtype=np.float64)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    invstd = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    mu = mu.astype(xd.dtype)
    xhat = (xd - mu.reshape(bshape)) * invstd.reshape(bshape)
    g_ = gamma.data.reshape(bshape)
    out = xhat * g_ + beta.data.reshape(bshape)

    def bw(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        dxhat = g * g_
        if training:
            m = xd.size // c
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            gx = (invstd.reshape(bshape) / m) * (m * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * invstd.reshape(bshape)
        return gx, ggamma, gbeta

    return make_node(out, (x, gamma, beta), bw, "batch_norm3d")


def softmax_channels(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return make_node(p, (x,), bw, "softmax")


def log_softmax_channels(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=1, keepdims=True),)

    return make_node(out, (x,), bw, "log_softmax")


def nearest_downsample(x, factor: int):
    """Keep the lowest-index voxel of every ``factor^3`` block.

    Accepts a ``Tensor`` (differentiable; gradient scatters back to the kept
    voxels) or a plain integer label array ``[N, D, H, W]`` (forward only).
    """
    if factor < 1 or factor & (factor - 1):
        raise ArgumentError(f"factor must be a power of two, got {factor}")
    if not isinstance(x, Tensor):
        arr = np.asarray(x)
        if factor == 1:
            return arr
        return np.ascontiguousarray(arr[..., ::factor, ::factor, ::factor])
    if factor == 1:
        return x
    sl = (Ellipsis, slice(None, None, factor), slice(None, None, factor), slice(None, None, factor))
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[sl] = g
        return (gx,)

    return make_node(np.ascontiguousarray(x.data[sl]), (x,), bw, "nearest_downsample")
