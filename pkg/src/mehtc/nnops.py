"""Spatial neural-network operators over tensors.

All operators take inputs laid out as [batch, channel, *spatial] with
2 or 3 spatial axes and record their adjoints on the active tape.
Convolution uses cross-correlation semantics (no kernel flip).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, _record


def _tuplize(value, rank, name):
    if np.isscalar(value):
        return (int(value),) * rank
    value = tuple(int(v) for v in value)
    if len(value) != rank:
        raise ShapeError(f"{name} must have {rank} entries, got {value}")
    return value


def _im2col(x: np.ndarray, kernel, stride, padding):
    """Unfold [N,C,*S] into column matrix [N, P, C*K] plus output extents."""
    rank = len(kernel)
    pad_width = ((0, 0), (0, 0)) + tuple((p, p) for p in padding)
    xp = np.pad(x, pad_width)
    spatial = xp.shape[2:]
    if any(s < k for s, k in zip(spatial, kernel)):
        raise ShapeError(
            f"kernel {kernel} larger than padded input spatial extents {spatial}")
    win = sliding_window_view(xp, kernel, axis=tuple(range(2, 2 + rank)))
    # win: [N, C, *outfull, *kernel]; subsample stride on the out axes
    slicer = (slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)
    win = win[slicer]
    out_extents = win.shape[2:2 + rank]
    # [N, *out, C, *kernel] -> [N, P, C*K]
    win = np.moveaxis(win, 1, 1 + rank)
    n = x.shape[0]
    cols = win.reshape(n, int(np.prod(out_extents)), -1)
    return np.ascontiguousarray(cols), out_extents, xp.shape


def _col2im(gcols: np.ndarray, xp_shape, kernel, stride, padding, x_shape):
    """Adjoint of _im2col: scatter-add columns back into input layout."""
    rank = len(kernel)
    n, c = x_shape[0], x_shape[1]
    out_extents = tuple(
        (xp_shape[2 + i] - kernel[i]) // stride[i] + 1 for i in range(rank))
    gxp = np.zeros(xp_shape, dtype=gcols.dtype)
    g = gcols.reshape((n,) + out_extents + (c,) + kernel)
    g = np.moveaxis(g, 1 + rank, 1)  # [N, C, *out, *kernel]
    for offset in np.ndindex(*kernel):
        sl = (slice(None), slice(None)) + tuple(
            slice(o, o + out_extents[i] * stride[i], stride[i])
            for i, o in enumerate(offset))
        gxp[sl] += g[(slice(None), slice(None)) + (slice(None),) * rank + offset]
    inner = (slice(None), slice(None)) + tuple(
        slice(p, p + x_shape[2 + i]) for i, p in enumerate(padding))
    return gxp[inner]


def conv(x: Tensor, kernel: Tensor, stride=1, padding=0) -> Tensor:
    """Cross-correlation of [N,Cin,*S] with kernel [Cout,Cin,*K].

    Output spatial extent per axis is floor((in + 2*pad - k)/stride) + 1.
    """
    if kernel.ndim not in (4, 5):
        raise ShapeError(f"conv kernel must be 4-d or 5-d, got shape {kernel.shape}")
    rank = kernel.ndim - 2
    if x.ndim != rank + 2:
        raise ShapeError(
            f"conv input shape {x.shape} does not match kernel rank ({kernel.shape})")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(
            f"conv channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    stride = _tuplize(stride, rank, "stride")
    padding = _tuplize(padding, rank, "padding")
    ksp = kernel.shape[2:]
    cout = kernel.shape[0]

    cols, out_extents, xp_shape = _im2col(x.data, ksp, stride, padding)
    w2d = kernel.data.reshape(cout, -1)
    out = cols @ w2d.T                      # [N, P, Cout]
    out = np.moveaxis(out, 2, 1).reshape((x.shape[0], cout) + out_extents)

    def fn(g):
        g2d = np.moveaxis(g.reshape(g.shape[0], cout, -1), 1, 2)  # [N, P, Cout]
        gw = np.tensordot(g2d, cols, axes=([0, 1], [0, 1])).reshape(kernel.shape)
        gcols = g2d @ w2d                   # [N, P, Cin*K]
        gx = _col2im(gcols, xp_shape, ksp, stride, padding, x.shape)
        return gx, gw

    return _record("conv", out, (x, kernel), fn)


def maxpool(x: Tensor, kernel) -> Tensor:
    """Non-overlapping max pooling (stride = kernel).

    Odd extents are padded with -inf on the high side.  The gradient
    routes to the first maximal element in row-major window order.
    """
    rank = x.ndim - 2
    kernel = _tuplize(kernel, rank, "kernel")
    spatial = x.shape[2:]
    padded = tuple(-(-s // k) * k for s, k in zip(spatial, kernel))
    xd = x.data
    if padded != spatial:
        pw = ((0, 0), (0, 0)) + tuple((0, p - s) for p, s in zip(padded, spatial))
        xd = np.pad(xd, pw, constant_values=-np.inf)
    n, c = x.shape[0], x.shape[1]
    out_extents = tuple(p // k for p, k in zip(padded, kernel))
    split = []
    for e, k in zip(out_extents, kernel):
        split.extend([e, k])
    blocks = xd.reshape((n, c) + tuple(split))
    # move the window axes (3, 5, ...) to the back, flatten them
    win_axes = tuple(3 + 2 * i for i in range(rank))
    blocks = np.moveaxis(blocks, win_axes, tuple(range(-rank, 0)))
    flat = blocks.reshape((n, c) + out_extents + (-1,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def fn(g):
        gflat = np.zeros(flat.shape, dtype=g.dtype)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gblocks = gflat.reshape((n, c) + out_extents + kernel)
        gblocks = np.moveaxis(gblocks, tuple(range(-rank, 0)), win_axes)
        gxp = gblocks.reshape((n, c) + padded)
        sl = (slice(None), slice(None)) + tuple(slice(0, s) for s in spatial)
        return (gxp[sl],)

    return _record("maxpool", out, (x,), fn)


def transpose_conv(x: Tensor, kernel: Tensor, stride: int = 2) -> Tensor:
    """Transposed convolution with stride 2 and kernel extent 2 per axis.

    This is the adjoint of ``conv`` with the same kernel at stride 2 /
    zero padding; with stride == kernel the output blocks do not overlap
    and spatial extents exactly double.  Kernel layout [Cin, Cout, *K].
    """
    rank = x.ndim - 2
    if stride != 2:
        raise ShapeError(f"transpose_conv supports stride 2 only, got {stride}")
    if kernel.ndim != rank + 2 or any(k != 2 for k in kernel.shape[2:]):
        raise ShapeError(
            f"transpose_conv kernel must be [Cin, Cout] + (2,)*{rank}, got {kernel.shape}")
    if x.shape[1] != kernel.shape[0]:
        raise ShapeError(
            f"transpose_conv channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    n = x.shape[0]
    cout = kernel.shape[1]
    spatial = x.shape[2:]

    blocks = np.tensordot(x.data, kernel.data, axes=([1], [0]))
    # blocks: [N, *S, Cout, *K] -> [N, Cout, S1, k1, S2, k2, ...]
    blocks = np.moveaxis(blocks, 1 + rank, 1)
    order = []
    for i in range(rank):
        order.extend([2 + i, 2 + rank + i])
    blocks = blocks.transpose((0, 1) + tuple(order))
    out = blocks.reshape((n, cout) + tuple(2 * s for s in spatial))

    def fn(g):
        gb = g.reshape((n, cout) + tuple(
            v for s in spatial for v in (s, 2)))
        inv = np.argsort(order)
        gb = gb.transpose((0, 1) + tuple(2 + i for i in inv))  # [N,Cout,*S,*K]
        gb = np.moveaxis(gb, 1, 1 + rank)                      # [N,*S,Cout,*K]
        gx = np.tensordot(gb, kernel.data,
                          axes=(list(range(1 + rank, 2 + 2 * rank)),
                                list(range(1, 2 + rank))))
        gx = np.moveaxis(gx, -1, 1)
        gw = np.tensordot(x.data, gb, axes=([0] + list(range(2, 2 + rank)),
                                            [0] + list(range(1, 1 + rank))))
        return gx, gw

    return _record("transpose_conv", out, (x, kernel), fn)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor,
              running_mean: np.ndarray, running_var: np.ndarray,
              training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (batch, *spatial).

    Train mode normalizes by batch statistics (biased variance) and
    updates the running buffers in place with the given momentum; eval
    mode normalizes by the running buffers.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batchnorm parameters must have shape ({c},), got {gamma.shape}/{beta.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    m = int(np.prod([x.shape[a] for a in axes]))

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean.astype(x.data.dtype, copy=False)
        var = running_var.astype(x.data.dtype, copy=False)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def fn(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            gx = (gxhat - gxhat.mean(axis=axes, keepdims=True)
                  - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True) / m
                  ) * inv_std.reshape(bshape)
        else:
            gx = gxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return _record("batchnorm", out, (x, gamma, beta), fn)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last (channel) axis."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"layernorm parameters must have shape ({c},), got {gamma.shape}/{beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = gamma.data * xhat + beta.data

    def fn(g):
        red = tuple(range(g.ndim - 1))
        gbeta = g.sum(axis=red)
        ggamma = (g * xhat).sum(axis=red)
        gxhat = g * gamma.data
        gx = (gxhat - gxhat.mean(axis=-1, keepdims=True)
              - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)) * inv_std
        return gx, ggamma, gbeta

    return _record("layernorm", out, (x, gamma, beta), fn)
