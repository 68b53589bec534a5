"""Differentiable tensor operations.

Every function here computes a forward value with numpy and, when a tape
is active and some input requires a gradient, records a closure that
maps the output gradient to input gradients.  Images use NCHW layout.

Reductions rely on numpy's fixed summation order, so repeated runs on
identical inputs are bit-identical.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DimensionError, StateError
from .tensor import Tensor, active_tape


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _finish(out_data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    """Wrap a forward result, propagating requires_grad and recording on the tape."""
    needs = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, requires_grad=needs)
    if needs:
        tape = active_tape()
        if tape is not None:
            tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _finish(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _finish(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _finish(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _finish(out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return _finish(-a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    return _finish(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = a.data.reshape(shape)
    return _finish(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose2d(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose2d expects a matrix, got shape {a.shape}")
    return _finish(np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,))


def concat(tensors, axis: int) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise DimensionError("concat of zero tensors")
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        slicer = [slice(None)] * g.ndim
        pieces = []
        for i in range(len(tensors)):
            slicer[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            pieces.append(g[tuple(slicer)])
        return tuple(pieces)

    return _finish(out, tensors, bwd)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack two NCHW maps along channels: (N,Ca,H,W)+(N,Cb,H,W) -> (N,Ca+Cb,H,W)."""
    if a.ndim != 4 or b.ndim != 4:
        raise DimensionError("concat_channels expects NCHW tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(f"spatial/batch mismatch: {a.shape} vs {b.shape}")
    return concat((a, b), axis=1)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Columns [start, stop) of a matrix; gradient zero-pads back."""
    if a.ndim != 2:
        raise DimensionError(f"slice_cols expects a matrix, got shape {a.shape}")
    out = np.ascontiguousarray(a.data[:, start:stop])

    def bwd(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _finish(out, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)
        gg = g
        if not keepdims:
            for ax in sorted(axis):
                gg = np.expand_dims(gg, ax)
        return (np.broadcast_to(gg, a.shape).astype(a.dtype, copy=True),)

    return _finish(np.asarray(out), (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    count = a.size if axis is None else int(np.prod([a.shape[ax] for ax in axis]))
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bwd(g):
        gg = g / count
        if axis is not None and not keepdims:
            for ax in sorted(axis):
                gg = np.expand_dims(gg, ax)
        return (np.broadcast_to(gg, a.shape).astype(a.dtype, copy=True),)

    return _finish(np.asarray(out), (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects matrices, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _finish(out, (a, b), bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map per row: (n,d) @ (d,dout) + bias."""
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError(f"linear expects matrices, got x{x.shape}, W{weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear dimensions disagree: x{x.shape} @ W{weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"bias shape {bias.shape} != ({weight.shape[1]},)")
        out = out + bias.data

    if bias is None:
        def bwd(g):
            return g @ weight.data.T, x.data.T @ g
        return _finish(out, (x, weight), bwd)

    def bwd_b(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return _finish(out, (x, weight, bias), bwd_b)


# ---------------------------------------------------------------------------
# activations and normalizers
# ---------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _finish(np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    # numerically stable two-sided form
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _finish(out, (a,), bwd)


def activation(a: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ConfigError(f"unknown activation {kind!r}")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = axis % a.ndim if a.ndim else 0
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=ax, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=ax, keepdims=True)
        return (out * (g - dot),)

    return _finish(out, (a,), bwd)


def softmax_tokens(a: Tensor) -> Tensor:
    """Softmax over a 1-D score vector (one weight per token)."""
    if a.ndim != 1:
        raise DimensionError(f"softmax_tokens expects a vector, got shape {a.shape}")
    return softmax(a, axis=0)


def layer_norm_tokens(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-token normalization of (n,d) rows to mean 0 / variance 1, then affine."""
    if x.ndim != 2:
        raise DimensionError(f"layer_norm_tokens expects (n,d), got {x.shape}")
    d = x.shape[1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"affine shape mismatch: gamma{gamma.shape}, beta{beta.shape}, d={d}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data

    def bwd(g):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) * inv
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _finish(out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# convolution family
# ---------------------------------------------------------------------------

def _conv_out_extent(size: int, k: int, stride: int, padding: int) -> int:
    num = size + 2 * padding - k
    if num < 0:
        raise ConfigError(f"kernel {k} larger than padded input {size + 2 * padding}")
    if num % stride != 0:
        raise ConfigError(
            f"non-integral output extent: (size {size} + 2*{padding} - {k}) not divisible by stride {stride}"
        )
    return num // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, padding: int):
    """Gather k*k patches: (N,C,H,W) -> (N,C,k,k,Ho,Wo)."""
    n, c, h, w = x.shape
    ho = _conv_out_extent(h, k, stride, padding)
    wo = _conv_out_extent(w, k, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, k, k, ho, wo), dtype=x.dtype)
    for a in range(k):
        for b in range(k):
            cols[:, :, a, b] = x[:, :, a : a + stride * ho : stride, b : b + stride * wo : stride]
    return cols, ho, wo


def _col_accumulate(grad_cols_fn, shape, k: int, stride: int, padding: int, ho: int, wo: int, dtype):
    """Scatter per-offset contributions back onto the (padded) input grid."""
    n, c, h, w = shape
    hp, wp = h + 2 * padding, w + 2 * padding
    dx = np.zeros((n, c, hp, wp), dtype=dtype)
    for a in range(k):
        for b in range(k):
            dx[:, :, a : a + stride * ho : stride, b : b + stride * wo : stride] += grad_cols_fn(a, b)
    if padding:
        dx = dx[:, :, padding : padding + h, padding : padding + w]
    return dx


def _check_conv_args(x: Tensor, weight: Tensor, bias: Tensor, stride: int):
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects NCHW input and OIHW weight, got {x.shape}, {weight.shape}")
    cout, cin, kh, kw = weight.shape
    if kh != kw or kh not in (1, 2, 3):
        raise ConfigError(f"kernel must be square with side 1, 2 or 3, got {kh}x{kw}")
    if stride not in (1, 2):
        raise ConfigError(f"stride must be 1 or 2, got {stride}")
    if x.shape[1] != cin:
        raise DimensionError(f"input has {x.shape[1]} channels, weight expects {cin}")
    if bias.shape != (cout,):
        raise DimensionError(f"bias shape {bias.shape} != ({cout},)")
    return cout, cin, kh


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW batch with an OIHW kernel."""
    cout, cin, k = _check_conv_args(x, weight, bias, stride)
    cols, ho, wo = _im2col(x.data, k, stride, padding)
    out = np.tensordot(weight.data, cols, axes=([1, 2, 3], [1, 2, 3]))  # (Cout,N,Ho,Wo)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    out += bias.data[None, :, None, None]

    def bwd(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
        gb = g.sum(axis=(0, 2, 3))

        def offset_grad(a, b):
            # (N,Ho,Wo,Cin) contribution of kernel tap (a,b), back to NCHW
            contrib = np.tensordot(g, weight.data[:, :, a, b], axes=([1], [0]))
            return contrib.transpose(0, 3, 1, 2)

        gx = _col_accumulate(offset_grad, x.shape, k, stride, padding, ho, wo, g.dtype)
        return gx, gw, gb

    return _finish(out, (x, weight, bias), bwd)


def transposed_conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 2) -> Tensor:
    """Exact transpose of the stride-2 2x2 convolution: (N,C,H,W) -> (N,C/2,2H,2W).

    ``weight`` keeps the layout of the tied forward convolution
    (C, C/2, 2, 2), so `<conv(x), y> == <x, transposed_conv(y)>` holds
    with shared weights and zero bias.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"transposed_conv2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if c % 2 != 0:
        raise ConfigError(f"channel count must be even, got {c}")
    if stride != 2:
        raise ConfigError(f"only stride 2 is supported, got {stride}")
    k = stride
    if weight.shape != (c, c // 2, k, k):
        raise DimensionError(f"weight shape {weight.shape} != {(c, c // 2, k, k)}")
    cout = c // 2
    if bias.shape != (cout,):
        raise DimensionError(f"bias shape {bias.shape} != ({cout},)")

    out = np.zeros((n, cout, stride * h, stride * w), dtype=x.dtype)
    for a in range(k):
        for b in range(k):
            contrib = np.tensordot(x.data, weight.data[:, :, a, b], axes=([1], [0]))
            out[:, :, a :: stride, b :: stride] += contrib.transpose(0, 3, 1, 2)
    out += bias.data[None, :, None, None]

    def bwd(g):
        gcols, ho, wo = _im2col(g, k, stride, 0)
        gx = np.tensordot(weight.data, gcols, axes=([1, 2, 3], [1, 2, 3]))
        gx = np.ascontiguousarray(gx.transpose(1, 0, 2, 3))
        gw = np.tensordot(x.data, gcols, axes=([0, 2, 3], [0, 4, 5]))
        gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return _finish(out, (x, weight, bias), bwd)


class RunningStats:
    """Exponential-moving-average channel statistics for batch norm."""

    __slots__ = ("mean", "var", "momentum", "batches")

    def __init__(self, channels: int, momentum: float = 0.1, dtype=None):
        dt = dtype or np.float32
        self.mean = np.zeros(channels, dtype=dt)
        self.var = np.ones(channels, dtype=dt)
        self.momentum = float(momentum)
        self.batches = 0

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        m = self.momentum
        if self.batches == 0:
            self.mean[...] = mean
            self.var[...] = var
        else:
            self.mean[...] = (1.0 - m) * self.mean + m * mean
            self.var[...] = (1.0 - m) * self.var + m * var
        self.batches += 1


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    eps: float,
    mode: str,
    running: RunningStats,
) -> Tensor:
    """Per-channel normalization over batch and spatial dims (NCHW).

    Train mode uses batch statistics and updates ``running``; eval mode
    uses the recorded running statistics.
    """
    if x.ndim != 4:
        raise DimensionError(f"batch_norm2d expects NCHW, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"affine shape mismatch for {c} channels: {gamma.shape}, {beta.shape}")
    if eps <= 0:
        raise ConfigError("eps must be positive")
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")

    if mode == "train":
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running.update(mu, var)
    else:
        if running.batches == 0:
            raise StateError("eval-mode batch norm before any running statistics were recorded")
        mu = running.mean.astype(x.dtype)
        var = running.var.astype(x.dtype)

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    if mode == "eval":
        def bwd_eval(g):
            dx = g * (gamma.data * inv)[None, :, None, None]
            return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
        return _finish(out, (x, gamma, beta), bwd_eval)

    m = x.shape[0] * x.shape[2] * x.shape[3]

    def bwd(g):
        dxhat = g * gamma.data[None, :, None, None]
        m1 = dxhat.sum(axis=(0, 2, 3)) / m
        m2 = (dxhat * xhat).sum(axis=(0, 2, 3)) / m
        dx = (dxhat - m1[None, :, None, None] - xhat * m2[None, :, None, None]) * inv[None, :, None, None]
        return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _finish(out, (x, gamma, beta), bwd)
