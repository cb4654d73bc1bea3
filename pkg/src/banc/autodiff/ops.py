"""Differentiable operators.

Each function takes ``Tensor`` (or array-like) inputs, computes the forward
value with numpy and registers a backward closure through ``make_node``.
The operator set is deliberately narrow: it covers what the codec network,
its losses and the toy discriminators need, nothing more.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..dsp import hann_window
from .tensor import Tensor, as_tensor, make_node

__all__ = [
    "add", "sub", "mul", "div", "sum", "mean", "matmul", "reshape", "transpose",
    "getitem", "concat", "pad", "detach", "log", "exp", "abs", "square",
    "relu", "leaky_relu", "elu", "sigmoid", "tanh", "pointwise", "l1_loss",
    "mse_loss", "conv1d", "conv1d_causal", "conv_transpose1d", "batch_norm1d",
    "avg_pool1d", "fft_convolve", "stft_magnitude",
]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _lift(a, b) -> tuple[Tensor, Tensor]:
    """Promote operands to tensors; python/numpy constants take the tensor dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _lift(a, b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), backward, "div")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(np.asarray(out), (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if count == 0:
        raise ValueError("mean over an empty axis")
    out = np.mean(x.data, axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype),)

    return make_node(np.asarray(out), (x,), backward, "mean")


def matmul(a, b) -> Tensor:
    """``a @ b`` with numpy broadcasting over leading dimensions."""
    a, b = _lift(a, b)
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_node(out, (a, b), backward, "matmul")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return make_node(out, (x,), backward, "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)

    def backward(g):
        return (np.transpose(g, inverse),)

    return make_node(out, (x,), backward, "transpose")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer, type(None))) or i is Ellipsis for i in items)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_node(np.array(out), (x,), backward, "getitem")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return make_node(out, tensors, backward, "concat")


def pad(x, widths: tuple[int, int], axis: int = -1, value: float = 0.0) -> Tensor:
    """Constant-pad one axis by ``(before, after)`` samples."""
    x = as_tensor(x)
    axis = axis % x.ndim
    spec = [(0, 0)] * x.ndim
    spec[axis] = tuple(widths)
    out = np.pad(x.data, spec, constant_values=value)
    before = widths[0]
    n = x.shape[axis]

    def backward(g):
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(before, before + n)
        return (g[tuple(sl)],)

    return make_node(out, (x,), backward, "pad")


def detach(x) -> Tensor:
    """Stop-gradient: same values, no path back to ``x``."""
    return Tensor(as_tensor(x).data)


# ---------------------------------------------------------------------------
# pointwise maps
# ---------------------------------------------------------------------------
def _unary(x, fwd, dfdx, name) -> Tensor:
    x = as_tensor(x)
    out = fwd(x.data)

    def backward(g):
        return (g * dfdx(x.data, out),)

    return make_node(out, (x,), backward, name)


def log(x) -> Tensor:
    return _unary(x, np.log, lambda v, o: 1.0 / v, "log")


def exp(x) -> Tensor:
    return _unary(x, np.exp, lambda v, o: o, "exp")


def abs(x) -> Tensor:  # noqa: A001
    return _unary(x, np.abs, lambda v, o: np.sign(v), "abs")


def square(x) -> Tensor:
    return _unary(x, np.square, lambda v, o: 2.0 * v, "square")


def relu(x) -> Tensor:
    return _unary(x, lambda v: np.maximum(v, 0), lambda v, o: (v > 0).astype(v.dtype), "relu")


def leaky_relu(x, alpha: float = 0.2) -> Tensor:
    return _unary(
        x,
        lambda v: np.where(v > 0, v, alpha * v),
        lambda v, o: np.where(v > 0, 1.0, alpha).astype(v.dtype),
        "leaky_relu",
    )


def elu(x) -> Tensor:
    return _unary(
        x,
        lambda v: np.where(v > 0, v, np.expm1(np.minimum(v, 0))),
        lambda v, o: np.where(v > 0, 1.0, o + 1.0).astype(v.dtype),
        "elu",
    )


def _sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x) -> Tensor:
    return _unary(x, _sigmoid, lambda v, o: o * (1.0 - o), "sigmoid")


def tanh(x) -> Tensor:
    return _unary(x, np.tanh, lambda v, o: 1.0 - o * o, "tanh")


_POINTWISE = {"elu": elu, "sigmoid": sigmoid, "tanh": tanh, "relu": relu}


def pointwise(kind: str, x, alpha: float = 0.2) -> Tensor:
    """Dispatch by name: ``leaky_relu``, ``elu``, ``sigmoid``, ``tanh`` or ``relu``."""
    if kind == "leaky_relu":
        return leaky_relu(x, alpha)
    try:
        return _POINTWISE[kind](x)
    except KeyError:
        raise ValueError(f"unknown pointwise op {kind!r}") from None


# ---------------------------------------------------------------------------
# fused losses
# ---------------------------------------------------------------------------
def _check_same_shape(a: Tensor, b: Tensor, name: str):
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def l1_loss(a, b) -> Tensor:
    a, b = _lift(a, b)
    _check_same_shape(a, b, "l1_loss")
    diff = a.data - b.data
    n = max(diff.size, 1)
    out = np.asarray(np.abs(diff).sum() / n, dtype=diff.dtype)

    def backward(g):
        s = np.sign(diff) * (g / n)
        return s, -s

    return make_node(out, (a, b), backward, "l1_loss")


def mse_loss(a, b) -> Tensor:
    a, b = _lift(a, b)
    _check_same_shape(a, b, "mse_loss")
    diff = a.data - b.data
    n = max(diff.size, 1)
    out = np.asarray(np.square(diff).sum() / n, dtype=diff.dtype)

    def backward(g):
        s = diff * (2.0 * g / n)
        return s, -s

    return make_node(out, (a, b), backward, "mse_loss")


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------
def _check_conv_shapes(x: Tensor, w: Tensor, name: str):
    if x.ndim != 3 or w.ndim != 3:
        raise ValueError(f"{name}: expected x[B,C,L] and 3-D weight, got {x.shape} and {w.shape}")


def conv1d(x, w, b=None, stride: int = 1, dilation: int = 1, padding=(0, 0)) -> Tensor:
    """Cross-correlation ``y[b,o,t] = sum_{c,k} w[o,c,k] * xpad[b,c,t*stride + k*dilation]``."""
    x, w = as_tensor(x), as_tensor(w)
    _check_conv_shapes(x, w, "conv1d")
    bsz, cin, _ = x.shape
    cout, cin_w, k = w.shape
    if cin != cin_w:
        raise ValueError(f"conv1d: input has {cin} channels, weight expects {cin_w}")
    pl, pr = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (pl, pr))) if (pl or pr) else x.data
    lp = xp.shape[-1]
    span = dilation * (k - 1) + 1
    lout = (lp - span) // stride + 1
    if lout <= 0:
        raise ValueError(f"conv1d: input length {x.shape[-1]} too short for kernel span {span}")

    if k == 1 and stride == 1:
        win = None
        out = np.matmul(w.data[:, :, 0], xp)
    else:
        win = sliding_window_view(xp, span, axis=-1)[:, :, ::stride, ::dilation][:, :, :lout]
        out = np.tensordot(win, w.data, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None]
    out = np.ascontiguousarray(out)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gx = gw = gb = None
        if w.requires_grad:
            if win is None:
                gw = np.tensordot(g, xp, axes=([0, 2], [0, 2]))[:, :, None]
            else:
                gw = np.tensordot(g, win, axes=([0, 2], [0, 2]))
        if x.requires_grad:
            if win is None:
                gxp = np.matmul(w.data[:, :, 0].T, g)
            else:
                gwin = np.tensordot(g, w.data, axes=([1], [0]))  # (B, Lout, Cin, K)
                gxp = np.zeros((bsz, cin, lp), dtype=g.dtype)
                if k <= lout:
                    stop = stride * (lout - 1) + 1
                    for j in range(k):
                        gxp[:, :, j * dilation : j * dilation + stop : stride] += gwin[:, :, :, j].transpose(0, 2, 1)
                else:
                    for t in range(lout):
                        gxp[:, :, t * stride : t * stride + span : dilation] += gwin[:, t]
            gx = gxp[:, :, pl : lp - pr]
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2))
        return (gx, gw) if b is None else (gx, gw, gb)

    return make_node(out, parents, backward, "conv1d")


def causal_padding(kernel: int, stride: int = 1, dilation: int = 1) -> int:
    """Left padding that makes a causal conv shrink the length exactly by ``stride``."""
    pad_left = dilation * (kernel - 1) - (stride - 1)
    if pad_left < 0:
        raise ValueError(f"kernel {kernel} shorter than stride {stride}")
    return pad_left


def conv1d_causal(x, w, b=None, stride: int = 1, dilation: int = 1) -> Tensor:
    """Causal conv: output frame ``t`` only sees inputs before ``(t + 1) * stride``."""
    x, w = as_tensor(x), as_tensor(w)
    _check_conv_shapes(x, w, "conv1d_causal")
    if x.shape[-1] % stride:
        raise ValueError(f"conv1d_causal: length {x.shape[-1]} not divisible by stride {stride}")
    pl = causal_padding(w.shape[-1], stride, dilation)
    return conv1d(x, w, b, stride=stride, dilation=dilation, padding=(pl, 0))


def conv_transpose1d(x, w, b=None, stride: int = 1) -> Tensor:
    """Causal transposed conv; weight is ``[Cin, Cout, K]`` and the trailing ``K - S`` samples are cropped."""
    x, w = as_tensor(x), as_tensor(w)
    _check_conv_shapes(x, w, "conv_transpose1d")
    bsz, cin, length = x.shape
    cin_w, cout, k = w.shape
    if cin != cin_w:
        raise ValueError(f"conv_transpose1d: input has {cin} channels, weight expects {cin_w}")
    if k < stride:
        raise ValueError(f"conv_transpose1d: kernel {k} shorter than stride {stride}")
    full = (length - 1) * stride + k
    out_len = length * stride
    stop = stride * (length - 1) + 1
    contrib = np.tensordot(x.data, w.data, axes=([1], [0]))  # (B, L, Cout, K)
    y = np.zeros((bsz, cout, full), dtype=contrib.dtype)
    for j in range(k):
        y[:, :, j : j + stop : stride] += contrib[:, :, :, j].transpose(0, 2, 1)
    y = y[:, :, :out_len]
    if b is not None:
        b = as_tensor(b)
        y = y + b.data[None, :, None]
    y = np.ascontiguousarray(y)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gfull = np.zeros((bsz, cout, full), dtype=g.dtype)
        gfull[:, :, :out_len] = g
        gc = np.stack([gfull[:, :, j : j + stop : stride] for j in range(k)], axis=-1)  # (B,Cout,L,K)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.tensordot(gc, w.data, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
        if w.requires_grad:
            gw = np.tensordot(x.data, gc, axes=([0, 2], [0, 2]))
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2))
        return (gx, gw) if b is None else (gx, gw, gb)

    return make_node(y, parents, backward, "conv_transpose1d")


def batch_norm1d(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (batch, time).

    In training mode the batch statistics are used and the running buffers are
    updated in place (unbiased variance, like most frameworks).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 3:
        raise ValueError(f"batch_norm1d: expected [B,C,L], got {x.shape}")
    bsz, c, length = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm1d: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
    n = bsz * length
    if n == 0:
        raise ValueError("batch_norm1d: empty batch")
    if training:
        mu = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        unbiased = var * n / max(n - 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var
    invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.astype(x.dtype)[None, :, None]) * invstd[None, :, None]
    out = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None]
            if training:
                s1 = dxhat.sum(axis=(0, 2), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
                gx = (invstd[None, :, None] / n) * (n * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * invstd[None, :, None]
        return gx, ggamma, gbeta

    return make_node(out, (x, gamma, beta), backward, "batch_norm1d")


def avg_pool1d(x, kernel: int, stride: int, padding: int = 0) -> Tensor:
    """Average pooling, zero padding counted in the denominator."""
    x = as_tensor(x)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    lp = xp.shape[-1]
    lout = (lp - kernel) // stride + 1
    win = sliding_window_view(xp, kernel, axis=-1)[:, :, ::stride][:, :, :lout]
    out = win.mean(axis=-1)

    def backward(g):
        gxp = np.zeros_like(xp)
        stop = stride * (lout - 1) + 1
        share = g / kernel
        for j in range(kernel):
            gxp[:, :, j : j + stop : stride] += share
        return (gxp[:, :, padding : lp - padding],)

    return make_node(out, (x,), backward, "avg_pool1d")


# ---------------------------------------------------------------------------
# spectral ops
# ---------------------------------------------------------------------------
def _fft_size(n: int) -> int:
    from scipy.fft import next_fast_len

    return next_fast_len(n, real=True)


def fft_convolve(signal, kernel) -> Tensor:
    """Causal linear convolution along the last axis, truncated to the signal length.

    ``signal`` is ``[B, Cs, L]`` and ``kernel`` ``[B, C, K]`` with ``Cs`` either 1
    or ``C``; the output is ``[B, C, L]``.
    """
    s, h = as_tensor(signal), as_tensor(kernel)
    length, k = s.shape[-1], h.shape[-1]
    nfft = _fft_size(length + k - 1)
    S = np.fft.rfft(s.data, nfft)
    H = np.fft.rfft(h.data, nfft)
    y = np.fft.irfft(S * H, nfft)[..., :length].astype(np.result_type(s.dtype, h.dtype))
    out_shape = y.shape

    def backward(g):
        G = np.fft.rfft(g, nfft)
        gs = gh = None
        if s.requires_grad:
            gs = np.fft.irfft(G * np.conj(H), nfft)[..., :length]
            gs = _unbroadcast(gs.astype(s.dtype), s.shape)
        if h.requires_grad:
            gh = np.fft.irfft(G * np.conj(S), nfft)[..., :k]
            gh = _unbroadcast(gh.astype(h.dtype), h.shape)
        return gs, gh

    if y.shape != out_shape:  # pragma: no cover - defensive
        raise RuntimeError("fft_convolve shape drift")
    return make_node(np.ascontiguousarray(y), (s, h), backward, "fft_convolve")


def stft_magnitude(x, fft_size: int, hop: int, win_length: int, floor: float = 1e-12) -> Tensor:
    """``|STFT|`` of the last axis: ``[..., L] -> [..., frames, fft_size // 2 + 1]``.

    Frames start at sample 0 without centre padding.  The gradient at a zero
    magnitude bin is taken as zero (``floor`` guards the division).
    """
    x = as_tensor(x)
    length = x.shape[-1]
    if length < fft_size:
        raise ValueError(f"stft: signal length {length} shorter than fft size {fft_size}")
    window = hann_window(win_length, fft_size, x.dtype)
    n_frames = (length - fft_size) // hop + 1
    frames = sliding_window_view(x.data, fft_size, axis=-1)[..., ::hop, :][..., :n_frames, :]
    X = np.fft.rfft(frames * window, axis=-1)
    mag = np.abs(X).astype(x.dtype)

    def backward(g):
        Z = g * X / np.maximum(mag, floor)
        Z[..., 1 : fft_size // 2] *= 0.5
        gframes = np.fft.irfft(Z, fft_size, axis=-1) * fft_size * window
        gx = np.zeros(x.shape, dtype=x.dtype)
        for j in range(n_frames):
            gx[..., j * hop : j * hop + fft_size] += gframes[..., j, :]
        return (gx,)

    return make_node(mag, (x,), backward, "stft_magnitude")
