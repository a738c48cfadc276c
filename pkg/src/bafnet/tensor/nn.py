"""Neural network operators: convolutions, normalisation, activations, attention."""

from __future__ import annotations

import numpy as np

from . import ops
from .core import ShapeError, Tensor, make_result


class ConfigError(ValueError):
    """An operator was configured with inconsistent hyperparameters."""


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


# -- 2-D convolution kernels on raw arrays -----------------------------------
#
# Each kernel offset (i, j) contributes one small matmul over channels.  This
# keeps peak memory at one shifted copy of the input instead of a full im2col
# buffer, which matters for 7x7 kernels over full spectrograms.

def _out_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


# im2col is used while the unrolled patch matrix has at most this many rows
_IM2COL_MAX_ROWS = 160


def _conv2d_forward(x, w, stride, padding):
    sh, sw = stride
    ph, pw = padding
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = _out_size(h, kh, sh, ph), _out_size(wd, kw, sw, pw)
    xt = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))).transpose(1, 0, 2, 3)
    if c * kh * kw <= _IM2COL_MAX_ROWS:
        cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, i, j] = xt[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]
        out = w.reshape(o, -1) @ cols.reshape(c * kh * kw, -1)
    else:
        out = np.zeros((o, n * ho * wo), dtype=x.dtype)
        # BLAS needs contiguous operands; strided weight slices fall off the fast path
        wk = np.ascontiguousarray(w.transpose(2, 3, 0, 1))
        for i in range(kh):
            for j in range(kw):
                patch = xt[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]
                out += wk[i, j] @ patch.reshape(c, -1)
    return out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)


def _conv2d_input_grad(g, w, stride, padding, in_hw):
    """Adjoint of :func:`_conv2d_forward` with respect to its input."""
    sh, sw = stride
    ph, pw = padding
    n, o, ho, wo = g.shape
    _, c, kh, kw = w.shape
    h, wd = in_hw
    if (sh, sw) == (1, 1) and ph < kh and pw < kw and (ho, wo) == (h + 2 * ph - kh + 1, wd + 2 * pw - kw + 1):
        # stride 1: full correlation with the flipped, channel-swapped kernel
        wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        return np.ascontiguousarray(_conv2d_forward(g, wf, (1, 1), (kh - 1 - ph, kw - 1 - pw)))
    gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
    gx = np.zeros((c, n, h + 2 * ph, wd + 2 * pw), dtype=g.dtype)
    wk = np.ascontiguousarray(w.transpose(2, 3, 1, 0))
    for i in range(kh):
        for j in range(kw):
            contrib = (wk[i, j] @ gt).reshape(c, n, ho, wo)
            gx[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += contrib
    gx = gx[:, :, ph:ph + h, pw:pw + wd]
    return np.ascontiguousarray(gx.transpose(1, 0, 2, 3))


def _conv2d_weight_grad(x, g, stride, padding, k_hw):
    sh, sw = stride
    ph, pw = padding
    n, c, h, wd = x.shape
    _, o, ho, wo = g.shape
    kh, kw = k_hw
    xt = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))).transpose(1, 0, 2, 3)
    gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
    gw = np.empty((o, c, kh, kw), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xt[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]
            gw[:, :, i, j] = gt @ patch.reshape(c, -1).T
    return gw


def _check_conv(x: Tensor, w: Tensor, names=("T", "F")) -> None:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv2d channel axis mismatch: input has {x.shape[1]} channels, weight expects {w.shape[1]}"
        )


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation over the last two axes; ``x`` is [N, Cin, T, F]."""
    stride, padding = _pair(stride), _pair(padding)
    _check_conv(x, w)
    if min(stride) < 1:
        raise ConfigError("stride must be >= 1")
    for axis, name in ((0, "T"), (1, "F")):
        if w.shape[2 + axis] > x.shape[2 + axis] + 2 * padding[axis]:
            raise ShapeError(
                f"conv2d kernel larger than padded input along axis {name}: "
                f"{w.shape[2 + axis]} > {x.shape[2 + axis] + 2 * padding[axis]}"
            )
    out = _conv2d_forward(x.data, w.data, stride, padding)
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gx = _conv2d_input_grad(g, w.data, stride, padding, x.shape[2:]) if x.requires_grad else None
        gw = _conv2d_weight_grad(x.data, g, stride, padding, w.shape[2:]) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_result(out, parents, backward)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0,
                     output_padding=0) -> Tensor:
    """Adjoint of :func:`conv2d`; ``w`` is [Cin, Cout, kT, kF]."""
    stride, padding, opad = _pair(stride), _pair(padding), _pair(output_padding)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d channel mismatch: input {x.shape}, weight {w.shape}")
    out_hw = tuple(
        (x.shape[2 + a] - 1) * stride[a] - 2 * padding[a] + w.shape[2 + a] + opad[a] for a in (0, 1)
    )
    out = _conv2d_input_grad(x.data, w.data, stride, padding, out_hw)
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gx = _conv2d_forward(g, w.data, stride, padding) if x.requires_grad else None
        gw = _conv2d_weight_grad(g, x.data, stride, padding, w.shape[2:]) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_result(out, parents, backward)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D cross-correlation; ``x`` is [N, Cin, L], ``w`` is [Cout, Cin, k]."""
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d expects 3-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d channel axis mismatch: {x.shape[1]} vs {w.shape[1]}")
    if w.shape[2] > x.shape[2] + 2 * padding:
        raise ShapeError("conv1d kernel larger than padded input along axis L")
    y = conv2d(ops.reshape(x, x.shape + (1,)), ops.reshape(w, w.shape + (1,)), b,
               stride=(stride, 1), padding=(padding, 0))
    return ops.reshape(y, y.shape[:3])


def conv_transpose1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
                     padding: int = 0, output_padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv1d`; ``w`` is [Cin, Cout, k]."""
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose1d channel mismatch: input {x.shape}, weight {w.shape}")
    y = conv_transpose2d(ops.reshape(x, x.shape + (1,)), ops.reshape(w, w.shape + (1,)), b,
                         stride=(stride, 1), padding=(padding, 0), output_padding=(output_padding, 0))
    return ops.reshape(y, y.shape[:3])


def depthwise_conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int = 0) -> Tensor:
    """Per-channel 1-D correlation, stride 1; ``x`` [N, C, L], ``w`` [C, k]."""
    n, c, length = x.shape
    k = w.shape[1]
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))
    lo = length + 2 * padding - k + 1
    out = np.zeros((n, c, lo), dtype=x.dtype)
    for j in range(k):
        out += w.data[None, :, j, None] * xp[:, :, j:j + lo]
    if b is not None:
        out += b.data[None, :, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w.data)
        for j in range(k):
            gxp[:, :, j:j + lo] += w.data[None, :, j, None] * g
            gw[:, j] = (g * xp[:, :, j:j + lo]).sum(axis=(0, 2))
        gx = gxp[:, :, padding:padding + length]
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    return make_result(out, parents, backward)


# -- normalisation ----------------------------------------------------------

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Normalise over every axis except axis 1 (channels).

    In training mode batch statistics are used and the running buffers are
    updated in place; in eval mode the running buffers are used.
    """
    if eps <= 0:
        raise ConfigError("eps must be positive")
    axes = tuple(a for a in range(x.ndim) if a != 1)
    bshape = [1] * x.ndim
    bshape[1] = x.shape[1]
    g_ = gamma.data.reshape(bshape)
    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        count = x.size // x.shape[1]
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(-1)
        unbiased = var.reshape(-1) * (count / max(count - 1, 1))
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean.reshape(bshape).astype(x.dtype)
        var = running_var.reshape(bshape).astype(x.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = g_ * xhat + beta.data.reshape(bshape)

    def backward(gy):
        ggamma = (gy * xhat).sum(axis=axes)
        gbeta = gy.sum(axis=axes)
        gxhat = gy * g_
        if training:
            m = x.size // x.shape[1]
            gx = inv / m * (
                m * gxhat
                - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * inv
        return gx.astype(x.dtype), ggamma, gbeta

    return make_result(out.astype(x.dtype), (x, gamma, beta), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))
    d = x.shape[-1]

    def backward(gy):
        gxhat = gy * gamma.data
        gx = inv / d * (
            d * gxhat
            - gxhat.sum(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return gx.astype(x.dtype), (gy * xhat).sum(axis=lead), gy.sum(axis=lead)

    return make_result(out.astype(x.dtype), (x, gamma, beta), backward)


# -- activations --------------------------------------------------------------

def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """PReLU with one learnable slope per channel (axis 1), or a single shared slope."""
    shape = [1] * x.ndim
    shared = slope.size == 1
    if not shared:
        shape[1] = slope.size
    a = slope.data.reshape(shape)
    pos = x.data >= 0
    out = np.where(pos, x.data, a * x.data)
    red = tuple(i for i in range(x.ndim) if shared or i != 1)

    def backward(g):
        gx = np.where(pos, g, a * g)
        ga = np.where(pos, 0, g * x.data).sum(axis=red).reshape(slope.shape)
        return gx, ga

    return make_result(out, (x, slope), backward)


def swish(x: Tensor) -> Tensor:
    return x * ops.sigmoid(x)


def glu(x: Tensor, axis: int = 1) -> Tensor:
    """Gated linear unit: first half times sigmoid of second half along ``axis``."""
    n = x.shape[axis]
    if n % 2:
        raise ShapeError(f"glu needs an even size along axis {axis}, got {n}")
    idx_a = [slice(None)] * x.ndim
    idx_b = [slice(None)] * x.ndim
    idx_a[axis] = slice(0, n // 2)
    idx_b[axis] = slice(n // 2, n)
    return x[tuple(idx_a)] * ops.sigmoid(x[tuple(idx_b)])


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` laid out as [out, in]."""
    y = ops.matmul(x, ops.transpose(w))
    return y if b is None else y + b


# -- attention ----------------------------------------------------------------

def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Return (context, weights) for [..., T, d] operands."""
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = ops.matmul(q, ops.swapaxes(k, -1, -2)) * scale
    weights = ops.softmax(scores, axis=-1)
    return ops.matmul(weights, v), weights


def multihead_attention(query: Tensor, key: Tensor, value: Tensor, params: dict, heads: int,
                        return_weights: bool = False):
    """Multihead attention over [N, T, D] inputs.

    ``params`` holds ``wq, bq, wk, bk, wv, bv, wo, bo`` tensors with the
    projection matrices laid out [D, D] (out, in).
    """
    n, t, d = query.shape
    if d % heads:
        raise ConfigError(f"model dimension {d} is not divisible by {heads} heads")
    dh = d // heads

    def split(x: Tensor) -> Tensor:
        tx = x.shape[1]
        return ops.transpose(ops.reshape(x, (n, tx, heads, dh)), (0, 2, 1, 3))

    q = split(linear(query, params["wq"], params["bq"]))
    k = split(linear(key, params["wk"], params["bk"]))
    v = split(linear(value, params["wv"], params["bv"]))
    ctx, weights = scaled_dot_attention(q, k, v)
    merged = ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (n, t, d))
    out = linear(merged, params["wo"], params["bo"])
    return (out, weights) if return_weights else out
