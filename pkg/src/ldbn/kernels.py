"""Numeric kernels with hand-written backward passes.

Tensors are plain C-contiguous numpy arrays. The engine runs in float32;
every kernel is dtype-generic so the gradient checker can run the same code
in float64. Each ``*_forward`` returns ``(out, cache)`` and the matching
``*_backward`` consumes that cache.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericError, StateError

ENGINE_DTYPE = np.float32
CHECK_DTYPE = np.float64


def as_tensor(x, dtype=ENGINE_DTYPE):
    """Return ``x`` as a contiguous array of ``dtype`` (no copy when possible)."""
    return np.ascontiguousarray(x, dtype=dtype)


def _require_cache(cache, kernel):
    if cache is None:
        raise StateError(f"{kernel}: forward not called")


def _check_rank(x, rank, name):
    if x.ndim != rank:
        raise DimensionError(f"{name}: expected rank {rank}, got shape {x.shape}")


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def conv_output_size(size, k, stride, pad):
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        return None
    return span // stride + 1


def conv2d_forward(x, w, stride=1, pad=0):
    """Cross-correlate ``x`` [N,Cin,H,W] with ``w`` [Cout,Cin,k,k], no bias."""
    _check_rank(x, 4, "conv2d input")
    _check_rank(w, 4, "conv2d weight")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise DimensionError(
            f"conv2d: input channel axis (axis 1) is {cin} but weight axis 1 is {wcin}")
    if kh != kw or kh % 2 == 0:
        raise DimensionError(f"conv2d: kernel must be square with odd size, got {kh}x{kw}")
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(wd, kw, stride, pad)
    if ho is None or wo is None:
        bad = [name for name, v in (("H (axis 2)", ho), ("W (axis 3)", wo)) if v is None]
        raise DimensionError(
            f"conv2d: {', '.join(bad)} not compatible with k={kh}, stride={stride}, pad={pad}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, Ho, Wo, Cin, k, k) -> rows of receptive fields
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    out = cols @ w.reshape(cout, -1).T
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    cache = (x.shape, cols, w, stride, pad)
    return out, cache


def conv2d_backward(cache, dout, need_weight_grad=True):
    """Return ``(dx, dw)``; ``dw`` is None when ``need_weight_grad`` is false."""
    _require_cache(cache, "conv2d_backward")
    xshape, cols, w, stride, pad = cache
    n, cin, h, wd = xshape
    cout, _, k, _ = w.shape
    _, _, ho, wo = dout.shape
    dmat = dout.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
    dw = (dmat.T @ cols).reshape(w.shape) if need_weight_grad else None
    dcols = (dmat @ w.reshape(cout, -1)).reshape(n, ho, wo, cin, k, k)
    dxp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2))
    dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
    return np.ascontiguousarray(dx), dw


# --------------------------------------------------------------------------
# linear, relu, pooling, reshaping
# --------------------------------------------------------------------------

def linear_forward(x, w, b=None):
    """``x`` [N,Din] times ``w`` [Dout,Din] transposed, plus optional bias."""
    _check_rank(x, 2, "linear input")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(
            f"linear: input feature axis (axis 1) is {x.shape[1]}, weight expects {w.shape[1]}")
    out = x @ w.T
    if b is not None:
        out += b
    return out, (x, w, b is not None)


def linear_backward(cache, dout, need_weight_grad=True):
    """Return ``(dx, dw, db)``; weight and bias grads are None when not needed."""
    _require_cache(cache, "linear_backward")
    x, w, has_bias = cache
    dx = dout @ w
    dw = db = None
    if need_weight_grad:
        dw = dout.T @ x
        db = dout.sum(axis=0) if has_bias else None
    return dx, dw, db


def relu_forward(x):
    mask = x > 0
    return np.maximum(x, 0, dtype=x.dtype), mask


def relu_backward(cache, dout):
    _require_cache(cache, "relu_backward")
    # derivative at exactly 0 is 0
    return dout * cache


def maxpool2_forward(x):
    """2x2 max pooling with stride 2. Ties go to the first row-major maximum."""
    _check_rank(x, 4, "maxpool2 input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2: spatial axes (2, 3) must be even, got {h}x{w}")
    quad = (x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2], x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2])
    out = np.maximum(np.maximum(quad[0], quad[1]), np.maximum(quad[2], quad[3]))
    # window slot of the first maximum in row-major order
    idx = np.full(out.shape, 3, dtype=np.uint8)
    for slot in (2, 1, 0):
        idx[quad[slot] == out] = slot
    return out, (x.shape, idx)


def maxpool2_backward(cache, dout):
    _require_cache(cache, "maxpool2_backward")
    shape, idx = cache
    dx = np.empty(shape, dtype=dout.dtype)
    for slot, (r, c) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        dx[:, :, r::2, c::2] = np.where(idx == slot, dout, 0)
    return dx


def flatten(x):
    """Collapse every axis after the batch axis."""
    return x.reshape(x.shape[0], -1)


# --------------------------------------------------------------------------
# grouped softmax
# --------------------------------------------------------------------------

def _check_finite(x, what):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what}: non-finite input")


def log_group_softmax(logits, axis=-1):
    _check_finite(logits, "group_softmax")
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def group_softmax(logits, axis=-1):
    """Softmax over ``axis`` (the grid-cell axis), one distribution per group."""
    _check_finite(logits, "group_softmax")
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def group_softmax_backward(probs, dout, axis=-1):
    """Vector-Jacobian product of softmax given its output ``probs``."""
    return probs * (dout - (dout * probs).sum(axis=axis, keepdims=True))
