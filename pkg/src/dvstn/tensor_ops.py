"""Dense NCHW layer primitives on numpy arrays.

A "tensor" here is a plain ``numpy.ndarray`` of rank 4 laid out as
(batch, channels, height, width) in C order.  Computation happens in the
dtype of the input (float32 for inference; the gradient checker runs the same
code in float64).  Every primitive is a pure function.

Convolution uses the cross-correlation convention (no kernel flip).
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DataError, DimensionError

__all__ = [
    "ConvParams",
    "BatchNormParams",
    "PoolParams",
    "MacTally",
    "count_executed_macs",
    "as_tensor",
    "conv_output_extent",
    "pool_output_extent",
    "conv2d",
    "depthwise_conv2d",
    "batchnorm_infer",
    "pool2d",
    "global_avg_pool",
    "fully_connected",
    "relu",
    "softmax",
    "channel_concat",
]

DEFAULT_EPS = 1e-5


def _pair(v):
    if isinstance(v, (int, np.integer)):
        return (int(v), int(v))
    a, b = v
    return (int(a), int(b))


@dataclass(frozen=True)
class ConvParams:
    out_channels: int
    kernel: tuple = (1, 1)
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    depthwise: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel))
        object.__setattr__(self, "stride", _pair(self.stride))
        object.__setattr__(self, "padding", _pair(self.padding))
        if self.out_channels < 1:
            raise ConfigurationError(f"out_channels must be >= 1, got {self.out_channels}")
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ConfigurationError(f"kernel and stride must be >= 1, got {self.kernel}/{self.stride}")
        if min(self.padding) < 0:
            raise ConfigurationError(f"padding must be >= 0, got {self.padding}")


@dataclass(frozen=True)
class PoolParams:
    kernel: tuple = (2, 2)
    stride: tuple = (2, 2)
    padding: tuple = (0, 0)
    ceil_mode: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel))
        object.__setattr__(self, "stride", _pair(self.stride))
        object.__setattr__(self, "padding", _pair(self.padding))
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ConfigurationError(f"kernel and stride must be >= 1, got {self.kernel}/{self.stride}")
        if min(self.padding) < 0:
            raise ConfigurationError(f"padding must be >= 0, got {self.padding}")


@dataclass(frozen=True)
class BatchNormParams:
    """Inference-mode normalization statistics for one layer.

    ``eps`` may be 0 as long as every ``var + eps`` is strictly positive.
    """

    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        for name in ("gamma", "beta", "mean", "var"):
            object.__setattr__(self, name, np.asarray(getattr(self, name)).reshape(-1))
        n = self.gamma.shape[0]
        if not (self.beta.shape[0] == self.mean.shape[0] == self.var.shape[0] == n):
            raise DimensionError("batchnorm parameter vectors differ in length")
        if self.eps < 0:
            raise DataError(f"eps must be >= 0, got {self.eps}")
        if np.any(self.var < 0):
            raise DataError("negative running variance")
        if np.any(self.var + self.eps <= 0):
            raise DataError("var + eps must be strictly positive")

    @property
    def channels(self):
        return self.gamma.shape[0]

    def scale_shift(self, dtype=np.float32):
        scale = self.gamma.astype(np.float64) / np.sqrt(self.var.astype(np.float64) + self.eps)
        shift = self.beta.astype(np.float64) - self.mean.astype(np.float64) * scale
        return scale.astype(dtype), shift.astype(dtype)


# --- executed-MAC instrumentation -------------------------------------------

@dataclass
class MacTally:
    total: int = 0
    by_op: dict = field(default_factory=dict)

    def add(self, op, n):
        self.total += n
        self.by_op[op] = self.by_op.get(op, 0) + n


_TALLY: contextvars.ContextVar = contextvars.ContextVar("dvstn_mac_tally", default=None)


@contextlib.contextmanager
def count_executed_macs():
    """Tally the multiply-accumulates the primitives actually execute.

    Each primitive reports the product of the operand extents it hands to the
    arithmetic kernel, so this is an independent check on the closed-form
    counters in :mod:`dvstn.graph`.
    """
    tally = MacTally()
    token = _TALLY.set(tally)
    try:
        yield tally
    finally:
        _TALLY.reset(token)


def _record(op, n):
    tally = _TALLY.get()
    if tally is not None:
        tally.add(op, int(n))


# --- validation helpers ------------------------------------------------------

def as_tensor(x, name=None, dtype=None):
    """Validate a rank-4 NCHW array and return it (cast if ``dtype`` given)."""
    x = np.asarray(x)
    if dtype is not None:
        x = x.astype(dtype, copy=False)
    elif not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float32)
    if x.ndim != 4:
        raise DimensionError(f"expected a rank-4 NCHW tensor, got shape {x.shape}", layer=name)
    if min(x.shape) < 1:
        raise DimensionError(f"all extents must be >= 1, got {x.shape}", layer=name)
    if not np.isfinite(x).all():
        raise DataError("tensor contains NaN or Inf", layer=name)
    return x


def conv_output_extent(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def pool_output_extent(size, kernel, stride, padding, ceil_mode=False):
    """Pooling output length; ceil mode drops a last window that starts in padding."""
    span = size + 2 * padding - kernel
    if span < 0:
        return 0
    if not ceil_mode:
        return span // stride + 1
    out = -(-span // stride) + 1
    if (out - 1) * stride >= size + padding:
        out -= 1
    return out


def _conv_geometry(x, params, name):
    n, c, h, w = x.shape
    (kh, kw), (sh, sw), (ph, pw) = params.kernel, params.stride, params.padding
    ho = conv_output_extent(h, kh, sh, ph)
    wo = conv_output_extent(w, kw, sw, pw)
    if ho < 1 or wo < 1:
        raise ConfigurationError(
            f"non-positive output extent {ho}x{wo} for input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {sh}x{sw}, padding {ph}x{pw}", layer=name)
    return n, c, h, w, kh, kw, sh, sw, ph, pw, ho, wo


def _pad(x, ph, pw, value=0.0):
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=value)


def im2col(x, kh, kw, sh, sw, ph, pw, ho, wo):
    """Patch matrix of shape (N*Ho*Wo, C*Kh*Kw), channel-major within a row."""
    xp = _pad(x, ph, pw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
    n, c = x.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


# --- primitives --------------------------------------------------------------

def conv2d(x, weights, bias, params, name=None):
    """Standard (dense) 2-D convolution.

    ``weights`` is [C_out, C_in, Kh, Kw]; ``bias`` is [C_out] or None.
    """
    if params.depthwise:
        return depthwise_conv2d(x, weights, bias, params, name=name)
    x = as_tensor(x, name)
    weights = np.asarray(weights, dtype=x.dtype)
    n, c, h, w, kh, kw, sh, sw, ph, pw, ho, wo = _conv_geometry(x, params, name)
    expected = (params.out_channels, c, kh, kw)
    if weights.shape != expected:
        raise DimensionError(f"weight shape {weights.shape} does not match expected {expected}", layer=name)
    cout = params.out_channels
    wmat = weights.reshape(cout, c * kh * kw)

    if kh == 1 and kw == 1 and ph == 0 and pw == 0:
        xs = x if (sh == 1 and sw == 1) else x[:, :, ::sh, ::sw][:, :, :ho, :wo]
        xs = np.ascontiguousarray(xs).reshape(n, c, ho * wo)
        _record("conv", n * ho * wo * c * cout)
        out = np.matmul(wmat, xs).reshape(n, cout, ho, wo)
    else:
        cols = im2col(x, kh, kw, sh, sw, ph, pw, ho, wo)
        _record("conv", cols.shape[0] * cols.shape[1] * cout)
        out = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
        out = np.ascontiguousarray(out)
    if bias is not None:
        bias = np.asarray(bias, dtype=x.dtype).reshape(-1)
        if bias.shape[0] != cout:
            raise DimensionError(f"bias length {bias.shape[0]} != out_channels {cout}", layer=name)
        out += bias[None, :, None, None]
    return out


def depthwise_conv2d(x, weights, bias, params, name=None):
    """Per-channel convolution: channel c of the output sees only input channel c.

    ``weights`` is [C, 1, Kh, Kw].  Accumulates one kernel tap at a time, in
    row-major tap order.
    """
    x = as_tensor(x, name)
    weights = np.asarray(weights, dtype=x.dtype)
    n, c, h, w, kh, kw, sh, sw, ph, pw, ho, wo = _conv_geometry(x, params, name)
    if params.out_channels != c:
        raise DimensionError(f"depthwise out_channels {params.out_channels} != input channels {c}", layer=name)
    if weights.shape != (c, 1, kh, kw):
        raise DimensionError(f"weight shape {weights.shape} does not match expected {(c, 1, kh, kw)}", layer=name)
    xp = _pad(x, ph, pw)
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    tmp = np.empty_like(out)
    for i in range(kh):
        for j in range(kw):
            tap = xp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]
            np.multiply(tap, weights[None, :, 0, i, j, None, None], out=tmp)
            out += tmp
    _record("depthwise_conv", n * c * ho * wo * kh * kw)
    if bias is not None:
        bias = np.asarray(bias, dtype=x.dtype).reshape(-1)
        if bias.shape[0] != c:
            raise DimensionError(f"bias length {bias.shape[0]} != channels {c}", layer=name)
        out += bias[None, :, None, None]
    return out


def batchnorm_infer(x, params, name=None):
    """y = gamma * (x - mean) / sqrt(var + eps) + beta, per channel."""
    x = as_tensor(x, name)
    if params.channels != x.shape[1]:
        raise DimensionError(f"batchnorm has {params.channels} channels, input has {x.shape[1]}", layer=name)
    scale, shift = params.scale_shift(x.dtype)
    _record("batchnorm", 2 * x.size)
    return x * scale[None, :, None, None] + shift[None, :, None, None]


def pool2d(x, kind, kernel, stride, padding=0, ceil_mode=False, name=None):
    """Max or average pooling.  Average pooling divides by in-bounds cells only."""
    x = as_tensor(x, name)
    p = PoolParams(kernel, stride, padding, ceil_mode)
    (kh, kw), (sh, sw), (ph, pw) = p.kernel, p.stride, p.padding
    n, c, h, w = x.shape
    ho = pool_output_extent(h, kh, sh, ph, ceil_mode)
    wo = pool_output_extent(w, kw, sw, pw, ceil_mode)
    if ho < 1 or wo < 1:
        raise ConfigurationError(
            f"non-positive pooling output {ho}x{wo} for input {h}x{w}, kernel {kh}x{kw}", layer=name)
    # extra bottom/right cells that ceil mode windows reach past the padding
    eh = max(0, (ho - 1) * sh + kh - (h + 2 * ph))
    ew = max(0, (wo - 1) * sw + kw - (w + 2 * pw))
    widths = ((0, 0), (0, 0), (ph, ph + eh), (pw, pw + ew))
    if kind not in ("max", "avg", "average"):
        raise ConfigurationError(f"unknown pooling kind {kind!r}", layer=name)

    def taps(a):
        # one strided slice per kernel cell, in row-major tap order
        for i in range(kh):
            for j in range(kw):
                yield a[..., i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]

    if kind == "max":
        xp = x if widths == ((0, 0),) * 4 else np.pad(x, widths, constant_values=-np.inf)
        it = taps(xp)
        out = next(it).copy()
        for t in it:
            np.maximum(out, t, out=out)
        return out
    xp = np.pad(x, widths)
    it = taps(xp)
    out = next(it).copy()
    for t in it:
        out += t
    ones = np.pad(np.ones((h, w), dtype=x.dtype), widths[2:])
    it = taps(ones)
    count = next(it).copy()
    for t in it:
        count += t
    return out / count


def global_avg_pool(x, name=None):
    x = as_tensor(x, name)
    return x.mean(axis=(2, 3), keepdims=True)


def fully_connected(x, weights, bias, name=None):
    """y = W x + b on each batch item; ``x`` is flattened per item.  Returns (N, K)."""
    x = np.asarray(x)
    if x.ndim == 1:
        x = x[None, :]
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float32)
    if not np.isfinite(x).all():
        raise DataError("tensor contains NaN or Inf", layer=name)
    flat = x.reshape(x.shape[0], -1)
    weights = np.asarray(weights, dtype=flat.dtype)
    if weights.ndim != 2 or weights.shape[1] != flat.shape[1]:
        raise DimensionError(
            f"weight shape {weights.shape} incompatible with input length {flat.shape[1]}", layer=name)
    _record("fully_connected", flat.shape[0] * weights.shape[0] * weights.shape[1])
    out = flat @ weights.T
    if bias is not None:
        bias = np.asarray(bias, dtype=flat.dtype).reshape(-1)
        if bias.shape[0] != weights.shape[0]:
            raise DimensionError(f"bias length {bias.shape[0]} != {weights.shape[0]} outputs", layer=name)
        out = out + bias
    return out


def relu(x):
    return np.maximum(x, 0)


def softmax(scores, axis=-1):
    s = np.asarray(scores)
    if not np.issubdtype(s.dtype, np.floating):
        s = s.astype(np.float64)
    z = s - s.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def channel_concat(tensors, name=None):
    tensors = [as_tensor(t, name) for t in tensors]
    if not tensors:
        raise DimensionError("nothing to concatenate", layer=name)
    n, _, h, w = tensors[0].shape
    for t in tensors[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise DimensionError(
                f"cannot concatenate {t.shape} with {tensors[0].shape}: N/H/W differ", layer=name)
    return np.concatenate(tensors, axis=1)
