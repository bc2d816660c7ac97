"""
Dense rank-4 tensor kernels: convolution, batch normalization, 2x2 average
pooling and the linear classifier, each with its analytic backward pass.

Tensors are C-contiguous numpy arrays laid out (n, c, h, w). Every kernel is a
pure function of its inputs; the only state here is the process-wide scalar
precision and the debug flag.
"""
import logging
import os
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed

from errors import NumericalError, ShapeError, TraceError

logger = logging.getLogger(__name__)

# (n, c, h, w) numpy array
Tensor4 = np.ndarray

DTYPES = {
    'f32': np.float32,
    'f64': np.float64,
}

# Minimum input elements per shard.
MIN_SHARD_ELEMENTS = 1 << 15
# Shard count depends only on the batch, never on the machine, so the
# d_weight summation order is the same everywhere.
MAX_SHARDS = 8

_precision = 'f64'
_debug = os.environ.get('SCA_DEBUG', '') not in ('', '0')


def set_precision(name):
    """Select the scalar type used for parameters and activations ('f32' or 'f64')."""
    global _precision
    if name not in DTYPES:
        raise ValueError(f"Unknown precision '{name}', expected one of {sorted(DTYPES)}")
    _precision = name


def get_precision():
    return _precision


def get_dtype():
    return DTYPES[_precision]


def set_debug(enabled):
    """Turn the after-kernel NaN/Inf assertion on or off."""
    global _debug
    _debug = bool(enabled)


def worker_count():
    """Kernel worker threads: SCA_THREADS if set, otherwise the machine's cores."""
    value = os.environ.get('SCA_THREADS', '').strip()
    if value:
        try:
            return max(1, int(value))
        except ValueError:
            logger.warning("Ignoring non-integer SCA_THREADS=%r", value)
    return os.cpu_count() or 1


def as_tensor4(array, name='tensor'):
    """Coerce to a contiguous rank-4 array of the current precision."""
    arr = np.ascontiguousarray(array, dtype=get_dtype())
    if arr.ndim != 4:
        raise ShapeError(f"{name} must be rank 4, got shape {arr.shape}", shape=list(arr.shape))
    return arr


def check_finite(kernel, *arrays):
    if not _debug:
        return
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"{kernel} produced a non-finite value", kernel=kernel)


@dataclass
class ConvParams:
    """Bias-free convolution: weight (c_out, c_in, k, k), stride, zero padding."""

    weight: np.ndarray
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ShapeError(f"Conv weight must be (c_out, c_in, k, k), got {self.weight.shape}")
        if self.weight.shape[2] % 2 == 0:
            raise ShapeError(f"Conv kernel size must be odd, got {self.weight.shape[2]}")
        if self.stride < 1 or self.pad < 0:
            raise ShapeError(f"Invalid stride/pad {self.stride}/{self.pad}")

    @property
    def c_out(self):
        return self.weight.shape[0]

    @property
    def c_in(self):
        return self.weight.shape[1]

    @property
    def k(self):
        return self.weight.shape[2]

    def output_size(self, h, w):
        """Spatial output size; the stride must tile the padded input exactly."""
        sizes = []
        for dim in (h, w):
            span = dim + 2 * self.pad - self.k
            if span < 0 or span % self.stride != 0:
                raise ShapeError(
                    f"Conv k={self.k} stride={self.stride} pad={self.pad} does not tile input size {dim}",
                    input_size=dim
                )
            sizes.append(span // self.stride + 1)
        return tuple(sizes)


@dataclass
class BNParams:
    """Per-channel batch-normalization parameters and running statistics."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def create(cls, channels, eps=1e-5, momentum=0.1):
        dtype = get_dtype()
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            eps=eps,
            momentum=momentum
        )

    @property
    def channels(self):
        return len(self.gamma)


@dataclass
class BNCache:
    """What batchnorm_backward needs from the forward call."""

    mode: str
    shape: tuple
    x_hat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray


# =============================================================================
# Convolution
# =============================================================================

def _shard_bounds(n, elements_per_sample):
    shards = min(MAX_SHARDS, n, max(1, (n * elements_per_sample) // MIN_SHARD_ELEMENTS))
    if shards <= 1:
        return [(0, n)]
    edges = np.linspace(0, n, shards + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _conv_forward_block(x, weight, stride, pad, ho, wo):
    c_out, _, k, _ = weight.shape
    xp = _pad(x, pad)
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    acc = np.zeros((x.shape[0], ho, wo, c_out), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i:i + span_h:stride, j:j + span_w:stride]
            acc += np.tensordot(patch, weight[:, :, i, j], axes=([1], [1]))
    return np.ascontiguousarray(acc.transpose(0, 3, 1, 2))


def _conv_backward_block(x, weight, stride, pad, d_out):
    _, _, h, w = x.shape
    k = weight.shape[2]
    ho, wo = d_out.shape[2], d_out.shape[3]
    xp = _pad(x, pad)
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    d_xp = np.zeros_like(xp)
    d_weight = np.zeros_like(weight)
    d_out_t = d_out.transpose(0, 2, 3, 1)
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i:i + span_h:stride, j:j + span_w:stride]
            d_weight[:, :, i, j] = np.tensordot(d_out, patch, axes=([0, 2, 3], [0, 2, 3]))
            d_xp[:, :, i:i + span_h:stride, j:j + span_w:stride] += np.tensordot(
                d_out_t, weight[:, :, i, j], axes=([3], [0])
            ).transpose(0, 3, 1, 2)
    d_x = d_xp[:, :, pad:pad + h, pad:pad + w] if pad else d_xp
    return np.ascontiguousarray(d_x), d_weight


def _check_conv_input(x, p):
    if x.ndim != 4:
        raise ShapeError(f"Conv input must be rank 4, got {x.shape}", input_shape=list(x.shape))
    if x.shape[1] != p.c_in:
        raise ShapeError(
            f"Conv input shape {x.shape} does not match weight shape {p.weight.shape}",
            input_shape=list(x.shape),
            weight_shape=list(p.weight.shape)
        )


def conv2d_forward(x, p):
    """Cross-correlation of x (n, c_in, h, w) with p.weight -> (n, c_out, h', w')."""
    _check_conv_input(x, p)
    ho, wo = p.output_size(x.shape[2], x.shape[3])
    shards = _shard_bounds(x.shape[0], int(np.prod(x.shape[1:])))
    if len(shards) == 1:
        out = _conv_forward_block(x, p.weight, p.stride, p.pad, ho, wo)
    else:
        parts = Parallel(n_jobs=min(worker_count(), len(shards)), prefer='threads')(
            delayed(_conv_forward_block)(x[a:b], p.weight, p.stride, p.pad, ho, wo)
            for a, b in shards
        )
        out = np.concatenate(parts, axis=0)
    check_finite('conv2d_forward', out)
    return out


def conv2d_backward(x, p, d_out):
    """Gradients of conv2d_forward with respect to its input and its weight."""
    _check_conv_input(x, p)
    ho, wo = p.output_size(x.shape[2], x.shape[3])
    expected = (x.shape[0], p.c_out, ho, wo)
    if d_out.shape != expected:
        raise ShapeError(
            f"Conv output gradient shape {d_out.shape} does not match forward output {expected}",
            grad_shape=list(d_out.shape),
            expected_shape=list(expected)
        )
    shards = _shard_bounds(x.shape[0], int(np.prod(x.shape[1:])))
    if len(shards) == 1:
        d_x, d_weight = _conv_backward_block(x, p.weight, p.stride, p.pad, d_out)
    else:
        parts = Parallel(n_jobs=min(worker_count(), len(shards)), prefer='threads')(
            delayed(_conv_backward_block)(x[a:b], p.weight, p.stride, p.pad, d_out[a:b])
            for a, b in shards
        )
        d_x = np.concatenate([part[0] for part in parts], axis=0)
        # shard order fixes the summation order
        d_weight = parts[0][1].copy()
        for part in parts[1:]:
            d_weight += part[1]
    check_finite('conv2d_backward', d_x, d_weight)
    return d_x, d_weight


# =============================================================================
# Batch normalization
# =============================================================================

def batchnorm_forward(x, p, mode='train', time_flatten=False):
    """
    Normalize each channel, then scale by gamma and shift by beta.

    With time_flatten the input may be (T, n, c, h, w); train-mode statistics
    are then taken over every time step and sample together, with one shared
    (gamma, beta) per channel.
    """
    if mode not in ('train', 'eval'):
        raise ValueError(f"Unknown batchnorm mode '{mode}'")
    shape = x.shape
    if time_flatten and x.ndim == 5:
        x = x.reshape((-1,) + x.shape[2:])
    if x.ndim != 4:
        raise ShapeError(f"Batchnorm input must be rank 4, got {shape}", input_shape=list(shape))
    if x.shape[1] != p.channels:
        raise ShapeError(
            f"Batchnorm input {shape} has {x.shape[1]} channels, parameters have {p.channels}",
            input_shape=list(shape)
        )
    if x.shape[0] == 0:
        raise ShapeError("Batchnorm received an empty batch", input_shape=list(shape))

    axes = (0, 2, 3)
    if mode == 'train':
        count = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        unbiased = var * count / (count - 1) if count > 1 else var
        p.running_mean *= (1 - p.momentum)
        p.running_mean += p.momentum * mean
        p.running_var *= (1 - p.momentum)
        p.running_var += p.momentum * unbiased
    else:
        mean = p.running_mean
        var = p.running_var

    inv_std = 1.0 / np.sqrt(var + p.eps)
    x_hat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = x_hat * p.gamma[None, :, None, None] + p.beta[None, :, None, None]
    check_finite('batchnorm_forward', y)
    cache = BNCache(mode=mode, shape=shape, x_hat=x_hat, inv_std=inv_std, gamma=p.gamma.copy())
    return y.reshape(shape), cache


def batchnorm_backward(cache, d_y):
    """Returns (d_x, d_gamma, d_beta) for a train-mode forward call."""
    if cache is None or cache.mode != 'train':
        raise TraceError("Batchnorm backward needs the cache of a train-mode forward call")
    if d_y.shape != cache.shape:
        raise ShapeError(
            f"Batchnorm gradient shape {d_y.shape} does not match cached forward shape {cache.shape}",
            grad_shape=list(d_y.shape),
            expected_shape=list(cache.shape)
        )
    x_hat = cache.x_hat
    d = d_y.reshape(x_hat.shape)
    axes = (0, 2, 3)
    count = x_hat.shape[0] * x_hat.shape[2] * x_hat.shape[3]

    d_beta = d.sum(axis=axes)
    d_gamma = (d * x_hat).sum(axis=axes)
    d_xhat = d * cache.gamma[None, :, None, None]
    d_x = (cache.inv_std[None, :, None, None] / count) * (
        count * d_xhat
        - d_xhat.sum(axis=axes, keepdims=True)
        - x_hat * (d_xhat * x_hat).sum(axis=axes, keepdims=True)
    )
    check_finite('batchnorm_backward', d_x, d_gamma)
    return d_x.reshape(cache.shape), d_gamma, d_beta


# =============================================================================
# Pooling and the classifier
# =============================================================================

def avgpool2(x, direction='forward', d_out=None):
    """Non-overlapping 2x2 mean pooling; backward spreads each gradient over its window."""
    if x.ndim != 4:
        raise ShapeError(f"Pooling input must be rank 4, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"2x2 pooling needs even spatial dims, got {h}x{w}", input_shape=list(x.shape))

    if direction == 'forward':
        out = x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
        check_finite('avgpool2', out)
        return out

    if direction != 'backward':
        raise ValueError(f"Unknown direction '{direction}'")
    if d_out is None or d_out.shape != (n, c, h // 2, w // 2):
        got = None if d_out is None else d_out.shape
        raise ShapeError(f"Pooling gradient shape {got} does not match {(n, c, h // 2, w // 2)}")
    d_x = np.repeat(np.repeat(d_out, 2, axis=2), 2, axis=3) * 0.25
    check_finite('avgpool2_backward', d_x)
    return np.ascontiguousarray(d_x)


def linear(x, weight, direction='forward', d_out=None):
    """
    Bias-free fully connected layer y = x @ weight.T.

    Forward returns y; backward returns (d_x, d_weight).
    """
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"Linear input {x.shape} does not match weight {weight.shape}",
            input_shape=list(x.shape),
            weight_shape=list(weight.shape)
        )
    if direction == 'forward':
        y = x @ weight.T
        check_finite('linear', y)
        return y

    if direction != 'backward':
        raise ValueError(f"Unknown direction '{direction}'")
    if d_out is None or d_out.shape != (x.shape[0], weight.shape[0]):
        got = None if d_out is None else d_out.shape
        raise ShapeError(f"Linear gradient shape {got} does not match {(x.shape[0], weight.shape[0])}")
    d_x = d_out @ weight
    d_weight = d_out.T @ x
    check_finite('linear_backward', d_x, d_weight)
    return d_x, d_weight
