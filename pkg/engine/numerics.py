"""
Deterministic tensor kernels for the frozen backbone.

Every layer has a forward that returns (output, cache) and a backward that
consumes that cache. Kernels preserve the input dtype; the rest of the engine
feeds them float32 arrays, the gradient checks feed them float64.
"""
from dataclasses import dataclass, replace
from enum import Enum
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import ndtr

from engine.errors import InvalidArgumentError, CorruptedBankError, FrozenBankError

# Tensor is a plain row-major ndarray
Tensor = np.ndarray
DTYPE = np.float32

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Mode(str, Enum):
    TRAIN = 'train'
    EVAL = 'eval'


def as_mode(mode) -> Mode:
    try:
        return Mode(mode)
    except ValueError:
        raise InvalidArgumentError(f'unknown mode {mode!r}, expected "train" or "eval"') from None


# ---------------------------------------------------------------------------
# caches
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvCache:
    input_shape: tuple
    filter_shape: tuple
    output_shape: tuple
    stride: int
    pads: tuple  # (top, bottom, left, right)


@dataclass(frozen=True)
class NormCache:
    mode: Mode
    x_hat: Tensor | None
    inv_std: Tensor | None
    gamma: Tensor | None


@dataclass(frozen=True)
class ReluCache:
    mask: Tensor


@dataclass(frozen=True)
class MaxPoolCache:
    input_shape: tuple
    argmax: Tensor


@dataclass(frozen=True)
class AvgPoolCache:
    input_shape: tuple


@dataclass(frozen=True)
class LinearCache:
    x: Tensor
    weights: Tensor


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _same_padding(size: int, k: int, stride: int) -> tuple[int, int, int]:
    out = math.ceil(size / stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def conv2d_forward(x: Tensor, filters: Tensor, stride: int = 1) -> tuple[Tensor, ConvCache]:
    """Same-padded cross-correlation of x[N,C,H,W] with filters[C',C,k,k]"""
    if x.ndim != 4 or filters.ndim != 4:
        raise InvalidArgumentError(f'conv2d expects 4-d input and filters, got {x.shape} and {filters.shape}')
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = filters.shape
    if c_in != c or kh != kw:
        raise InvalidArgumentError(f'filters {filters.shape} do not fit input {x.shape}')
    if stride < 1 or kh > h or kw > w:
        raise InvalidArgumentError(f'invalid kernel {kh} / stride {stride} for {h}x{w} input')

    h_out, top, bottom = _same_padding(h, kh, stride)
    w_out, left, right = _same_padding(w, kw, stride)
    padded = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))

    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :h_out, :w_out]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, h_out * w_out, c * kh * kw)
    kernel = filters.reshape(c_out, c * kh * kw)

    # one product per image keeps each image's result independent of the batch
    out = np.empty((n, c_out, h_out * w_out), dtype=np.result_type(x, filters))
    for i in range(n):
        out[i] = kernel @ cols[i].T

    cache = ConvCache(
        input_shape=x.shape,
        filter_shape=filters.shape,
        output_shape=(n, c_out, h_out, w_out),
        stride=stride,
        pads=(top, bottom, left, right),
    )
    return out.reshape(n, c_out, h_out, w_out), cache


def conv2d_backward_input(grad_out: Tensor, filters: Tensor, cache: ConvCache) -> Tensor:
    """Gradient w.r.t. the conv input; filters are frozen so theirs is never formed"""
    if not isinstance(cache, ConvCache):
        raise InvalidArgumentError('conv2d_backward_input needs a ConvCache')
    if tuple(grad_out.shape) != cache.output_shape or tuple(filters.shape) != cache.filter_shape:
        raise InvalidArgumentError(
            f'grad {grad_out.shape} / filters {filters.shape} do not match the forward pass'
        )
    n, c, h, w = cache.input_shape
    c_out, _, k, _ = cache.filter_shape
    _, _, h_out, w_out = cache.output_shape
    top, bottom, left, right = cache.pads
    s = cache.stride

    kernel = filters.reshape(c_out, c * k * k)
    grad_flat = grad_out.reshape(n, c_out, h_out * w_out)
    grad_cols = np.empty((n, h_out * w_out, c * k * k), dtype=np.result_type(grad_out, filters))
    for i in range(n):
        grad_cols[i] = grad_flat[i].T @ kernel
    grad_cols = grad_cols.reshape(n, h_out, w_out, c, k, k).transpose(0, 3, 1, 2, 4, 5)

    grad_padded = np.zeros((n, c, h + top + bottom, w + left + right), dtype=grad_cols.dtype)
    for di in range(k):
        for dj in range(k):
            grad_padded[:, :, di:di + s * (h_out - 1) + 1:s, dj:dj + s * (w_out - 1) + 1:s] += grad_cols[..., di, dj]
    return grad_padded[:, :, top:top + h, left:left + w]


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

@dataclass
class NormSite:
    """One BN site: running mean/variance plus the trainable scale and shift"""
    mean: Tensor
    var: Tensor
    gamma: Tensor
    beta: Tensor
    frozen: bool = False

    @classmethod
    def identity(cls, channels: int, dtype=DTYPE) -> 'NormSite':
        return cls(
            mean=np.zeros(channels, dtype=dtype),
            var=np.ones(channels, dtype=dtype),
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
        )

    @property
    def channels(self) -> int:
        return self.mean.shape[0]

    def arrays(self) -> dict[str, Tensor]:
        return {'mean': self.mean, 'var': self.var, 'gamma': self.gamma, 'beta': self.beta}

    def freeze(self):
        for array in self.arrays().values():
            array.setflags(write=False)
        self.frozen = True

    def copy(self, dtype=None) -> 'NormSite':
        cast = (lambda a: np.array(a, dtype=dtype or a.dtype, copy=True))
        return NormSite(cast(self.mean), cast(self.var), cast(self.gamma), cast(self.beta))


def batchnorm_forward(x: Tensor, site: NormSite, mode=Mode.EVAL,
                      momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> tuple[Tensor, NormCache]:
    mode = as_mode(mode)
    if x.ndim != 4 or x.shape[1] != site.channels:
        raise InvalidArgumentError(f'input {x.shape} does not match a {site.channels}-channel site')
    shape = (1, -1, 1, 1)

    if mode is Mode.EVAL:
        denom = site.var + eps
        if not np.all(np.isfinite(site.var)) or np.any(denom <= 0):
            raise CorruptedBankError('stored variance must be finite and positive')
        out = site.gamma.reshape(shape) * ((x - site.mean.reshape(shape)) / np.sqrt(denom).reshape(shape)) \
            + site.beta.reshape(shape)
        return out, NormCache(mode, None, None, None)

    if site.frozen:
        raise FrozenBankError('train-mode normalization on a frozen bank')
    n, _, h, w = x.shape
    count = n * h * w
    if count < 2:
        raise InvalidArgumentError('train-mode normalization needs at least two values per channel')

    batch_mean = x.mean(axis=(0, 2, 3))
    centered = x - batch_mean.reshape(shape)
    batch_var = (centered ** 2).mean(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(batch_var + eps)
    x_hat = centered * inv_std.reshape(shape)
    out = site.gamma.reshape(shape) * x_hat + site.beta.reshape(shape)

    # running statistics: exponential moving average, unbiased variance
    site.mean[...] = (1.0 - momentum) * site.mean + momentum * batch_mean
    site.var[...] = (1.0 - momentum) * site.var + momentum * batch_var * (count / (count - 1))
    return out, NormCache(mode, x_hat, inv_std, site.gamma.copy())


def batchnorm_backward(grad_out: Tensor, cache: NormCache) -> tuple[Tensor, Tensor, Tensor]:
    """Returns (grad_input, grad_gamma, grad_beta) of the train-mode normalization"""
    if not isinstance(cache, NormCache) or cache.mode is not Mode.TRAIN:
        raise InvalidArgumentError('batchnorm_backward needs a train-mode cache')
    if grad_out.shape != cache.x_hat.shape:
        raise InvalidArgumentError(f'grad {grad_out.shape} does not match the forward pass {cache.x_hat.shape}')
    shape = (1, -1, 1, 1)
    n, _, h, w = grad_out.shape
    count = n * h * w

    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * cache.x_hat).sum(axis=(0, 2, 3))

    grad_x_hat = grad_out * cache.gamma.reshape(shape)
    sum_g = grad_x_hat.sum(axis=(0, 2, 3)).reshape(shape)
    sum_gx = (grad_x_hat * cache.x_hat).sum(axis=(0, 2, 3)).reshape(shape)
    grad_input = (cache.inv_std.reshape(shape) / count) * (count * grad_x_hat - sum_g - cache.x_hat * sum_gx)
    return grad_input, grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# activations and pooling
# ---------------------------------------------------------------------------

def relu_forward(x: Tensor) -> tuple[Tensor, ReluCache]:
    mask = x > 0
    return np.where(mask, x, np.zeros_like(x)), ReluCache(mask)


def relu_backward(grad_out: Tensor, cache: ReluCache) -> Tensor:
    if grad_out.shape != cache.mask.shape:
        raise InvalidArgumentError(f'grad {grad_out.shape} does not match the forward pass')
    return np.where(cache.mask, grad_out, np.zeros_like(grad_out))


def maxpool2x2_forward(x: Tensor) -> tuple[Tensor, MaxPoolCache]:
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise InvalidArgumentError(f'2x2 max pooling needs even spatial sides, got {x.shape}')
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    # argmax returns the first maximum, i.e. row-major tie-breaking
    argmax = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0]
    return out, MaxPoolCache(x.shape, argmax)


def maxpool2x2_backward(grad_out: Tensor, cache: MaxPoolCache) -> Tensor:
    n, c, h, w = cache.input_shape
    if grad_out.shape != (n, c, h // 2, w // 2):
        raise InvalidArgumentError(f'grad {grad_out.shape} does not match the forward pass')
    blocks = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad_out.dtype)
    np.put_along_axis(blocks, cache.argmax[..., None], grad_out[..., None], axis=-1)
    return blocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


def global_avg_pool_forward(x: Tensor) -> tuple[Tensor, AvgPoolCache]:
    if x.ndim != 4:
        raise InvalidArgumentError(f'global pooling expects a 4-d input, got {x.shape}')
    n, c, h, w = x.shape
    return x.reshape(n, c, h * w).mean(axis=-1), AvgPoolCache(x.shape)


def global_avg_pool_backward(grad_out: Tensor, cache: AvgPoolCache) -> Tensor:
    n, c, h, w = cache.input_shape
    if grad_out.shape != (n, c):
        raise InvalidArgumentError(f'grad {grad_out.shape} does not match the forward pass')
    return np.broadcast_to(grad_out[:, :, None, None] / (h * w), (n, c, h, w)).copy()


def linear_forward(x: Tensor, weights: Tensor, bias: Tensor) -> tuple[Tensor, LinearCache]:
    """x[N,in] · weights[out,in]ᵀ + bias[out]"""
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[1] or bias.shape != (weights.shape[0],):
        raise InvalidArgumentError(f'linear shapes do not fit: x {x.shape}, W {weights.shape}, b {bias.shape}')
    # row-wise reduction, no BLAS: a row's result never depends on its neighbours
    out = (x[:, None, :] * weights[None, :, :]).sum(axis=-1) + bias
    return out, LinearCache(x, weights)


def linear_backward(grad_out: Tensor, cache: LinearCache) -> tuple[Tensor, Tensor, Tensor]:
    """Returns (grad_weights, grad_bias, grad_input)"""
    if grad_out.shape != (cache.x.shape[0], cache.weights.shape[0]):
        raise InvalidArgumentError(f'grad {grad_out.shape} does not match the forward pass')
    grad_weights = grad_out.T @ cache.x
    grad_bias = grad_out.sum(axis=0)
    grad_input = grad_out @ cache.weights
    return grad_weights, grad_bias, grad_input


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    m: Tensor
    v: Tensor
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: Tensor, **hyper) -> 'AdamState':
        return cls(m=np.zeros_like(param), v=np.zeros_like(param), **hyper)


def adam_step(params: Tensor, grads: Tensor, state: AdamState) -> tuple[Tensor, AdamState]:
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise InvalidArgumentError(f'adam shapes differ: params {params.shape}, grads {grads.shape}')
    if state.lr <= 0:
        raise InvalidArgumentError('learning rate must be positive')
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grads
    v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    updated = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return updated.astype(params.dtype, copy=False), replace(state, m=m, v=v, t=t)


def normal_cdf(v):
    """Standard normal CDF Φ"""
    return ndtr(v)
