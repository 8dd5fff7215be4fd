"""Rank-4 tensor kernels with hand-written backward passes.

Tensors are numpy arrays laid out as (batch, channel, height, width) in C
order. Every kernel preserves the floating dtype of its input, so the same
code runs in float32 for training and float64 or long double for gradient
checking.

Work that touches the batch axis is evaluated one batch item at a time and
reduced in batch-index order. ``set_num_threads`` only changes how many items
run concurrently, so results are bitwise identical for any worker count.
"""
from __future__ import annotations

import functools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DimensionError

IGNORE = 255

_num_threads = 1
_pool: ThreadPoolExecutor | None = None


def set_num_threads(n: int) -> None:
    """Bound the number of batch items processed concurrently."""
    global _num_threads, _pool
    n = max(1, int(n))
    if n != _num_threads and _pool is not None:
        _pool.shutdown(wait=True)
        _pool = None
    _num_threads = n


def get_num_threads() -> int:
    return _num_threads


def _map_items(fn, n):
    if _num_threads <= 1 or n <= 1:
        return [fn(i) for i in range(n)]
    global _pool
    if _pool is None:
        _pool = ThreadPoolExecutor(max_workers=_num_threads)
    return list(_pool.map(fn, range(n)))


def _check4(x, name="input"):
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise DimensionError(f"{name} must be a rank-4 array, got shape {getattr(x, 'shape', None)}")
    if min(x.shape) < 1:
        raise DimensionError(f"{name} has an empty dimension: {x.shape}")


# ---------------------------------------------------------------- convolution

def _im2col(xi):
    """(cin, h, w) -> (cin*9, h*w) patch matrix with zero padding 1."""
    cin, h, w = xi.shape
    xp = np.zeros((cin, h + 2, w + 2), dtype=xi.dtype)
    xp[:, 1:-1, 1:-1] = xi
    cols = np.empty((cin, 3, 3, h, w), dtype=xi.dtype)
    for dy in range(3):
        for dx in range(3):
            cols[:, dy, dx] = xp[:, dy:dy + h, dx:dx + w]
    return cols.reshape(cin * 9, h * w)


def conv3x3(x, weight, bias):
    """3x3 convolution, stride 1, zero padding 1 (same spatial size)."""
    _check4(x)
    _check4(weight, "weight")
    cout, cin = weight.shape[:2]
    if weight.shape[2:] != (3, 3):
        raise DimensionError(f"weight must be [cout, cin, 3, 3], got {weight.shape}")
    if x.shape[1] != cin:
        raise DimensionError(f"input has {x.shape[1]} channels, weight expects {cin}")
    bias = np.asarray(bias)
    if bias.shape != (cout,):
        raise DimensionError(f"bias must have shape ({cout},), got {bias.shape}")
    for arr, name in ((x, "input"), (weight, "weight"), (bias, "bias")):
        if not np.isfinite(arr).all():
            raise DataError(f"conv3x3 {name} contains non-finite values")

    n, _, h, w = x.shape
    w2 = weight.reshape(cout, cin * 9)
    b = bias[:, None]

    def one(i):
        return (w2 @ _im2col(x[i]) + b).reshape(cout, h, w)

    return np.stack(_map_items(one, n))


def conv3x3_backward(x, weight, grad_out):
    """Returns (grad_input, grad_weight, grad_bias) for ``conv3x3``."""
    _check4(x)
    _check4(grad_out, "grad_out")
    cout, cin = weight.shape[:2]
    n, _, h, w = x.shape
    if x.shape[1] != cin or grad_out.shape != (n, cout, h, w):
        raise DimensionError(
            f"conv3x3_backward shapes disagree: input {x.shape}, weight {weight.shape}, "
            f"grad_out {grad_out.shape}")

    # input gradient is a convolution with the spatially flipped, transposed kernel
    flipped = np.ascontiguousarray(weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    grad_input = conv3x3(grad_out, flipped, np.zeros(cin, dtype=weight.dtype))

    def one(i):
        return grad_out[i].reshape(cout, h * w) @ _im2col(x[i]).T

    partial = _map_items(one, n)
    gw = partial[0].copy()
    for p in partial[1:]:
        gw += p
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    return grad_input, gw.reshape(weight.shape), grad_bias


# ---------------------------------------------------------------- max pooling

@dataclass
class PoolIndices:
    """Argmax position (0..3, row-major inside the 2x2 window) per pooled cell."""
    argmax: np.ndarray
    input_shape: tuple


def _windows(x):
    n, c, h, w = x.shape
    return (x.reshape(n, c, h // 2, 2, w // 2, 2)
             .transpose(0, 1, 2, 4, 3, 5)
             .reshape(n, c, h // 2, w // 2, 4))


def maxpool2x2(x):
    _check4(x)
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise DimensionError(f"maxpool2x2 needs even spatial dims, got {x.shape[2:]}")
    win = _windows(x)
    arg = win.argmax(axis=-1)  # first maximum wins ties
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, PoolIndices(arg.astype(np.uint8), x.shape)


def maxpool2x2_backward(idx: PoolIndices, grad_out):
    _check4(grad_out, "grad_out")
    if grad_out.shape != idx.argmax.shape:
        raise DimensionError(
            f"grad_out {grad_out.shape} does not match pooled shape {idx.argmax.shape}")
    n, c, h, w = idx.input_shape
    win = np.zeros(grad_out.shape + (4,), dtype=grad_out.dtype)
    np.put_along_axis(win, idx.argmax[..., None].astype(np.intp), grad_out[..., None], axis=-1)
    return (win.reshape(n, c, h // 2, w // 2, 2, 2)
               .transpose(0, 1, 2, 4, 3, 5)
               .reshape(n, c, h, w))


# ---------------------------------------------------------------- relu

def relu(x):
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(x, grad_out):
    if x.shape != grad_out.shape:
        raise DimensionError(f"relu_backward shapes differ: {x.shape} vs {grad_out.shape}")
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


# ---------------------------------------------------------------- batch norm

@dataclass
class BnState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels, dtype=np.float32, momentum=0.9, eps=1e-5):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype),
                   momentum, eps)

    def copy(self):
        return BnState(self.running_mean.copy(), self.running_var.copy(),
                       self.momentum, self.eps)


@dataclass
class BnCache:
    xhat: np.ndarray
    inv_std: np.ndarray


def batchnorm(x, gamma, beta, state: BnState, mode="train"):
    """Per-channel batch normalization.

    Train mode normalizes with the batch mean and biased variance over
    (n, h, w) and folds them into ``state`` with its momentum. Infer mode
    uses the running statistics and returns no cache.

    Returns ``(out, cache)``; ``cache`` feeds ``batchnorm_backward``.
    """
    _check4(x)
    c = x.shape[1]
    if np.shape(gamma) != (c,) or np.shape(beta) != (c,):
        raise DimensionError(f"gamma/beta must have length {c}")
    g = gamma.reshape(1, c, 1, 1)
    b = beta.reshape(1, c, 1, 1)
    if mode == "infer":
        mean = state.running_mean.astype(x.dtype).reshape(1, c, 1, 1)
        inv_std = (1.0 / np.sqrt(state.running_var.astype(x.dtype) + x.dtype.type(state.eps)))
        return g * ((x - mean) * inv_std.reshape(1, c, 1, 1)) + b, None
    if mode != "train":
        raise ValueError(f"unknown batchnorm mode {mode!r}")

    mean = x.mean(axis=(0, 2, 3))
    centered = x - mean.reshape(1, c, 1, 1)
    var = (centered * centered).mean(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(state.eps))
    xhat = centered * inv_std.reshape(1, c, 1, 1)

    m = state.momentum
    rd = state.running_mean.dtype
    state.running_mean = (m * state.running_mean + (1 - m) * mean).astype(rd)
    state.running_var = (m * state.running_var + (1 - m) * var).astype(rd)
    return g * xhat + b, BnCache(xhat, inv_std)


def batchnorm_backward(x, gamma, cache: BnCache, grad_out):
    """Returns (grad_input, grad_gamma, grad_beta) through batch statistics."""
    if cache is None:
        raise DimensionError("batchnorm_backward needs a train-mode cache")
    if grad_out.shape != x.shape or cache.xhat.shape != x.shape:
        raise DimensionError(f"batchnorm_backward shapes disagree: {x.shape}, {grad_out.shape}")
    n, c, h, w = x.shape
    count = n * h * w
    axes = (0, 2, 3)
    xhat = cache.xhat
    grad_beta = grad_out.sum(axis=axes)
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    dxhat = grad_out * gamma.reshape(1, c, 1, 1)
    s1 = dxhat.sum(axis=axes).reshape(1, c, 1, 1)
    s2 = (dxhat * xhat).sum(axis=axes).reshape(1, c, 1, 1)
    scale = (cache.inv_std / count).reshape(1, c, 1, 1)
    grad_input = scale * (count * dxhat - s1 - xhat * s2)
    return grad_input.astype(x.dtype, copy=False), grad_gamma, grad_beta


# ---------------------------------------------------------------- bilinear 2x

@functools.lru_cache(maxsize=None)
def _lerp_taps(size):
    """Source taps for doubling an axis of ``size`` with half-pixel centers."""
    dst = np.arange(2 * size, dtype=np.float64)
    src = np.clip((dst + 0.5) / 2 - 0.5, 0, size - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, size - 1)
    return lo, hi, src - lo


@functools.lru_cache(maxsize=None)
def _lerp_matrix(size, dtype):
    lo, hi, frac = _lerp_taps(size)
    a = np.zeros((2 * size, size), dtype=dtype)
    rows = np.arange(2 * size)
    np.add.at(a, (rows, lo), 1 - frac)
    np.add.at(a, (rows, hi), frac)
    return a


def _lerp_axis(x, axis):
    lo, hi, frac = _lerp_taps(x.shape[axis])
    a = np.take(x, lo, axis=axis)
    b = np.take(x, hi, axis=axis)
    shape = [1] * x.ndim
    shape[axis] = -1
    f = frac.astype(x.dtype).reshape(shape)
    # lo + f*(hi - lo) keeps constant fields exact
    return a + f * (b - a)


def upsample_bilinear2x(x):
    _check4(x)
    return _lerp_axis(_lerp_axis(x, 3), 2)


def upsample_bilinear2x_backward(grad_out):
    """Exact transpose of ``upsample_bilinear2x``."""
    _check4(grad_out, "grad_out")
    n, c, h2, w2 = grad_out.shape
    if h2 % 2 or w2 % 2:
        raise DimensionError(f"upsample grad must have even spatial dims, got {(h2, w2)}")
    ah = _lerp_matrix(h2 // 2, grad_out.dtype.str)
    aw = _lerp_matrix(w2 // 2, grad_out.dtype.str)
    g = grad_out @ aw                       # (n, c, 2h, w)
    return np.swapaxes(np.swapaxes(g, 2, 3) @ ah, 2, 3)


# ---------------------------------------------------------------- concat

def concat_channels(a, b):
    _check4(a, "a")
    _check4(b, "b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(f"cannot concat {a.shape} and {b.shape}: batch/spatial dims differ")
    return np.concatenate([a, b], axis=1)


def split_backward(grad_out, c_a):
    return grad_out[:, :c_a], grad_out[:, c_a:]


# ---------------------------------------------------------------- softmax + loss

def softmax_channels(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_channels_backward(probs, grad_out):
    """Vector-Jacobian product of the channel softmax."""
    return probs * (grad_out - (grad_out * probs).sum(axis=1, keepdims=True))


def weighted_cross_entropy(probs, target, class_weights, ignore=IGNORE):
    """Class-weighted cross entropy averaged over non-ignored pixels.

    ``target`` is an integer (n, h, w) label batch. Returns the loss as a
    scalar of at least float64 precision and its gradient with respect to the pre-softmax logits.
    """
    _check4(probs, "probs")
    n, c, h, w = probs.shape
    target = np.asarray(target)
    if target.shape != (n, h, w):
        raise DimensionError(f"target shape {target.shape} does not match probs {(n, h, w)}")
    acc = np.promote_types(probs.dtype, np.float64)
    weights = np.asarray(class_weights, dtype=acc)
    if weights.shape != (c,):
        raise DimensionError(f"expected {c} class weights, got {weights.shape}")

    t = target.astype(np.int64)
    valid = t != ignore
    bad = valid & ((t < 0) | (t >= c))
    if bad.any():
        raise DataError(f"label {int(t[bad][0])} out of range for {c} classes")

    grad = np.zeros_like(probs)
    count = int(valid.sum())
    if count == 0:
        return acc.type(0), grad

    ts = np.where(valid, t, 0)
    p_true = np.take_along_axis(probs, ts[:, None], axis=1)[:, 0].astype(acc)
    p_true = np.maximum(p_true, np.finfo(probs.dtype).tiny)
    pw = np.where(valid, weights[ts], 0)
    loss = np.sum(pw * -np.log(p_true)) / count

    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, ts[:, None], 1, axis=1)
    scale = (pw / count).astype(probs.dtype)[:, None]
    grad = scale * (probs - onehot)
    return loss, grad
