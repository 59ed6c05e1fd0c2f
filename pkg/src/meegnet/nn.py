"""Layer primitives of the mEEGNet stack with hand-written backward passes.

Arrays follow the ``(batch, channel, electrode, time)`` layout throughout.
Every layer keeps what its backward pass needs from the most recent
``forward(..., cache=True)`` call; ``backward`` fills ``layer.grads`` with
arrays shaped like ``layer.params`` and returns the gradient w.r.t. the input.
"""
from __future__ import annotations

import numpy as np
import scipy.fft as sfft
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ConfigError, NumericError, ShapeError, StateError

# Kernels longer than this go through the FFT path.
DIRECT_MAX_KERNEL = 16


def same_padding(kernel_size: int) -> tuple[int, int]:
    """Left/right zero padding that keeps the time extent unchanged."""
    left = (kernel_size - 1) // 2
    return left, kernel_size - 1 - left


def _pad_time(x: np.ndarray, kernel_size: int) -> np.ndarray:
    left, right = same_padding(kernel_size)
    if left == right == 0:
        return x
    width = [(0, 0)] * (x.ndim - 1) + [(left, right)]
    return np.pad(x, width)


def _keep(training, cache):
    return training if cache is None else cache


def _check_ndim(x, ndim, what):
    if x.ndim != ndim:
        raise ShapeError(f"{what}: expected a {ndim}-axis array, got shape {x.shape}")


# ---------------------------------------------------------------------------
# temporal cross-correlation kernels (shared by conv and separable layers)
# ---------------------------------------------------------------------------

def _corr_mix_direct(xp, k, width):
    # xp (B, Cin, H, W+K-1), k (F, Cin, K) -> (B, F, H, W)
    windows = sliding_window_view(xp, k.shape[-1], axis=-1)
    return np.einsum("bchwk,fck->bfhw", windows, k, optimize=True)


def _corr_mix_fft(xp, k, width, n):
    xf = sfft.rfft(xp, n=n, axis=-1)
    kf = np.conj(sfft.rfft(k, n=n, axis=-1))
    if k.shape[1] == 1:
        yf = xf[:, None, 0] * kf[None, :, 0, None, :]
    else:
        yf = np.einsum("bchn,fcn->bfhn", xf, kf, optimize=True)
    return sfft.irfft(yf, n=n, axis=-1)[..., :width], xf


def _fft_len(width, ksize):
    return sfft.next_fast_len(width + ksize - 1, real=True)


def conv_temporal_forward(x: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Length-preserving cross-correlation along time.

    ``kernels`` has shape ``(F, Cin, 1, K)``; the result is ``(B, F, H, W)``.
    """
    _check_ndim(x, 4, "conv_temporal input")
    _check_ndim(kernels, 4, "conv_temporal kernels")
    if kernels.shape[1] != x.shape[1] or kernels.shape[2] != 1:
        raise ShapeError(
            f"conv_temporal: kernels {kernels.shape} do not fit input {x.shape} "
            f"(kernel channel extent must equal input channels and height must be 1)")
    ksize = kernels.shape[-1]
    k = kernels[:, :, 0, :]
    xp = _pad_time(x, ksize)
    if ksize <= DIRECT_MAX_KERNEL:
        return _corr_mix_direct(xp, k, x.shape[-1])
    y, _ = _corr_mix_fft(xp, k, x.shape[-1], _fft_len(x.shape[-1], ksize))
    return y


def depthwise_conv_forward(x: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Per-channel spatial filter spanning every electrode.

    ``kernels`` has shape ``(Cin, M, H, 1)``; output channel ``c*M + m`` only
    sees input channel ``c``.
    """
    _check_ndim(x, 4, "depthwise input")
    _check_ndim(kernels, 4, "depthwise kernels")
    b, c, h, w = x.shape
    if kernels.shape[0] != c or kernels.shape[2] != h or kernels.shape[3] != 1:
        raise ShapeError(
            f"depthwise: kernels {kernels.shape} do not fit input {x.shape} "
            f"(need ({c}, M, {h}, 1))")
    m = kernels.shape[1]
    y = np.einsum("bchw,cmh->bcmw", x, kernels[..., 0], optimize=True)
    return y.reshape(b, c * m, 1, w)


def _corr_grouped(xp, k, width):
    # xp (B, C, H, W+K-1), k (C, K): each channel filtered by its own kernel
    y = np.zeros(xp.shape[:-1] + (width,), dtype=np.result_type(xp, k))
    for tau in range(k.shape[-1]):
        y += k[None, :, None, tau, None] * xp[..., tau:tau + width]
    return y


def separable_conv_forward(x: np.ndarray, depth_kernels: np.ndarray,
                           point_weights: np.ndarray) -> np.ndarray:
    """Per-channel temporal filter followed by 1x1 channel mixing.

    ``depth_kernels`` ``(C, 1, 1, Kd)``, ``point_weights`` ``(F, C)``.
    """
    _check_separable(x, depth_kernels, point_weights)
    k = depth_kernels[:, 0, 0, :]
    w = x.shape[-1]
    mid = _corr_grouped(_pad_time(x, k.shape[-1]), k, w)
    return np.einsum("fc,bchw->bfhw", point_weights, mid, optimize=True)


def _check_separable(x, depth_kernels, point_weights):
    _check_ndim(x, 4, "separable input")
    b, c, h, w = x.shape
    if h != 1:
        raise ShapeError(f"separable: electrode axis must be collapsed to 1, got {x.shape}")
    if depth_kernels.shape[:3] != (c, 1, 1):
        raise ShapeError(f"separable: depth kernels {depth_kernels.shape} do not fit input {x.shape}")
    if point_weights.ndim != 2 or point_weights.shape[1] != c:
        raise ShapeError(
            f"separable: point weights {point_weights.shape} need input extent {c}")


def batch_norm(x, gamma, beta, moving_mean, moving_var, training=False, epsilon=1e-3,
               momentum=0.99):
    """Channel-wise batch normalisation over all non-channel axes.

    Returns ``(y, moving_mean, moving_var)``; the moving statistics are only
    changed in training mode.
    """
    axes = (0, 2, 3)
    shape = (1, -1, 1, 1)
    if training:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        moving_mean = momentum * moving_mean + (1.0 - momentum) * mean
        moving_var = momentum * moving_var + (1.0 - momentum) * var
    else:
        mean, var = moving_mean, moving_var
    inv = 1.0 / np.sqrt(var + epsilon)
    y = (x - mean.reshape(shape)) * (gamma * inv).reshape(shape) + beta.reshape(shape)
    return y, moving_mean, moving_var


def elu(x: np.ndarray) -> np.ndarray:
    # max(x, 0) + expm1(min(x, 0)) equals x where x >= 0 and exp(x) - 1 below zero
    return np.maximum(x, 0) + np.expm1(np.minimum(x, 0))


def average_pool(x: np.ndarray, pool_size: int) -> np.ndarray:
    """Non-overlapping mean pooling along time; the trailing remainder is dropped."""
    if pool_size < 1:
        raise ConfigError(f"pool size must be >= 1, got {pool_size}")
    w = x.shape[-1]
    n_out = w // pool_size
    if n_out == 0:
        raise ShapeError(f"average_pool: pool size {pool_size} exceeds time extent {w}")
    used = x[..., :n_out * pool_size]
    return used.reshape(x.shape[:-1] + (n_out, pool_size)).mean(axis=-1)


def _check_rate(rate):
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")


def dropout(x, rate, training=False, rng=None):
    """Inverted dropout; identity outside training."""
    _check_rate(rate)
    if not training or rate == 0.0:
        return x
    rng = np.random.default_rng(rng)
    keep = rng.random(x.shape) >= rate
    return x * keep / (1.0 - rate)


def sigmoid(z: np.ndarray) -> np.ndarray:
    # Clipped so that every finite logit maps strictly inside (0, 1).
    fi = np.finfo(z.dtype if np.issubdtype(z.dtype, np.floating) else np.float64)
    return np.clip(expit(z), fi.tiny, 1.0 - fi.epsneg)


def dense_sigmoid(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Fully connected layer with a sigmoid per output unit.

    ``x`` is ``(B, D)`` or a single ``D``-vector; ``weights`` is ``(D, U)``.
    """
    if x.shape[-1] != weights.shape[0]:
        raise ShapeError(f"dense: input length {x.shape[-1]} != weight rows {weights.shape[0]}")
    return sigmoid(x @ weights + bias)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Layer:
    """Base class. Subclasses set ``params``/``buffers`` in ``__init__``."""

    name = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.index = -1
        self._cache = None

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"

    def forward(self, x, training=False, cache=None):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def _cached(self):
        if self._cache is None:
            raise StateError(f"{self.name}: backward called before a caching forward pass")
        return self._cache

    def clear_cache(self):
        self._cache = None

    def astype(self, dtype):
        for d in (self.params, self.buffers):
            for key in d:
                d[key] = d[key].astype(dtype)
        return self


class ConvTemporal(Layer):
    """Conv2D with a ``(1, K)`` kernel, no bias, "same" padding."""

    name = "conv_temporal"

    def __init__(self, in_channels, filters, kernel_size, dtype=np.float64):
        super().__init__()
        if kernel_size < 1:
            raise ConfigError(f"temporal kernel size must be >= 1, got {kernel_size}")
        self.kernel_size = kernel_size
        self.params["kernels"] = np.zeros((filters, in_channels, 1, kernel_size), dtype)
        self.needs_input_grad = True

    def output_shape(self, in_shape):
        b, c, h, w = in_shape
        return (b, self.params["kernels"].shape[0], h, w)

    def forward(self, x, training=False, cache=None):
        kernels = self.params["kernels"]
        _check_ndim(x, 4, f"{self.name} input")
        if kernels.shape[1] != x.shape[1]:
            raise ShapeError(f"{self.name}: kernels {kernels.shape} vs input {x.shape}")
        ksize = self.kernel_size
        k = kernels[:, :, 0, :]
        xp = _pad_time(x, ksize)
        width = x.shape[-1]
        if ksize <= DIRECT_MAX_KERNEL:
            y = _corr_mix_direct(xp, k, width)
            state = ("direct", xp, None, None)
        else:
            n = _fft_len(width, ksize)
            y, xf = _corr_mix_fft(xp, k, width, n)
            state = ("fft", None, xf, n)
        if _keep(training, cache):
            self._cache = state + (x.shape,)
        return y

    def backward(self, grad_out):
        method, xp, xf, n, in_shape = self._cached()
        kernels = self.params["kernels"]
        k = kernels[:, :, 0, :]
        ksize = self.kernel_size
        width = in_shape[-1]
        left, _ = same_padding(ksize)
        grad_in = None
        if method == "direct":
            dk = np.empty_like(k)
            for tau in range(ksize):
                dk[:, :, tau] = np.tensordot(grad_out, xp[..., tau:tau + width],
                                             axes=([0, 2, 3], [0, 2, 3]))
            if self.needs_input_grad:
                gxp = np.zeros(xp.shape, dtype=grad_out.dtype)
                for tau in range(ksize):
                    gxp[..., tau:tau + width] += np.einsum("fc,bfhw->bchw", k[:, :, tau], grad_out)
                grad_in = gxp[..., left:left + width]
        else:
            gf = sfft.rfft(grad_out, n=n, axis=-1)
            if k.shape[1] == 1:
                s = np.einsum("bfhn,bhn->fn", np.conj(gf), xf[:, 0])[:, None, :]
            else:
                s = np.einsum("bfhn,bchn->fcn", np.conj(gf), xf, optimize=True)
            dk = sfft.irfft(s, n=n, axis=-1)[..., :ksize]
            if self.needs_input_grad:
                kf = sfft.rfft(k, n=n, axis=-1)
                gxf = np.einsum("bfhn,fcn->bchn", gf, kf, optimize=True)
                grad_in = sfft.irfft(gxf, n=n, axis=-1)[..., left:left + width]
        self.grads["kernels"] = dk[:, :, None, :].astype(kernels.dtype, copy=False)
        if grad_in is None:
            return None
        return np.ascontiguousarray(grad_in, dtype=grad_out.dtype)


class DepthwiseConv(Layer):
    name = "depthwise"

    def __init__(self, in_channels, depth_multiplier, electrodes, dtype=np.float64):
        super().__init__()
        if depth_multiplier < 1:
            raise ConfigError(f"depth multiplier must be >= 1, got {depth_multiplier}")
        self.params["kernels"] = np.zeros((in_channels, depth_multiplier, electrodes, 1), dtype)

    def output_shape(self, in_shape):
        b, c, h, w = in_shape
        return (b, c * self.params["kernels"].shape[1], 1, w)

    def forward(self, x, training=False, cache=None):
        y = depthwise_conv_forward(x, self.params["kernels"])
        if _keep(training, cache):
            self._cache = x
        return y

    def backward(self, grad_out):
        x = self._cached()
        kernels = self.params["kernels"]
        c, m = kernels.shape[:2]
        b, _, _, w = grad_out.shape
        g = grad_out.reshape(b, c, m, w)
        self.grads["kernels"] = np.einsum("bcmw,bchw->cmh", g, x, optimize=True)[..., None]
        return np.einsum("cmh,bcmw->bchw", kernels[..., 0], g, optimize=True)


class SeparableConv(Layer):
    name = "separable"

    def __init__(self, in_channels, filters, kernel_size, dtype=np.float64):
        super().__init__()
        self.kernel_size = kernel_size
        self.params["depth_kernels"] = np.zeros((in_channels, 1, 1, kernel_size), dtype)
        self.params["point_weights"] = np.zeros((filters, in_channels), dtype)

    def output_shape(self, in_shape):
        b, c, h, w = in_shape
        return (b, self.params["point_weights"].shape[0], h, w)

    def forward(self, x, training=False, cache=None):
        dk = self.params["depth_kernels"]
        pw = self.params["point_weights"]
        _check_separable(x, dk, pw)
        k = dk[:, 0, 0, :]
        w = x.shape[-1]
        xp = _pad_time(x, self.kernel_size)
        mid = _corr_grouped(xp, k, w)
        y = np.einsum("fc,bchw->bfhw", pw, mid, optimize=True)
        if _keep(training, cache):
            self._cache = (xp, mid, w)
        return y

    def backward(self, grad_out):
        xp, mid, w = self._cached()
        k = self.params["depth_kernels"][:, 0, 0, :]
        pw = self.params["point_weights"]
        self.grads["point_weights"] = np.einsum("bfhw,bchw->fc", grad_out, mid, optimize=True)
        gmid = np.einsum("fc,bfhw->bchw", pw, grad_out, optimize=True)
        dk = np.empty_like(k)
        gxp = np.zeros(xp.shape, dtype=grad_out.dtype)
        for tau in range(self.kernel_size):
            window = xp[..., tau:tau + w]
            dk[:, tau] = np.einsum("bchw,bchw->c", gmid, window)
            gxp[..., tau:tau + w] += k[None, :, None, tau, None] * gmid
        self.grads["depth_kernels"] = dk[:, None, None, :]
        left, _ = same_padding(self.kernel_size)
        return np.ascontiguousarray(gxp[..., left:left + w])


class BatchNorm(Layer):
    name = "batch_norm"

    def __init__(self, channels, epsilon=1e-3, momentum=0.99, dtype=np.float64):
        super().__init__()
        if epsilon <= 0:
            raise ConfigError(f"batch-norm epsilon must be positive, got {epsilon}")
        if not 0.0 < momentum < 1.0:
            raise ConfigError(f"batch-norm momentum must be in (0, 1), got {momentum}")
        self.epsilon = epsilon
        self.momentum = momentum
        self.update_stats = True
        self.params["gamma"] = np.ones(channels, dtype)
        self.params["beta"] = np.zeros(channels, dtype)
        self.buffers["moving_mean"] = np.zeros(channels, dtype)
        self.buffers["moving_var"] = np.ones(channels, dtype)

    def forward(self, x, training=False, cache=None):
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite input to layer {self.index} ({self.name})")
        gamma, beta = self.params["gamma"], self.params["beta"]
        axes = (0, 2, 3)
        shape = (1, -1, 1, 1)
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            if self.update_stats:
                mom = self.momentum
                self.buffers["moving_mean"] = mom * self.buffers["moving_mean"] + (1 - mom) * mean
                self.buffers["moving_var"] = mom * self.buffers["moving_var"] + (1 - mom) * var
        else:
            mean, var = self.buffers["moving_mean"], self.buffers["moving_var"]
        inv_std = (1.0 / np.sqrt(var + self.epsilon)).astype(x.dtype, copy=False)
        xhat = (x - mean.reshape(shape).astype(x.dtype, copy=False)) * inv_std.reshape(shape)
        y = xhat * gamma.reshape(shape) + beta.reshape(shape)
        if _keep(training, cache):
            self._cache = (xhat, inv_std, training)
        return y

    def backward(self, grad_out):
        xhat, inv_std, training = self._cached()
        gamma = self.params["gamma"]
        axes = (0, 2, 3)
        shape = (1, -1, 1, 1)
        dgamma = np.sum(grad_out * xhat, axis=axes)
        dbeta = np.sum(grad_out, axis=axes)
        self.grads["gamma"] = dgamma
        self.grads["beta"] = dbeta
        scale = (gamma * inv_std).reshape(shape)
        if not training:
            return grad_out * scale
        count = grad_out.size // grad_out.shape[1]
        return scale * (grad_out - (dbeta / count).reshape(shape)
                        - xhat * (dgamma / count).reshape(shape))


class ELU(Layer):
    name = "elu"

    def forward(self, x, training=False, cache=None):
        y = np.expm1(np.minimum(x, 0))
        if _keep(training, cache):
            # derivative: 1 for x >= 0, exp(x) below
            self._cache = y + 1
        y += np.maximum(x, 0)
        return y

    def backward(self, grad_out):
        return grad_out * self._cached()


class AveragePool(Layer):
    name = "average_pool"

    def __init__(self, pool_size):
        super().__init__()
        if pool_size < 1:
            raise ConfigError(f"pool size must be >= 1, got {pool_size}")
        self.pool_size = pool_size

    def output_shape(self, in_shape):
        *lead, w = in_shape
        if w // self.pool_size == 0:
            raise ShapeError(f"{self.name}: pool size {self.pool_size} exceeds time extent {w}")
        return tuple(lead) + (w // self.pool_size,)

    def forward(self, x, training=False, cache=None):
        y = average_pool(x, self.pool_size)
        if _keep(training, cache):
            self._cache = x.shape
        return y

    def backward(self, grad_out):
        in_shape = self._cached()
        p = self.pool_size
        grad_in = np.zeros(in_shape, dtype=grad_out.dtype)
        n = grad_out.shape[-1] * p
        grad_in[..., :n] = np.repeat(grad_out / p, p, axis=-1)
        return grad_in


class Dropout(Layer):
    """Inverted dropout.

    Setting ``freeze = True`` re-uses the last mask instead of drawing a new
    one, which makes repeated forward passes comparable (gradient checks).
    """

    name = "dropout"

    def __init__(self, rate, seed=None):
        super().__init__()
        _check_rate(rate)
        self.rate = rate
        self.rng = np.random.default_rng(seed)
        self.freeze = False
        self._mask = None

    def reseed(self, seed):
        self.rng = np.random.default_rng(seed)
        self._mask = None

    def forward(self, x, training=False, cache=None):
        if not training or self.rate == 0.0:
            if _keep(training, cache):
                self._cache = None, x.dtype
            return x
        if not (self.freeze and self._mask is not None and self._mask.shape == x.shape):
            keep = self.rng.random(x.shape) >= self.rate
            self._mask = (keep / (1.0 - self.rate)).astype(x.dtype)
        if _keep(training, cache):
            self._cache = self._mask, x.dtype
        return x * self._mask

    def backward(self, grad_out):
        mask, _ = self._cached()
        return grad_out if mask is None else grad_out * mask


class Dense(Layer):
    """Flattens ``(B, C, H, W)`` channel-major and applies ``x @ W + b``."""

    name = "dense"

    def __init__(self, in_features, units, dtype=np.float64):
        super().__init__()
        self.params["weights"] = np.zeros((in_features, units), dtype)
        self.params["bias"] = np.zeros(units, dtype)

    def output_shape(self, in_shape):
        return (in_shape[0], self.params["weights"].shape[1])

    def forward(self, x, training=False, cache=None):
        flat = x.reshape(x.shape[0], -1)
        weights = self.params["weights"]
        if flat.shape[1] != weights.shape[0]:
            raise ShapeError(
                f"{self.name}: flattened input length {flat.shape[1]} != {weights.shape[0]}")
        y = flat @ weights + self.params["bias"]
        if _keep(training, cache):
            self._cache = (flat, x.shape)
        return y

    def backward(self, grad_out):
        flat, in_shape = self._cached()
        self.grads["weights"] = flat.T @ grad_out
        self.grads["bias"] = grad_out.sum(axis=0)
        return (grad_out @ self.params["weights"].T).reshape(in_shape)


class Sigmoid(Layer):
    name = "sigmoid"

    def forward(self, x, training=False, cache=None):
        y = sigmoid(x)
        if _keep(training, cache):
            self._cache = y
        return y

    def backward(self, grad_out):
        y = self._cached()
        return grad_out * y * (1.0 - y)
