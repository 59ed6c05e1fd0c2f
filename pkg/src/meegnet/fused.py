"""Fused temporal conv -> batch norm -> depthwise front end.

The first three layers are linear in the conv output apart from the batch-norm
statistics, so the depthwise spatial mix can be applied before the temporal
filter:

    z[b, f, m] = a_f * corr(sum_h w[f, m, h] * x[b, h], k_f) + c_f * sum_h w[f, m, h]

with ``a_f = gamma_f / sqrt(var_f + eps)`` and ``c_f = beta_f - a_f * mean_f``.
The batch mean and variance of the conv output are obtained from the kernels
and the Gram matrix of the padded input windows (``mean_f = k_f . s / N``,
``E[y^2]_f = k_f^T G k_f / N``), so the ``(B, F, H, W)`` conv activation is never
formed. Results equal the layered computation up to rounding; the layered
layers stay the reference used by the gradient checks.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
import scipy.fft as sfft

from .errors import NumericError
from .nn import _fft_len, same_padding


@lru_cache(maxsize=8)
def _skew_index(k):
    """Index pairs (i, d) with i + d < k, for walking the diagonals of a k x k matrix."""
    i, d = np.nonzero(np.add.outer(np.arange(k), np.arange(k)) < k)
    return i, d


def padded_gram(xp, width, ksize, xf=None, n=None):
    """``G[t1, t2] = sum_rows sum_{t<width} xp[t + t1] * xp[t + t2]`` for a zero-padded batch.

    ``xp`` is ``(rows, width + ksize - 1)`` with the original signal starting at
    ``same_padding(ksize)[0]``. The first row of ``G`` comes from the
    autocorrelation (via ``xf`` if given); the remaining rows follow from the
    sliding-window recurrence ``G[i+1, j+1] = G[i, j] + xp[i+W] xp[j+W] - xp[i] xp[j]``.
    """
    k = ksize
    if n is None:
        n = _fft_len(width, k)
    if xf is None:
        xf = sfft.rfft(xp, n=n, axis=-1)
    power = (xf.real ** 2 + xf.imag ** 2).sum(axis=0)
    auto = sfft.irfft(power, n=n)[:k]
    if k == 1:
        return auto.reshape(1, 1)
    tail = xp[:, width:]
    m_end = tail.T @ tail
    i, d = _skew_index(k)
    tail_sum = np.zeros(k, dtype=auto.dtype)
    inside = i + d < k - 1
    np.add.at(tail_sum, d[inside], m_end[i[inside], (i + d)[inside]])
    first = auto - tail_sum
    head = xp[:, :k]
    m_start = head.T @ head
    m_end_full = np.zeros((k, k), dtype=m_start.dtype)
    m_end_full[:k - 1, :k - 1] = m_end
    diff = m_end_full - m_start
    skew = np.zeros((k, k), dtype=diff.dtype)
    skew[i, d] = diff[i, i + d]
    # exclusive cumulative sum down each diagonal
    skew = np.cumsum(skew, axis=0)
    skew = np.vstack([np.zeros((1, k), skew.dtype), skew[:-1]])
    upper = np.zeros((k, k), dtype=diff.dtype)
    upper[i, i + d] = first[d] + skew[i, d]
    return upper + np.triu(upper, 1).T


def _real_weights(n, nf, dtype):
    # Parseval weights for a one-sided spectrum
    w = np.full(nf, 2.0, dtype=dtype)
    w[0] = 1.0
    if n % 2 == 0:
        w[-1] = 1.0
    return w / n


class FusedFront:
    """Runs conv_temporal, bn1 and depthwise of a model as one operation."""

    def __init__(self, conv, bn, depthwise):
        self.conv, self.bn, self.depthwise = conv, bn, depthwise
        self._cache = None

    def clear_cache(self):
        self._cache = None

    def forward(self, x, training=False, cache=None):
        conv, bn, dw = self.conv, self.bn, self.depthwise
        keep = training if cache is None else cache
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite input to layer {conv.index} ({conv.name})")
        dtype = x.dtype
        b, _, h, width = x.shape
        ksize = conv.kernel_size
        k = conv.params["kernels"][:, 0, 0, :]
        f = k.shape[0]
        w = dw.params["kernels"][..., 0]
        mult = w.shape[1]
        left, right = same_padding(ksize)
        xp = np.pad(x[:, 0], ((0, 0), (0, 0), (left, right)))
        n = _fft_len(width, ksize)
        xf = sfft.rfft(xp, n=n, axis=-1)
        nf = xf.shape[-1]
        uf = np.matmul(w.reshape(f * mult, h).astype(xf.dtype), xf)
        kf = sfft.rfft(k, n=n, axis=-1)
        vf = uf.reshape(b, f, mult, nf) * np.conj(kf)[None, :, None, :]
        v = sfft.irfft(vf, n=n, axis=-1)[..., :width]
        count = b * h * width
        s_w = w.sum(axis=-1)
        if training:
            flat = xp.reshape(b * h, -1)
            total = np.concatenate([[0.0], np.cumsum(flat.sum(axis=0, dtype=np.float64))])
            window_sums = (total[width:width + ksize] - total[:ksize]).astype(dtype)
            gram = padded_gram(flat, width, ksize, xf.reshape(b * h, nf), n)
            mean = k @ window_sums / count
            gk = gram @ k.T  # (K, F)
            second = np.einsum("fk,kf->f", k, gk) / count
            var = np.maximum(second - mean ** 2, 0.0)
            if bn.update_stats:
                mom = bn.momentum
                bn.buffers["moving_mean"] = mom * bn.buffers["moving_mean"] + (1 - mom) * mean
                bn.buffers["moving_var"] = mom * bn.buffers["moving_var"] + (1 - mom) * var
        else:
            mean, var = bn.buffers["moving_mean"], bn.buffers["moving_var"]
            window_sums = gk = None
        root = np.sqrt(var + bn.epsilon).astype(dtype)
        a = (bn.params["gamma"] / root).astype(dtype)
        c = (bn.params["beta"] - a * mean).astype(dtype)
        z = a[None, :, None, None] * v + (c[:, None] * s_w)[None, :, :, None]
        if keep:
            self._cache = dict(xf=xf, uf=uf, kf=kf, v=v, n=n, a=a, mean=mean.astype(dtype),
                               var=var, root=root, s_w=s_w, training=training,
                               window_sums=window_sums, gk=gk, count=count, c=c)
        return z.reshape(b, f * mult, 1, width)

    def backward(self, grad_out):
        if self._cache is None:
            from .errors import StateError
            raise StateError("fused front: backward called before a caching forward pass")
        st = self._cache
        conv, bn, dw = self.conv, self.bn, self.depthwise
        k = conv.params["kernels"][:, 0, 0, :]
        f, ksize = k.shape
        w = dw.params["kernels"][..., 0]
        mult, h = w.shape[1], w.shape[2]
        b, _, _, width = grad_out.shape
        n = st["n"]
        g = grad_out.reshape(b, f, mult, width)
        a, mean, s_w = st["a"], st["mean"], st["s_w"]
        g_sum = g.sum(axis=(0, 3))  # (F, M)
        g_v = np.einsum("bfmt,bfmt->f", g, st["v"])
        d_beta = (g_sum * s_w).sum(axis=1)
        d_a = g_v - mean * d_beta
        d_gamma = d_a / st["root"]
        gf = sfft.rfft(g, n=n, axis=-1)  # (B, F, M, nf)
        nf = gf.shape[-1]
        uf = st["uf"].reshape(b, f, mult, nf)
        cross = np.einsum("bfmn,bfmn->fn", np.conj(gf), uf)
        dk = a[:, None] * sfft.irfft(cross, n=n, axis=-1)[:, :ksize]
        if st["training"]:
            d_var = d_a * (-a / (2.0 * (st["var"] + bn.epsilon)))
            d_mean = -a * d_beta - 2.0 * mean * d_var
            count = st["count"]
            dk = dk + (d_mean[:, None] * st["window_sums"][None, :]
                       + 2.0 * d_var[:, None] * st["gk"].T) / count
        # depthwise weights through v and through the constant term c * sum_h w
        rf = gf * st["kf"][None, :, None, :]
        xf = st["xf"]
        weights = _real_weights(n, nf, xf.real.dtype)
        lhs = np.concatenate([rf.real, rf.imag], axis=-1).transpose(1, 2, 0, 3)
        lhs = lhs.reshape(f * mult, -1)
        xw = xf * weights
        rhs = np.concatenate([xw.real, xw.imag], axis=-1).transpose(0, 2, 1)
        rhs = rhs.reshape(b, 2 * nf, h)
        # lhs columns are ordered (b, [real | imag] frequency), matching rhs rows
        proj = lhs @ rhs.reshape(b * 2 * nf, h)
        d_w = a[:, None, None] * proj.reshape(f, mult, h) + (st["c"][:, None] * g_sum)[..., None]
        conv.grads["kernels"] = dk[:, None, None, :].astype(k.dtype, copy=False)
        bn.grads["gamma"] = d_gamma.astype(k.dtype, copy=False)
        bn.grads["beta"] = d_beta.astype(k.dtype, copy=False)
        dw.grads["kernels"] = d_w[..., None].astype(k.dtype, copy=False)
        return None
