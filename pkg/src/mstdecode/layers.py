"""Forward/backward primitives for the encoder, in plain numpy.

Each ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
takes ``(dout, cache)``.  Feature maps live on axis 1; batch-norm statistics
are taken over every other axis.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _bn_axes(x: np.ndarray) -> tuple[int, ...]:
    return (0,) + tuple(range(2, x.ndim))


def _per_map(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def batchnorm_forward(x, gamma, beta, mode, running_mean=None, running_var=None, eps=BN_EPS):
    """Per-map batch normalization.

    In train mode the batch statistics are returned in the cache (``"mean"``,
    ``"var"``, ``"count"``) so the caller can fold them into running
    statistics; this function never mutates its arguments.
    """
    axes = _bn_axes(x)
    if mode == "train":
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - _per_map(mean, x.ndim)) * _per_map(inv, x.ndim)
    out = xhat * _per_map(gamma, x.ndim) + _per_map(beta, x.ndim)
    count = x.size // x.shape[1]
    cache = {"x": x, "mean": mean, "var": var, "inv": inv, "gamma": gamma, "mode": mode, "count": count}
    return out, cache


def _xhat(cache):
    x = cache["x"]
    return (x - _per_map(cache["mean"], x.ndim)) * _per_map(cache["inv"], x.ndim)


def batchnorm_backward(dout, cache, need_dx=True):
    xhat = _xhat(cache)
    axes = _bn_axes(dout)
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    if not need_dx:
        return None, dgamma, dbeta
    nd = dout.ndim
    g = _per_map(cache["gamma"] * cache["inv"], nd)
    if cache["mode"] != "train":
        return dout * g, dgamma, dbeta
    n = cache["count"]
    dx = g * (dout - _per_map(dbeta / n, nd) - xhat * _per_map(dgamma / n, nd))
    return dx, dgamma, dbeta


def update_running_stats(running_mean, running_var, cache, momentum=BN_MOMENTUM):
    """Exponential moving average of batch statistics (unbiased variance)."""
    n = cache["count"]
    unbiased = cache["var"] * (n / max(n - 1, 1))
    running_mean *= 1.0 - momentum
    running_mean += momentum * cache["mean"]
    running_var *= 1.0 - momentum
    running_var += momentum * unbiased


def elu_forward(x):
    out = np.where(x >= 0, x, np.expm1(np.minimum(x, 0)))
    return out, out


def elu_backward(dout, out):
    # For x < 0, d/dx (e^x - 1) = e^x = out + 1.
    return dout * np.where(out >= 0, 1.0, out + 1.0)


def avgpool_forward(x, pool):
    if pool == 1:
        return x, (pool, x.shape)
    *lead, length = x.shape
    out = x.reshape(*lead, length // pool, pool).mean(axis=-1)
    return out, (pool, x.shape)


def avgpool_backward(dout, cache):
    pool, shape = cache
    if pool == 1:
        return dout
    return np.repeat(dout / pool, pool, axis=-1).reshape(shape)


def same_padding(kernel: int) -> tuple[int, int]:
    left = (kernel - 1) // 2
    return left, kernel - 1 - left


def depthwise_forward(x, w):
    """One length-K filter per map along the last axis, zero 'same' padding.

    ``x`` is [B, M, ..., L] and ``w`` is [M, K].
    """
    k = w.shape[1]
    left, right = same_padding(k)
    pad = [(0, 0)] * (x.ndim - 1) + [(left, right)]
    xp = np.pad(x, pad)
    win = sliding_window_view(xp, k, axis=-1)  # [B, M, ..., L, K]
    out = np.einsum("bm...k,mk->bm...", win, w)
    return out, (xp, w, x.shape)


def depthwise_backward(dout, cache):
    xp, w, shape = cache
    k = w.shape[1]
    length = shape[-1]
    win = sliding_window_view(xp, k, axis=-1)
    axes = _bn_axes(dout)
    dw = np.stack([(dout * win[..., j]).sum(axis=axes) for j in range(k)], axis=1)
    dxp = np.zeros_like(xp)
    wb = w.reshape((1, w.shape[0]) + (1,) * (dout.ndim - 2) + (k,))
    for j in range(k):
        dxp[..., j:j + length] += dout * wb[..., j]
    left, _ = same_padding(k)
    return dxp[..., left:left + length], dw


def pointwise_forward(x, w, b):
    """Mix maps: out[:, o] = sum_m w[o, m] x[:, m] + b[o]."""
    out = np.einsum("bm...,om->bo...", x, w) + _per_map(b, x.ndim)
    return out, (x, w)


def pointwise_backward(dout, cache):
    x, w = cache
    axes = _bn_axes(dout)
    dw = np.tensordot(dout, x, axes=(axes, axes))
    db = dout.sum(axis=axes)
    dx = np.einsum("bo...,om->bm...", dout, w)
    return dx, dw, db


def linear_forward(x, w, b):
    return x @ w.T + b, (x, w)


def linear_backward(dout, cache):
    x, w = cache
    return dout @ w, dout.T @ x, dout.sum(axis=0)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = -log_p[np.arange(n), labels].mean()
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n
