"""Fused layer kernels with hand-written backward passes.

All sequence tensors are laid out ``(batch, time, channels)``.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, _make, clip, log, maximum, note_branch, tmean


def conv1d_same(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 convolution with zero "same" padding.

    ``weight`` has shape ``(kernel, ch_in, ch_out)``; the kernel must be odd.
    out[b, t, o] = bias[o] + sum_{k,i} x[b, t + k - K//2, i] * w[k, i, o]
    """
    if x.ndim != 3:
        raise ValueError(f"conv1d expects (batch, time, ch), got {x.shape}")
    k, cin, cout = weight.shape
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if x.shape[2] != cin:
        raise ValueError(f"input has {x.shape[2]} channels, kernel expects {cin}")
    b, t, _ = x.shape
    pad = k // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    # (b, t, cin, k) -> (b*t, k*cin) with k-major ordering to match weight.reshape
    cols = sliding_window_view(xp, k, axis=1).transpose(0, 1, 3, 2).reshape(b * t, k * cin)
    w2 = weight.data.reshape(k * cin, cout)
    out = cols @ w2
    if bias is not None:
        out += bias.data

    def backward(g):
        g2 = g.reshape(b * t, cout)
        gw = (cols.T @ g2).reshape(k, cin, cout)
        gb = g2.sum(axis=0) if bias is not None else None
        gcols = (g2 @ w2.T).reshape(b, t, k, cin)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, j : j + t, :] += gcols[:, :, j, :]
        return gxp[:, pad : pad + t, :], gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out.reshape(b, t, cout), parents, backward, "conv1d")


def max_pool1d(x: Tensor, pool: int = 2) -> Tensor:
    """Non-overlapping max pooling along time; a trailing remainder is dropped."""
    b, t, c = x.shape
    t_out = t // pool
    if t_out < 1:
        raise ValueError(f"time extent {t} shorter than pool {pool}")
    xr = x.data[:, : t_out * pool, :].reshape(b, t_out, pool, c)
    idx = xr.argmax(axis=2)
    note_branch(idx)
    out = np.take_along_axis(xr, idx[:, :, None, :], axis=2)[:, :, 0, :]

    def backward(g):
        gr = np.zeros_like(xr)
        np.put_along_axis(gr, idx[:, :, None, :], g[:, :, None, :], axis=2)
        gx = np.zeros_like(x.data)
        gx[:, : t_out * pool, :] = gr.reshape(b, t_out * pool, c)
        return (gx,)

    return _make(out, (x,), backward, "maxpool1d")


def _normalize_backward(g, xhat, inv_std, gamma, axes, n):
    gxhat = g * gamma
    gx = (inv_std / n) * (
        n * gxhat
        - gxhat.sum(axis=axes, keepdims=True)
        - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
    )
    return gx


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation over all but the last axis.

    In training mode the running statistics are updated in place.
    """
    axes = tuple(range(x.ndim - 1))
    if not training:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        scale = gamma.data * inv_std
        out = (x.data - running_mean) * scale + beta.data
        xhat = (x.data - running_mean) * inv_std

        def backward_eval(g):
            return g * scale, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return _make(out, (x, gamma, beta), backward_eval, "batchnorm")

    n = int(np.prod([x.shape[i] for i in axes]))
    mean = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = xhat * gamma.data + beta.data
    running_mean *= momentum
    running_mean += (1.0 - momentum) * mean
    running_var *= momentum
    running_var += (1.0 - momentum) * var

    def backward(g):
        gx = _normalize_backward(g, xhat, inv_std, gamma.data, axes, n)
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make(out, (x, gamma, beta), backward, "batchnorm")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx = _normalize_backward(g, xhat, inv_std, gamma.data, -1, d)
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gamma, beta), backward, "layernorm")


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout: kept units are scaled by 1/(1-rate)."""
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def bce_loss(pred: Tensor, label, eps: float = 1e-7) -> Tensor:
    """Batch-mean binary cross-entropy on probabilities clamped to [eps, 1-eps]."""
    y = np.asarray(label, dtype=pred.dtype).reshape(pred.shape)
    p = clip(pred, eps, 1.0 - eps)
    return tmean(-(log(p) * y + log(1.0 - p) * (1.0 - y)))


def contrastive_loss(distance: Tensor, label, margin: float = 1.0) -> Tensor:
    """Batch mean of y*d^2 + (1-y)*max(0, margin-d)^2; label 1 means same identity."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    if np.any(distance.data < 0):
        raise ValueError("distance must be non-negative")
    y = np.asarray(label, dtype=distance.dtype).reshape(distance.shape)
    hinge = maximum(margin - distance, 0.0)
    return tmean(distance * distance * y + hinge * hinge * (1.0 - y))


def euclidean_distance(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Row-wise Euclidean distance; ``eps`` keeps the gradient finite at zero."""
    diff = a - b
    return ((diff * diff).sum(axis=-1) + eps) ** 0.5
