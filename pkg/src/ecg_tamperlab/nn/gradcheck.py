"""Central finite-difference check of reverse-mode gradients."""
from __future__ import annotations

import hashlib
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad, record_branches


def relative_error(g_ad: np.ndarray, g_fd: np.ndarray) -> np.ndarray:
    return np.abs(g_ad - g_fd) / np.maximum(1e-8, np.abs(g_ad) + np.abs(g_fd))


def _evaluate(loss_fn: Callable[[], Tensor]) -> tuple[float, bytes]:
    with record_branches() as log:
        value = float(loss_fn().data)
    h = hashlib.blake2b(digest_size=16)
    for chunk in log:
        h.update(chunk)
    return value, h.digest()


def _central(loss_fn, flat: np.ndarray, i: int, step: float, min_eps: float, reference: bytes
             ) -> tuple[float, float]:
    """One central difference, shrinking the step while it straddles a branch change."""
    orig = flat[i]
    while True:
        flat[i] = orig + step
        up, sig_up = _evaluate(loss_fn)
        flat[i] = orig - step
        down, sig_down = _evaluate(loss_fn)
        flat[i] = orig
        if (sig_up == reference and sig_down == reference) or step / 10 < min_eps:
            return (up - down) / (2.0 * step), step
        step /= 10


def numeric_gradient(loss_fn: Callable[[], Tensor], param: Tensor, eps: float = 1e-4,
                     min_eps: float = 1e-7, indices: Sequence[int] | None = None,
                     richardson: bool = False) -> np.ndarray:
    """Central differences of ``loss_fn`` with respect to coordinates of ``param``.

    When a +-eps step flips a ReLU, hinge, clip or pooling branch the
    difference quotient straddles a kink and says nothing about the
    derivative, so that coordinate is retried with eps / 10 down to
    ``min_eps``. ``richardson`` combines steps h and h/2 to cancel the
    O(h^2) truncation term. Coordinates outside ``indices`` are left as NaN.
    """
    with no_grad():
        _, reference = _evaluate(loss_fn)
        flat = param.data.reshape(-1)
        g_fd = np.full(flat.size, np.nan)
        for i in (range(flat.size) if indices is None else indices):
            d_h, h = _central(loss_fn, flat, i, eps, min_eps, reference)
            if richardson:
                d_half, h_half = _central(loss_fn, flat, i, h / 2, min_eps, reference)
                if h_half == h / 2:
                    d_h = (4.0 * d_half - d_h) / 3.0
            g_fd[i] = d_h
    picked = g_fd if indices is None else g_fd[np.asarray(indices, dtype=int)]
    if not np.all(np.isfinite(picked)):
        raise FloatingPointError("non-finite numerical gradient")
    return g_fd.reshape(param.shape)


def checked_error(loss_fn: Callable[[], Tensor], param: Tensor, g_ad: np.ndarray, eps: float = 1e-4,
                  min_eps: float = 1e-7, refine_above: float = 1e-5) -> float:
    """Max relative error for one parameter.

    Coordinates whose plain central difference disagrees by more than
    ``refine_above`` are re-estimated with the Richardson-refined
    difference, and that estimate is the one scored.
    """
    err = relative_error(g_ad, numeric_gradient(loss_fn, param, eps, min_eps)).reshape(-1)
    suspect = np.flatnonzero(err > refine_above)
    if suspect.size:
        g_fine = numeric_gradient(loss_fn, param, eps, min_eps, indices=suspect, richardson=True).reshape(-1)
        err[suspect] = relative_error(g_ad.reshape(-1)[suspect], g_fine[suspect])
    return float(err.max()) if err.size else 0.0


def analytic_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    loss_fn().backward()
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p, g in zip(params, grads):
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite analytic gradient for {p.name or 'parameter'}")
    return grads


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-4,
               corrupt: bool = False, min_eps: float = 1e-7) -> float:
    """Max relative error between autodiff and central differences over every coordinate.

    ``loss_fn`` must be deterministic and return a scalar tensor built from
    ``params``. ``corrupt`` perturbs one analytic gradient (used to exercise
    the failure path).
    """
    analytic = analytic_gradients(loss_fn, params)
    if corrupt and analytic:
        analytic[0].flat[0] += 1.0
    worst = 0.0
    for p, g_ad in zip(params, analytic):
        if p.size:
            worst = max(worst, checked_error(loss_fn, p, g_ad, eps, min_eps))
    return worst
