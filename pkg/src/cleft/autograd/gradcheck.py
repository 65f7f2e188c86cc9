from __future__ import annotations

from typing import Callable

import numpy as np

from cleft.autograd.variable import Variable, as_array, backward, no_grad


def _max_relative_error(g_ad: np.ndarray, evaluate: Callable[[np.ndarray], float], x: np.ndarray,
                        eps: float, coords, fd_dtype) -> float:
    g_ad = g_ad.astype(np.float64).reshape(-1)
    if fd_dtype is not None:
        x = x.astype(fd_dtype)
    flat = range(x.size) if coords is None else np.asarray(coords).reshape(-1)
    worst = 0.0
    with no_grad():
        for i in flat:
            xp = x.copy()
            xm = x.copy()
            xp.flat[i] = xp.flat[i] + eps
            xm.flat[i] = xm.flat[i] - eps
            # the representable step can differ from eps at low precision
            step = float(xp.flat[i]) - float(xm.flat[i])
            g_fd = (evaluate(xp) - evaluate(xm)) / step
            err = abs(g_ad[i] - g_fd) / max(1e-8, abs(g_ad[i]) + abs(g_fd))
            worst = max(worst, err)
    return worst


def finite_diff_check(f: Callable[[Variable], Variable], x, eps: float = 1e-3,
                      coords=None, fd_dtype=np.float64) -> float:
    """Max relative error between the tape gradient of ``f`` at ``x`` and central differences.

    The error per coordinate is ``|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)``.
    ``coords`` restricts the comparison to a subset of flat indices.

    The tape gradient is taken at the dtype of ``x``. The differences are
    evaluated on ``x`` cast to ``fd_dtype`` (float64 by default), so the
    reference is not swamped by forward-pass rounding; pass ``None`` to
    difference at the native dtype.
    """
    x = as_array(x).copy()
    xv = Variable(x, requires_grad=True)
    backward(f(xv))
    return _max_relative_error(xv.grad, lambda arr: float(f(Variable(arr)).value), x, eps, coords,
                               fd_dtype)


def finite_diff_check_param(param: Variable, loss_fn: Callable[[], Variable], eps: float = 1e-3,
                            coords=None, fd_dtype=np.float64) -> float:
    """Same metric for a parameter used inside a model; ``loss_fn`` runs the full forward pass."""
    x = param.value.copy()
    param.zero_grad()
    backward(loss_fn())
    g_ad = param.grad.copy()
    param.zero_grad()

    def evaluate(arr: np.ndarray) -> float:
        param.value = arr
        return float(loss_fn().value)

    try:
        return _max_relative_error(g_ad, evaluate, x, eps, coords, fd_dtype)
    finally:
        param.value = x
