"""Central finite-difference checks for tape gradients.

Each real coordinate of each parameter (real and imaginary parts separately)
is perturbed by ``+-step``.  When a perturbation flips the branch of a
non-smooth op (relu family, abs, max) the central difference is replaced by
the one-sided difference on the side that keeps the unperturbed branch
pattern; if both sides flip, the coordinate is skipped.

The error of a parameter block is ``max|analytic - numeric| / max|numeric|``
(infinity-norm relative error).
"""

from __future__ import annotations

from typing import Callable, Dict, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward, record_kinks


def _eval(fn: Callable[[], Tensor]):
    with record_kinks() as log:
        value = float(fn().data)
    return value, log


def numerical_gradient(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-5):
    """Finite-difference gradient of ``fn()`` w.r.t. ``param`` and a mask of checked entries."""
    param.data = np.ascontiguousarray(param.data)
    base_val, base_kinks = _eval(fn)
    flat = param.data.reshape(-1)
    parts = [(1.0, 0)] + ([(1j, 1)] if param.is_complex else [])
    grad = np.zeros_like(param.data).reshape(-1)
    checked = np.ones(grad.shape, dtype=bool)
    for idx in range(flat.size):
        for unit, which in parts:
            orig = flat[idx]
            flat[idx] = orig + step * unit
            f_plus, k_plus = _eval(fn)
            flat[idx] = orig - step * unit
            f_minus, k_minus = _eval(fn)
            flat[idx] = orig
            if k_plus == base_kinks and k_minus == base_kinks:
                d = (f_plus - f_minus) / (2 * step)
            elif k_plus == base_kinks:
                d = (f_plus - base_val) / step
            elif k_minus == base_kinks:
                d = (base_val - f_minus) / step
            else:
                checked[idx] = False
                continue
            if which == 0:
                grad[idx] += d
            else:
                grad[idx] += 1j * d
    return grad.reshape(param.shape), checked.reshape(param.shape)


def analytic_gradient(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> Dict[Tensor, np.ndarray]:
    with Tape() as tape:
        loss = fn()
    return backward(tape, loss, params)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, mask=None) -> float:
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    if mask is not None:
        a, n = a[mask], n[mask]
    diff = np.max(np.abs(a - n), initial=0.0)
    scale = max(np.max(np.abs(n), initial=0.0), np.max(np.abs(a), initial=0.0))
    if scale < 1e-12:
        return diff
    return diff / scale


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5) -> Dict[str, float]:
    """Relative error per parameter block, keyed by parameter name (or index)."""
    grads = analytic_gradient(fn, params)
    errors = {}
    for i, p in enumerate(params):
        numeric, mask = numerical_gradient(fn, p, step)
        errors[p.name or str(i)] = relative_error(grads[p], numeric, mask)
    return errors
