"""Central finite-difference gradient checking shared by the test modules."""
from __future__ import annotations

import numpy as np


def finite_difference_grad(loss_fn, params: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn()`` with respect to ``params``.

    ``loss_fn`` must read the live ``params`` array (mutated in place here).
    """
    grad = np.zeros_like(params)
    for i in range(params.size):
        orig = params[i]
        params[i] = orig + h
        hi = loss_fn()
        params[i] = orig - h
        lo = loss_fn()
        params[i] = orig
        grad[i] = (hi - lo) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), 1e-12)
    return float(np.linalg.norm(analytic - numeric)) / denom
