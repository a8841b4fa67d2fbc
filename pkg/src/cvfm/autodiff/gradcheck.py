"""Gradients of scalar functions and central-difference checks."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .tape import Tape, Tensor


def grad(fn: Callable[[Tensor], Tensor], point) -> tuple[float, np.ndarray]:
    """Value and reverse-mode gradient of scalar ``fn`` at ``point``."""
    with Tape() as tape:
        x = Tensor(np.array(point, dtype=np.float64), requires_grad=True)
        out = fn(x)
        tape.backward(out)
    g = np.zeros_like(x.value) if x.grad is None else x.grad
    return float(out.value), g


def numeric_grad(fn: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> np.ndarray:
    point = np.array(point, dtype=np.float64)
    out = np.zeros_like(point)
    for i in np.ndindex(point.shape):
        old = point[i]
        point[i] = old + h
        fp = float(fn(Tensor(point)).value)
        point[i] = old - h
        fm = float(fn(Tensor(point)).value)
        point[i] = old
        out[i] = (fp - fm) / (2.0 * h)
    return out


def grad_check(fn: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> float:
    """Norm-wise relative error ``|analytic - central|_inf / max(|analytic|_inf, |central|_inf)``.

    Coordinate-wise ratios are avoided: a near-zero component of a gradient
    whose other entries are O(1) carries central-difference roundoff of order
    ``eps |f| / h`` that says nothing about the derivative code.
    """
    _, analytic = grad(fn, point)
    numeric = numeric_grad(fn, point, h)
    if analytic.size == 0:
        return 0.0
    scale = max(float(np.abs(analytic).max()), float(np.abs(numeric).max()), 1e-12)
    return float(np.abs(analytic - numeric).max()) / scale
