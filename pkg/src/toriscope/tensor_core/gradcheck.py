"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np


class GradientCheckError(ArithmeticError):
    pass


def numeric_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5,
                     indices: Optional[Iterable[int]] = None) -> dict[int, float]:
    """Central differences of ``f`` w.r.t. entries of ``x`` (perturbed in place, then restored)."""
    flat = x.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    out = {}
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise GradientCheckError(f"non-finite function value at coordinate {i}")
        out[int(i)] = (fp - fm) / (2 * h)
    return out


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def gradient_check(f: Callable[[], float], x: np.ndarray, analytic: np.ndarray, h: float = 1e-5,
                   indices: Optional[Iterable[int]] = None) -> float:
    """Max relative error between ``analytic`` (d f / d x) and central differences.

    ``f`` is a zero-argument callable that reads ``x``; ``x`` must be float64.
    ``indices`` restricts the check to a subset of flat coordinates.
    """
    if x.dtype != np.float64:
        raise TypeError("gradient checking requires float64 arrays")
    if not np.all(np.isfinite(analytic)):
        raise GradientCheckError("analytic gradient contains non-finite values")
    a = analytic.reshape(-1)
    num = numeric_gradient(f, x, h, indices)
    return max((relative_error(float(a[i]), v) for i, v in num.items()), default=0.0)


def check_layer(layer, x: np.ndarray, rng: np.random.Generator, h: float = 1e-5,
                max_coords: Optional[int] = None) -> dict[str, float]:
    """Gradient-check a layer's input and parameters under a random linear loss.

    Returns max relative error per checked array (``"input"`` plus parameter names).
    """
    out = layer.forward(x)
    proj = rng.standard_normal(out.shape)

    def loss():
        return float(np.sum(layer.forward(x) * proj))

    layer.zero_grad()
    layer.forward(x)
    dx = layer.backward(proj)
    grads = {k: v.copy() for k, v in layer.grads.items()}

    def pick(arr):
        if max_coords is None or arr.size <= max_coords:
            return None
        return rng.choice(arr.size, size=max_coords, replace=False)

    errors = {"input": gradient_check(loss, x, dx, h, pick(x))}
    for name, p in layer.params.items():
        errors[name] = gradient_check(loss, p, grads[name], h, pick(p))
    return errors
