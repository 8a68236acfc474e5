"""Finite differences, Simpson quadrature and the n=2 mixed partial."""

from __future__ import annotations

from typing import Callable

import numpy as np

from probe.errors import NumericError
from probe.numeric.dual import Dual

DEFAULT_STEP = 1e-5


def _finite(name: str, arr) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name}: non-finite function value")
    return arr


def finite_diff_jacobian(f: Callable, x, h: float = DEFAULT_STEP) -> np.ndarray:
    """Central-difference Jacobian, entry (i, j) = df_i/dx_j."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.asarray(x, dtype=float).reshape(-1)
    cols = []
    for j in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        fp = _finite("finite_diff_jacobian", f(xp)).reshape(-1)
        fm = _finite("finite_diff_jacobian", f(xm)).reshape(-1)
        cols.append((fp - fm) / (2 * h))
    return np.stack(cols, axis=1)


def finite_diff_gradient(f: Callable, x, h: float = DEFAULT_STEP) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    return finite_diff_jacobian(lambda v: np.atleast_1d(f(v)), x, h)[0]


def _evaluate(g: Callable, xs: np.ndarray) -> np.ndarray:
    try:
        vals = np.asarray(g(xs), dtype=float)
        if vals.shape != xs.shape:
            raise ValueError
    except (TypeError, ValueError):
        vals = np.array([float(g(x)) for x in xs])
    return _finite("quadrature", vals)


def simpson_weights(a: float, b: float, n_panels: int) -> tuple[np.ndarray, np.ndarray]:
    if not a < b:
        raise ValueError(f"quadrature needs a < b, got [{a}, {b}]")
    if n_panels < 2 or n_panels % 2:
        raise ValueError(f"Simpson needs an even panel count >= 2, got {n_panels}")
    xs = np.linspace(a, b, n_panels + 1)
    w = np.ones(n_panels + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return xs, w * (b - a) / (3.0 * n_panels)


def quadrature(g: Callable, a: float, b: float, n_panels: int = 256) -> float:
    """Composite Simpson rule.  ``g`` may be vectorized or scalar."""
    xs, w = simpson_weights(a, b, n_panels)
    return float(np.dot(w, _evaluate(g, xs)))


def simpson_2d(g: Callable, box, n_panels: int = 128) -> float:
    """Tensor-product Simpson over ``box = ((a0, b0), (a1, b1))``.

    ``g`` receives an ``(m, 2)`` array of points and returns ``m`` values.
    """
    (a0, b0), (a1, b1) = box
    x0, w0 = simpson_weights(a0, b0, n_panels)
    x1, w1 = simpson_weights(a1, b1, n_panels)
    g0, g1 = np.meshgrid(x0, x1, indexing="ij")
    pts = np.column_stack([g0.ravel(), g1.ravel()])
    vals = _finite("simpson_2d", g(pts)).reshape(g0.shape)
    return float(w0 @ vals @ w1)


def mixed_partial_2d(f: Callable, x, check: bool = True, h: float = 1e-4,
                     rtol: float = 1e-4) -> float:
    """d^2 f / da1 da2 by nested dual numbers.

    With ``check`` the value is compared against a nested central difference
    and a ``NumericError`` is raised if they disagree beyond ``rtol``.
    """
    a1, a2 = (float(v) for v in np.asarray(x, dtype=float).reshape(-1))
    out = f(Dual(Dual(a1, 1.0), Dual(0.0, 0.0)), Dual(Dual(a2, 0.0), Dual(1.0, 0.0)))
    if not isinstance(out, Dual) or not isinstance(out.deriv, Dual):
        exact = 0.0
    else:
        exact = float(out.deriv.deriv)
    if not np.isfinite(exact):
        raise NumericError(f"mixed_partial_2d: non-finite result at {(a1, a2)}")
    if check:
        fd = (f(a1 + h, a2 + h) - f(a1 + h, a2 - h)
              - f(a1 - h, a2 + h) + f(a1 - h, a2 - h)) / (4 * h * h)
        if abs(fd - exact) > rtol * (1.0 + abs(exact)):
            raise NumericError(
                f"mixed_partial_2d: dual {exact!r} disagrees with finite difference {fd!r}")
    return exact
