"""Closed-form and brute-force references used by the tests.

Nothing here imports a model module; only ``probe.numeric`` and the
standard numerical stack.
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass

import numpy as np

from probe.errors import DataError, DomainError

KL_FLOOR = 1e-12


@dataclass(frozen=True)
class VerificationResult:
    check: str
    metric: str
    value: float
    tolerance: float | None
    passed: bool

    def to_dict(self) -> dict:
        return {"check": self.check, "metric": self.metric, "value": float(self.value),
                "tolerance": self.tolerance, "pass": bool(self.passed)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def result(check: str, metric: str, value: float, tolerance: float,
           upper: bool = True) -> VerificationResult:
    """Pass when ``value <= tolerance`` (or ``>=`` with ``upper=False``)."""
    value = float(value)
    ok = bool(np.isfinite(value)) and (value <= tolerance if upper else value >= tolerance)
    return VerificationResult(check, metric, value, tolerance, ok)


@dataclass(frozen=True)
class GridDensityComparison:
    grid: tuple
    reference: np.ndarray
    estimate: np.ndarray
    l1: float
    kl: float
    max_abs: float

    def metrics(self) -> dict:
        return {"l1": self.l1, "kl": self.kl, "max_abs": self.max_abs}


def _trapezoid_nd(values: np.ndarray, axes: tuple) -> float:
    out = values
    for x in reversed(axes):
        out = np.trapezoid(out, x, axis=-1)
    return float(out)


def _evaluate_on(fn, axes: tuple) -> np.ndarray:
    if not callable(fn):
        return np.asarray(fn, dtype=float)
    if len(axes) == 1:
        return np.asarray(fn(axes[0]), dtype=float).reshape(axes[0].shape)
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.column_stack([m.ravel() for m in mesh])
    return np.asarray(fn(pts), dtype=float).reshape(mesh[0].shape)


def compare_densities(reference, estimate, grid) -> GridDensityComparison:
    """L1 (trapezoid), KL(reference || estimate) and max deviation on a grid.

    ``grid`` is one axis or a tuple of axes for a tensor grid; the densities
    are callables on points or precomputed arrays of matching shape.
    """
    axes = tuple(np.asarray(g, dtype=float) for g in grid) \
        if isinstance(grid, (tuple, list)) else (np.asarray(grid, dtype=float),)
    ref = _evaluate_on(reference, axes)
    est = _evaluate_on(estimate, axes)
    shape = tuple(a.size for a in axes)
    if ref.shape != shape or est.shape != shape:
        raise DataError(f"density shapes {ref.shape} / {est.shape} do not match grid {shape}")
    for name, d in (("reference", ref), ("estimate", est)):
        if not np.all(np.isfinite(d)):
            raise DomainError(f"{name} density has non-finite values")
        if np.any(d < 0):
            raise DomainError(f"{name} density is negative at {int(np.sum(d < 0))} grid points")
    diff = np.abs(ref - est)
    rf, ef = np.maximum(ref, KL_FLOOR), np.maximum(est, KL_FLOOR)
    kl = _trapezoid_nd(rf * np.log(rf / ef), axes)
    return GridDensityComparison(tuple(axes), ref, est, _trapezoid_nd(diff, axes),
                                 max(kl, 0.0), float(diff.max()))


def closed_form_mle_gaussian(data) -> tuple[float, float]:
    """Sample mean and divide-by-N variance."""
    x = np.asarray(data, dtype=float).reshape(-1)
    if x.size == 0:
        raise DataError("closed_form_mle_gaussian needs at least one sample")
    if not np.all(np.isfinite(x)):
        raise DataError("non-finite sample")
    mean = math.fsum(x) / x.size
    return mean, math.fsum((x - mean) ** 2) / x.size


def empirical_conditional(pairs) -> dict:
    """Counting estimate of P(b | a) as ``{a: {b: frequency}}``."""
    table = defaultdict(Counter)
    for a, b in pairs:
        table[a][b] += 1
    if not table:
        raise DataError("empirical_conditional needs at least one pair")
    return {a: {b: c / sum(row.values()) for b, c in sorted(row.items(), key=lambda kv: str(kv[0]))}
            for a, row in table.items()}


def normal_pdf(x, mean: float = 0.0, sd: float = 1.0):
    z = (np.asarray(x, dtype=float) - mean) / sd
    return np.exp(-0.5 * z * z) / (sd * math.sqrt(2 * math.pi))


def bivariate_normal_pdf(pts, rho: float, mean=(0.0, 0.0), sd=(1.0, 1.0)):
    pts = np.asarray(pts, dtype=float)
    z1 = (pts[:, 0] - mean[0]) / sd[0]
    z2 = (pts[:, 1] - mean[1]) / sd[1]
    q = (z1 * z1 - 2 * rho * z1 * z2 + z2 * z2) / (1 - rho * rho)
    return np.exp(-0.5 * q) / (2 * math.pi * sd[0] * sd[1] * math.sqrt(1 - rho * rho))


def lognormal_pdf(x, mu: float = 0.0, sigma: float = 1.0):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    pos = x > 0
    lx = np.log(x[pos])
    out[pos] = np.exp(-0.5 * ((lx - mu) / sigma) ** 2) / (x[pos] * sigma * math.sqrt(2 * math.pi))
    return out


def normal_shift_l1(delta: float) -> float:
    """Exact L1 distance between N(0,1) and N(delta,1)."""
    return 2.0 * math.erf(abs(delta) / (2.0 * math.sqrt(2.0)))


def fd_gradient_error(analytic, numeric) -> float:
    """Relative error max|a - n| / max(1, max|n|)."""
    a = np.asarray(analytic, dtype=float).reshape(-1)
    n = np.asarray(numeric, dtype=float).reshape(-1)
    return float(np.max(np.abs(a - n)) / max(1.0, float(np.max(np.abs(n)))))
