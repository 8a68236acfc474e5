"""Matrix exponential by scaling and squaring around a truncated Taylor core."""

from __future__ import annotations

import numpy as np

from probe.errors import NumericError

_TAYLOR_ORDER = 18
_SCALED_NORM = 0.5


def matrix_exp(a, t: float = 1.0) -> np.ndarray:
    """exp(a * t) for a square real matrix.

    The argument is scaled by 2**-s until its infinity norm is at most 0.5,
    where an 18-term Taylor series is accurate to well below double
    precision, then squared back s times.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"matrix_exp needs a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)) or not np.isfinite(t):
        raise NumericError("matrix_exp: non-finite input")
    m = a * t
    norm = np.abs(m).sum(axis=1).max() if m.size else 0.0
    s = 0
    if norm > _SCALED_NORM:
        s = int(np.ceil(np.log2(norm / _SCALED_NORM)))
    m = m / 2.0 ** s
    n = m.shape[0]
    result = np.eye(n)
    term = np.eye(n)
    for k in range(1, _TAYLOR_ORDER + 1):
        term = term @ m / k
        result = result + term
    for _ in range(s):
        result = result @ result
    if not np.all(np.isfinite(result)):
        raise NumericError("matrix_exp: overflow during squaring")
    return result
