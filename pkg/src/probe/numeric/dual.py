"""Dual numbers for first-order forward-mode differentiation.

The two channels may be Python floats, numpy arrays or torch tensors, and may
themselves be ``Dual`` (nesting gives mixed second derivatives).  When the
channels are torch tensors that require grad, reverse-mode autograd runs
through both channels, which is how parameter gradients of input-derivative
losses are obtained.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
import torch
from scipy.special import expit

from probe.errors import NumericError


def _is_torch(x) -> bool:
    return isinstance(x, torch.Tensor)


def _all_finite(x) -> bool:
    if isinstance(x, Dual):
        return _all_finite(x.value) and _all_finite(x.deriv)
    if _is_torch(x):
        return bool(torch.isfinite(x).all())
    return bool(np.all(np.isfinite(x)))


def _guard(op: str, result, arg):
    if not _all_finite(result):
        raise NumericError(f"{op}: non-finite result (input {_summary(arg)})")
    return result


def _summary(x) -> str:
    if isinstance(x, Dual):
        return f"Dual({_summary(x.value)}, {_summary(x.deriv)})"
    if _is_torch(x):
        x = x.detach().cpu().numpy()
    arr = np.asarray(x, dtype=float)
    if arr.size == 1:
        return repr(float(arr.reshape(-1)[0]))
    return f"array{arr.shape}, range [{np.nanmin(arr):.4g}, {np.nanmax(arr):.4g}]"


class Dual:
    """value + deriv * eps with eps**2 == 0."""

    __slots__ = ("value", "deriv")
    __array_priority__ = 1000
    __array_ufunc__ = None

    def __init__(self, value, deriv=0.0):
        self.value = value
        self.deriv = deriv

    def __repr__(self) -> str:
        return f"Dual({self.value!r}, {self.deriv!r})"

    def __neg__(self):
        return Dual(-self.value, -self.deriv)

    def __pos__(self):
        return self

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.value + other.value, self.deriv + other.deriv)
        return Dual(self.value + other, self.deriv)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.value - other.value, self.deriv - other.deriv)
        return Dual(self.value - other, self.deriv)

    def __rsub__(self, other):
        return Dual(other - self.value, -self.deriv)

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(self.value * other.value,
                        self.value * other.deriv + self.deriv * other.value)
        return Dual(self.value * other, self.deriv * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            q = self.value / other.value
            out = Dual(q, (self.deriv - q * other.deriv) / other.value)
        else:
            out = Dual(self.value / other, self.deriv / other)
        return _guard("div", out, other)

    def __rtruediv__(self, other):
        q = other / self.value
        return _guard("div", Dual(q, -q * self.deriv / self.value), self)

    def __pow__(self, k: int):
        if not isinstance(k, int) or k < 0:
            raise TypeError("Dual only supports non-negative integer powers")
        if k == 0:
            return Dual(self.value * 0 + 1, self.deriv * 0)
        return Dual(self.value ** k, k * self.value ** (k - 1) * self.deriv)


def lift(x) -> Dual:
    return x if isinstance(x, Dual) else Dual(x, 0.0)


def linear(x, fn: Callable):
    """Apply a linear map (matmul, einsum, sum, reshape) to both channels."""
    if isinstance(x, Dual):
        return Dual(linear(x.value, fn), linear(x.deriv, fn))
    return fn(x)


def value_of(x):
    while isinstance(x, Dual):
        x = x.value
    return x


# -- primitives ---------------------------------------------------------------

def _exp(x):
    if _is_torch(x):
        return torch.exp(x)
    with np.errstate(over="ignore"):
        return np.exp(x)


def _log(x):
    if _is_torch(x):
        return torch.log(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(x)


def _sigmoid(x):
    return torch.sigmoid(x) if _is_torch(x) else expit(x)


def _softplus(x):
    if _is_torch(x):
        return torch.nn.functional.softplus(x)
    return np.logaddexp(0.0, x)


def _tanh(x):
    return torch.tanh(x) if _is_torch(x) else np.tanh(x)


def exp(x):
    if isinstance(x, Dual):
        e = exp(x.value)
        return Dual(e, e * x.deriv)
    return _guard("exp", _exp(x), x)


def log(x):
    if isinstance(x, Dual):
        return Dual(log(x.value), x.deriv / x.value)
    return _guard("log", _log(x), x)


def sigmoid(x):
    if isinstance(x, Dual):
        s = sigmoid(x.value)
        return Dual(s, s * (1 - s) * x.deriv)
    return _sigmoid(x)


def softplus(x):
    if isinstance(x, Dual):
        return Dual(softplus(x.value), sigmoid(x.value) * x.deriv)
    return _softplus(x)


def tanh(x):
    if isinstance(x, Dual):
        t = tanh(x.value)
        return Dual(t, (1 - t * t) * x.deriv)
    return _tanh(x)


def log_sigmoid_prime(x):
    """ln(sigmoid'(x)) evaluated without underflow for large |x|."""
    return -(softplus(x) + softplus(-x))


ACTIVATIONS = {"sigmoid": sigmoid, "tanh": tanh, "softplus": softplus}


def dual_forward(f: Callable, x: float) -> tuple[float, float]:
    """Value and derivative of a scalar program built from the primitives."""
    out = f(Dual(float(x), 1.0))
    if not isinstance(out, Dual):
        return float(out), 0.0
    if not _all_finite(out):
        raise NumericError(f"dual_forward: non-finite output at x={x!r}")
    return float(out.value), float(out.deriv)


def jacobian_dual(f: Callable, x) -> np.ndarray:
    """Exact Jacobian of a vector map by one forward pass per input coordinate."""
    x = np.asarray(x, dtype=float)
    n = x.size
    cols = []
    for j in range(n):
        seed = np.zeros(n)
        seed[j] = 1.0
        out = f(Dual(x.copy(), seed))
        cols.append(np.asarray(lift(out).deriv, dtype=float).reshape(-1))
    return np.stack(cols, axis=1)
