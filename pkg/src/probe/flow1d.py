"""Univariate density estimation by differentiating a monotone CDF network.

The network output y(x) = sigmoid(z(x)) is a CDF estimate; z is built from
positive weights and increasing activations plus a positive input-to-output
skip path, so dy/dx > 0 everywhere and y runs from 0 to 1 over the real
line.  The density is dy/dx, obtained by a dual-number forward pass, and the
model trains by minimizing the mean of -ln(dy/dx).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from probe.config import RunReport, TrainConfig, make_rng
from probe.data import Dataset
from probe.errors import DataError, UnderflowError
from probe.numeric import dual as D
from probe.numeric.calculus import quadrature
from probe.training import fit, to_torch

WEIGHT_FLOOR = 1e-6
TINY = 1e-300
LOG_TINY = math.log(TINY)
_CENTER = {"sigmoid": 0.5, "tanh": 0.0, "softplus": 0.7}


def positive(free):
    """softplus(free) + floor; the map from free parameters to weights."""
    return D.softplus(free) + WEIGHT_FLOOR


def inverse_positive(w):
    w = np.asarray(w, dtype=float) - WEIGHT_FLOOR
    return w + np.log(-np.expm1(-w))


@dataclass
class MonotoneNet:
    widths: tuple
    free_weights: list = field(repr=False)
    biases: list = field(repr=False)
    skip_gain: float = 0.5413248546129181  # softplus(.) + floor == 1
    activation: str = "sigmoid"
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.widths[0] != 1 or self.widths[-1] != 1 or len(self.widths) < 2:
            raise ValueError(f"widths must start and end with 1, got {self.widths}")
        if self.activation not in D.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not self.std > 0:
            raise ValueError("standardization std must be positive")
        self.free_weights = [np.asarray(w, dtype=float) for w in self.free_weights]
        self.biases = [np.asarray(b, dtype=float) for b in self.biases]
        for k, (w, b) in enumerate(zip(self.free_weights, self.biases)):
            if w.shape != (self.widths[k + 1], self.widths[k]) or b.shape != (self.widths[k + 1],):
                raise ValueError(f"layer {k} parameter shapes do not match widths")

    @classmethod
    def init(cls, rng: np.random.Generator, hidden=(16, 16), activation: str = "sigmoid",
             mean: float = 0.0, std: float = 1.0) -> "MonotoneNet":
        widths = (1, *hidden, 1)
        center = _CENTER[activation]
        weights, biases = [], []
        for k in range(len(widths) - 1):
            fan_in, fan_out = widths[k], widths[k + 1]
            if k == 0:
                w = rng.uniform(1.0, 3.0, size=(fan_out, 1))
                thresholds = rng.uniform(-2.5, 2.5, size=fan_out)
                b = -w[:, 0] * thresholds
            else:
                w = rng.uniform(0.5, 1.5, size=(fan_out, fan_in)) * (2.0 / fan_in)
                b = -center * w.sum(axis=1)
                if k < len(widths) - 2:
                    b = b + rng.normal(0.0, 0.5, size=fan_out)
            weights.append(inverse_positive(w))
            biases.append(b)
        return cls(widths, weights, biases, activation=activation, mean=mean, std=std)

    # -- parameter plumbing ---------------------------------------------------
    def params(self) -> dict:
        p = {}
        for k, (w, b) in enumerate(zip(self.free_weights, self.biases)):
            p[f"w{k}"] = w
            p[f"b{k}"] = b
        p["skip"] = np.asarray(self.skip_gain, dtype=float)
        return p

    def with_params(self, p: dict) -> "MonotoneNet":
        n = len(self.widths) - 1
        return MonotoneNet(self.widths, [np.asarray(p[f"w{k}"]) for k in range(n)],
                           [np.asarray(p[f"b{k}"]) for k in range(n)],
                           float(np.asarray(p["skip"])), self.activation, self.mean, self.std)

    def to_dict(self) -> dict:
        return {"widths": list(self.widths),
                "free_weights": [w.tolist() for w in self.free_weights],
                "biases": [b.tolist() for b in self.biases],
                "activation": self.activation,
                "skip_gain": self.skip_gain,
                "standardize": {"mean": self.mean, "std": self.std}}

    @classmethod
    def from_dict(cls, d: dict) -> "MonotoneNet":
        return cls(d["widths"], d["free_weights"], d["biases"], d["skip_gain"],
                   d["activation"], d["standardize"]["mean"], d["standardize"]["std"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def preactivation(u, p: dict, n_layers: int, activation: str):
    """Final pre-activation z(u) for standardized input ``u`` of shape (B,).

    Works for numpy arrays, torch tensors and ``Dual`` wrappers of either.
    """
    act = D.ACTIVATIONS[activation]
    h = D.linear(u, lambda v: v[:, None])
    for k in range(n_layers - 1):
        w = positive(p[f"w{k}"])
        h = act(D.linear(h, lambda v, w=w: v @ w.T) + p[f"b{k}"])
    w = positive(p[f"w{n_layers - 1}"])
    z = D.linear(h, lambda v: (v @ w.T)[:, 0]) + p[f"b{n_layers - 1}"][0]
    return z + positive(p["skip"]) * u


def _pre_dual(net: MonotoneNet, u, p=None) -> D.Dual:
    p = net.params() if p is None else p
    one = torch.ones_like(u) if isinstance(u, torch.Tensor) else np.ones_like(u)
    return preactivation(D.Dual(u, one), p, len(net.widths) - 1, net.activation)


def log_density_std(net: MonotoneNet, u, p=None):
    """ln(dy/du) on the standardized scale, computed stably in log space."""
    z = _pre_dual(net, u, p)
    return D.log_sigmoid_prime(z.value) + D.log(z.deriv)


def forward_cdf(net: MonotoneNet, x):
    """(y, dy/dx) at ``x`` (scalar or array) by one dual forward pass."""
    scalar = np.ndim(x) == 0
    u = (np.atleast_1d(np.asarray(x, dtype=float)) - net.mean) / net.std
    y = D.sigmoid(_pre_dual(net, u))
    dydx = y.deriv / net.std
    if scalar:
        return float(y.value[0]), float(dydx[0])
    return y.value, dydx


def log_density(net: MonotoneNet, x) -> np.ndarray:
    u = (np.atleast_1d(np.asarray(x, dtype=float)) - net.mean) / net.std
    return log_density_std(net, u) - math.log(net.std)


def density(net: MonotoneNet, x) -> np.ndarray:
    return np.exp(log_density(net, x))


def nll_1d(net: MonotoneNet, x) -> float:
    """-ln(dy/dx) at a single point."""
    ld = float(log_density(net, x)[0])
    if ld <= LOG_TINY:
        raise UnderflowError(f"density at x={x!r} is below {TINY:g}")
    return -ld


def mean_nll(net: MonotoneNet, x) -> float:
    ld = log_density(net, x)
    return -math.fsum(np.maximum(ld, LOG_TINY)) / ld.size


@dataclass
class DensityEstimate1D:
    grid: np.ndarray
    phi: np.ndarray
    cdf: np.ndarray

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("x,phi,cdf\n")
            for x, p, c in zip(self.grid, self.phi, self.cdf):
                fh.write(f"{float(x)!r},{float(p)!r},{float(c)!r}\n")


def density_grid(net: MonotoneNet, x_min: float, x_max: float, n_points: int) -> DensityEstimate1D:
    if not x_min < x_max:
        raise ValueError(f"density_grid needs x_min < x_max, got [{x_min}, {x_max}]")
    if n_points < 2:
        raise ValueError("density_grid needs at least two points")
    grid = np.linspace(x_min, x_max, n_points)
    cdf, _ = forward_cdf(net, grid)
    return DensityEstimate1D(grid, density(net, grid), cdf)


def _validate(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size == 0:
        raise DataError("cannot train on an empty dataset")
    if not np.all(np.isfinite(x)):
        raise DataError("training data contains non-finite values")
    if np.ptp(x) == 0:
        raise DataError("zero-variance input: all samples are equal")
    return x


def _column(data) -> np.ndarray:
    if isinstance(data, Dataset):
        if len(data.names) == 0:
            raise DataError("cannot train on an empty dataset")
        arr = data.numeric()
        if arr.shape[1] != 1:
            raise DataError(f"fit1d expects one numeric column, got {arr.shape[1]}")
        return arr[:, 0]
    return np.asarray(data, dtype=float)


def mass(net: MonotoneNet, lo: float, hi: float) -> float:
    y_lo, _ = forward_cdf(net, lo)
    y_hi, _ = forward_cdf(net, hi)
    return y_hi - y_lo


def normalization_checks(net: MonotoneNet, report: RunReport, lo: float, hi: float,
                         n_panels: int = 20000) -> None:
    m = mass(net, lo, hi)
    report.add_check("flow1d.mass_10sigma", "y(hi)-y(lo)", m, [0.99, 1.0], 0.99 <= m <= 1.0)
    q = quadrature(lambda x: density(net, x), lo, hi, n_panels)
    report.add_check("flow1d.ftc", "|quad(dydx)-mass|", abs(q - m), 1e-6, abs(q - m) <= 1e-6)


def train_1d(data, config: TrainConfig | None = None) -> tuple[MonotoneNet, RunReport]:
    """Fit a ``MonotoneNet`` by minibatch descent on the mean of -ln(dy/dx).

    ``config.model`` keys: ``hidden`` (list of widths, default [16, 16]) and
    ``activation`` (default "sigmoid").
    """
    config = config or TrainConfig()
    x = _validate(_column(data))
    mean, std = float(x.mean()), float(x.std())
    report = RunReport("fit1d", config.to_dict())
    start = time.perf_counter()
    net = MonotoneNet.init(make_rng(config.seed, "init"),
                           hidden=tuple(config.model.get("hidden", (16, 16))),
                           activation=config.model.get("activation", "sigmoid"),
                           mean=mean, std=std)
    u = torch.tensor((x - mean) / std)
    clamps = [0]

    def loss_fn(tp, idx):
        ld = log_density_std(net, u[idx], tp)
        clamps[0] += int((ld < LOG_TINY).sum())
        return -torch.clamp(ld, min=LOG_TINY).mean()

    params = fit(net.params(), loss_fn, x.size, config, report, make_rng(config.seed, "batches"))
    net = net.with_params(params)
    report.bump("clamps", clamps[0])
    # Reported losses are on the standardized scale; shift to data units.
    report.losses = [v + math.log(std) for v in report.losses]
    report.extra["final_nll"] = mean_nll(net, x)
    normalization_checks(net, report, mean - 10 * std, mean + 10 * std)
    report.wall_time = time.perf_counter() - start
    return net, report


def sample(net: MonotoneNet, n: int, rng: np.random.Generator, iters: int = 200) -> np.ndarray:
    """Inverse-CDF sampling by vectorized bisection on y."""
    target = rng.uniform(size=n)
    lo = np.full(n, -1.0)
    hi = np.full(n, 1.0)
    # Widen the bracket until it contains every target quantile.
    for _ in range(200):
        y_lo, _ = forward_cdf(net, net.mean + net.std * lo)
        y_hi, _ = forward_cdf(net, net.mean + net.std * hi)
        low_bad, high_bad = y_lo > target, y_hi < target
        if not (low_bad.any() or high_bad.any()):
            break
        lo[low_bad] *= 2.0
        hi[high_bad] *= 2.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        y_mid, _ = forward_cdf(net, net.mean + net.std * mid)
        below = y_mid < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return net.mean + net.std * 0.5 * (lo + hi)
