"""Density models normalized by a time evolution of coupled nodes.

Linear model: da/dt = W a + bias with zero-diagonal W, so det exp(WT) = 1 and
Phi(a(0)) = exp(-|a(T)|^2) / pi^(n/2) integrates to one over R^n.

Nonlinear model: states live in (0,1)^n and evolve by explicit Euler steps

    a_i <- a_i + (sum_j W_ij a_j + b_i(a_i)) dt,
    b_i(a) = t0_i - t1_i ln a + t2_i ln(1 - a) + sum_k poly_ik a^(k+1),

with t1, t2 > 0 so b_i diverges with opposite signs at the two ends.  Phi is
approximated by the product over steps and nodes of (1 + b_i'(a_i) dt), the
diagonal part of each step's Jacobian.
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
from probe.errors import DataError, NumericError, StiffnessError
from probe.flow1d import inverse_positive, positive
from probe.numeric.expm import matrix_exp
from probe.training import Stepper, to_torch

MAX_HALVINGS = 20
MAX_SUBSTEPS = 4096
DELTA = 1e-3


def _offdiag_to_matrix(w_off, n: int):
    """Row-major off-diagonal entries -> n x n matrix with exact zero diagonal."""
    rows, cols = np.nonzero(~np.eye(n, dtype=bool))
    if isinstance(w_off, torch.Tensor):
        w = torch.zeros((n, n), dtype=w_off.dtype)
        w = w.index_put((torch.tensor(rows), torch.tensor(cols)), w_off)
        return w
    w = np.zeros((n, n))
    w[rows, cols] = w_off
    return w


def _matrix_to_offdiag(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    return w[~np.eye(w.shape[0], dtype=bool)]


# -- linear model -------------------------------------------------------------

@dataclass
class LinearTimeModel:
    """``w_off`` holds the n(n-1) off-diagonal weights row by row; the
    diagonal is not a parameter at all."""

    n: int
    w_off: np.ndarray
    bias: np.ndarray
    T: float = 1.0

    def __post_init__(self):
        self.w_off = np.asarray(self.w_off, dtype=float).reshape(-1)
        self.bias = np.asarray(self.bias, dtype=float).reshape(-1)
        if self.w_off.size != self.n * (self.n - 1) or self.bias.size != self.n:
            raise ValueError("parameter sizes do not match n")
        if not self.T > 0:
            raise ValueError("horizon T must be positive")

    @classmethod
    def from_matrix(cls, w, bias, T: float = 1.0) -> "LinearTimeModel":
        w = np.asarray(w, dtype=float)
        if np.any(np.diag(w) != 0):
            raise ValueError("self-coupling is not representable: W must have a zero diagonal")
        return cls(w.shape[0], _matrix_to_offdiag(w), bias, T)

    @classmethod
    def random(cls, n: int, rng, scale: float = 0.5, T: float = 1.0) -> "LinearTimeModel":
        return cls(n, rng.normal(0.0, scale, n * (n - 1)), rng.normal(0.0, scale, n), T)

    @property
    def W(self) -> np.ndarray:
        return _offdiag_to_matrix(self.w_off, self.n)

    def propagator(self) -> np.ndarray:
        return matrix_exp(self.W, self.T)

    def to_dict(self) -> dict:
        return {"n": self.n, "W": self.w_off.tolist(), "bias": self.bias.tolist(), "T": self.T}


def evolve_linear_exact(model: LinearTimeModel, a0) -> np.ndarray:
    """a(T) = exp(WT) a0 + sum_{k>=1} W^(k-1) T^k / k! bias.

    Both terms come from one exponential of the augmented matrix
    [[W, bias], [0, 0]], so singular W needs no special case.
    """
    a0 = np.asarray(a0, dtype=float)
    if not np.all(np.isfinite(a0)):
        raise NumericError("evolve_linear_exact: non-finite initial state")
    n = model.n
    aug = np.zeros((n + 1, n + 1))
    aug[:n, :n] = model.W
    aug[:n, n] = model.bias
    e = matrix_exp(aug, model.T)
    return a0 @ e[:n, :n].T + e[:n, n]


def _time_grid(T: float, dt: float) -> np.ndarray:
    if not dt > 0 or dt > T * (1 + 1e-12):
        raise ValueError(f"step size must satisfy 0 < dt <= T, got dt={dt}, T={T}")
    steps = max(1, math.ceil(T / dt - 1e-9))
    times = np.minimum(np.arange(steps + 1) * dt, T)
    times[-1] = T
    return times


@dataclass
class Trajectory:
    """``states`` is (B, steps+1, n).  ``log_factors`` and ``continuum`` are
    (B, steps, n): per step, sum over accepted sub-steps of ln(1 + b' h) and
    of b' h.  Both are ``None`` for the linear model."""

    times: np.ndarray
    states: np.ndarray
    log_factors: np.ndarray | None = None
    continuum: np.ndarray | None = None
    halvings: int = 0

    def to_csv(self, path, sample: int = 0) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("t,node,value\n")
            for k, t in enumerate(self.times):
                for i, v in enumerate(self.states[sample, k]):
                    fh.write(f"{float(t)!r},{i},{float(v)!r}\n")


def evolve_linear_euler(model: LinearTimeModel, a0, dt: float) -> Trajectory:
    """Explicit Euler; the last step is shortened to land exactly on T."""
    a = np.atleast_2d(np.asarray(a0, dtype=float))
    times = _time_grid(model.T, dt)
    w = model.W
    states = [a]
    for h in np.diff(times):
        a = a + h * (a @ w.T + model.bias)
        states.append(a)
    return Trajectory(times, np.stack(states, axis=1))


def linear_loss(model: LinearTimeModel, a0) -> tuple[float, np.ndarray]:
    """(-ln Phi, per-node terms a_i(T)^2).  The total adds (n/2) ln pi."""
    aT = evolve_linear_exact(model, a0)
    terms = aT * aT
    return math.fsum(terms) + 0.5 * model.n * math.log(math.pi), terms


def linear_phi(model: LinearTimeModel, a0) -> float:
    """exp(-|a(T)|^2) / pi^(n/2)."""
    return math.exp(-linear_loss(model, a0)[0])


def linear_mc_normalization(model: LinearTimeModel, n_samples: int, rng,
                            scale: float = 3.0) -> tuple[float, float]:
    """Importance-sampling estimate of the integral of Phi over R^n.

    Proposal N(c, scale^2 I) centred on the preimage c of the origin.
    Returns (estimate, standard error).
    """
    n = model.n
    c = np.linalg.solve(model.propagator(), -evolve_linear_exact(model, np.zeros(n)))
    z = rng.normal(size=(n_samples, n))
    a0 = c + scale * z
    aT = evolve_linear_exact(model, a0)
    log_phi = -np.sum(aT * aT, axis=1) - 0.5 * n * math.log(math.pi)
    log_q = (-0.5 * np.sum(z * z, axis=1) - n * math.log(scale)
             - 0.5 * n * math.log(2 * math.pi))
    w = np.exp(log_phi - log_q)
    return float(w.mean()), float(w.std(ddof=1) / math.sqrt(n_samples))


@dataclass
class LinearityReport:
    residual: float
    tolerance: float
    passed: bool


def check_linearity(model, rng=None, trials: int = 20, tolerance: float = 1e-9,
                    radius: float = 0.1) -> LinearityReport:
    """Superposition residual of g(u) = f(c + u) - f(c) where f maps a(0) to a(T).

    The shift by f(c) removes the constant (bias) part, so g is exactly linear
    for the linear model.  For the nonlinear model c is the cube centre and
    u, v are kept small enough to stay inside the cube.
    """
    rng = rng or np.random.default_rng(0)
    if isinstance(model, LinearTimeModel):
        def f(a):
            return evolve_linear_exact(model, a)
        c = np.zeros(model.n)
    else:
        def f(a):
            return evolve_nonlinear(model, a).states[:, -1][0]
        c = np.full(model.n, 0.5)
    fc = f(c)
    worst = 0.0
    for _ in range(trials):
        u, v = rng.uniform(-radius, radius, size=(2, model.n))
        al, be = rng.uniform(0.0, 1.0, size=2)
        lhs = f(c + al * u + be * v) - fc
        rhs = al * (f(c + u) - fc) + be * (f(c + v) - fc)
        worst = max(worst, float(np.linalg.norm(lhs - rhs)))
    return LinearityReport(worst, tolerance, worst <= tolerance)


# -- nonlinear model -----------------------------------------------------------

@dataclass
class NonlinearTimeModel:
    """Zero-diagonal coupling plus per-node boundary functions.

    ``t1_free``/``t2_free`` map to t1, t2 through softplus plus a floor.
    ``poly[i, k]`` multiplies a^(k+1).  ``lo``/``hi`` record the affine data
    scaling into (DELTA, 1 - DELTA) for the first ``m`` nodes.
    """

    n: int
    m: int
    w_off: np.ndarray
    t0: np.ndarray
    t1_free: np.ndarray
    t2_free: np.ndarray
    poly: np.ndarray
    T: float = 1.0
    dt: float = 1e-2
    lo: np.ndarray = field(default=None, repr=False)
    hi: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.w_off = np.asarray(self.w_off, dtype=float).reshape(-1)
        for name in ("t0", "t1_free", "t2_free"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).reshape(-1))
        self.poly = np.asarray(self.poly, dtype=float).reshape(self.n, -1)
        if not 1 <= self.m <= self.n:
            raise ValueError(f"need 1 <= m <= n, got m={self.m}, n={self.n}")
        if self.w_off.size != self.n * (self.n - 1) or self.t0.size != self.n:
            raise ValueError("parameter sizes do not match n")
        if not self.T > 0 or not 0 < self.dt <= self.T:
            raise ValueError("need T > 0 and 0 < dt <= T")
        self.lo = np.zeros(self.m) if self.lo is None else np.asarray(self.lo, float)
        self.hi = np.ones(self.m) if self.hi is None else np.asarray(self.hi, float)

    @classmethod
    def init(cls, n: int, m: int, rng, degree: int = 3, coupling: float = 0.01,
             boundary: float = 0.02, push: float = 0.1, **kw) -> "NonlinearTimeModel":
        """Random weak coupling, t1 = t2 = ``boundary`` and a linear term that
        pushes each node outward by ``push`` at the ends of (0,1).

        With push/boundary around 5 the attracting points sit about e^-5 from
        each end, close enough that little of the cube is left uncovered and
        far enough that Euler steps near the ends stay stable.
        """
        if degree < 1:
            raise ValueError("polynomial degree must be at least 1")
        poly = np.zeros((n, degree))
        poly[:, 0] = 2.0 * push
        return cls(n, m, rng.normal(0.0, coupling, n * (n - 1)), np.full(n, -push),
                   inverse_positive(np.full(n, boundary)), inverse_positive(np.full(n, boundary)),
                   poly, **kw)

    @classmethod
    def simple(cls, n: int = 1, t0=0.0, t1=1.0, t2=1.0, degree: int = 3, **kw):
        """Uncoupled model with the given boundary constants and no polynomial."""
        return cls(n, n, np.zeros(n * (n - 1)), np.full(n, t0),
                   inverse_positive(np.full(n, t1)), inverse_positive(np.full(n, t2)),
                   np.zeros((n, degree)), **kw)

    @property
    def W(self) -> np.ndarray:
        return _offdiag_to_matrix(self.w_off, self.n)

    def params(self) -> dict:
        return {"w_off": self.w_off, "t0": self.t0, "t1_free": self.t1_free,
                "t2_free": self.t2_free, "poly": self.poly}

    def with_params(self, p: dict) -> "NonlinearTimeModel":
        return NonlinearTimeModel(self.n, self.m, p["w_off"], p["t0"], p["t1_free"],
                                  p["t2_free"], p["poly"], self.T, self.dt, self.lo, self.hi)

    def to_dict(self) -> dict:
        return {"n": self.n, "m": self.m, "W": self.w_off.tolist(),
                "boundary": [{"t0": float(self.t0[i]), "t1_free": float(self.t1_free[i]),
                              "t2_free": float(self.t2_free[i]), "poly": self.poly[i].tolist()}
                             for i in range(self.n)],
                "T": self.T, "dt": self.dt,
                "scale": {"lo": self.lo.tolist(), "hi": self.hi.tolist(), "delta": DELTA}}

    @classmethod
    def from_dict(cls, d: dict) -> "NonlinearTimeModel":
        b = d["boundary"]
        scale = d.get("scale", {})
        return cls(d["n"], d["m"], d["W"], [x["t0"] for x in b], [x["t1_free"] for x in b],
                   [x["t2_free"] for x in b], [x["poly"] for x in b], d["T"], d["dt"],
                   scale.get("lo"), scale.get("hi"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def scale_data(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return DELTA + (1 - 2 * DELTA) * (x - self.lo) / (self.hi - self.lo)

    def data_jacobian(self) -> float:
        """d(scaled)/d(raw) volume factor for the m data coordinates."""
        return float(np.prod((1 - 2 * DELTA) / (self.hi - self.lo)))


def _log(x):
    return torch.log(x) if isinstance(x, torch.Tensor) else np.log(x)


def boundary(p: dict, a):
    """b(a) per node; ``a`` is (B, n)."""
    t1, t2 = positive(p["t1_free"]), positive(p["t2_free"])
    out = p["t0"] - t1 * _log(a) + t2 * _log(1 - a)
    power = a
    for k in range(p["poly"].shape[1]):
        out = out + p["poly"][:, k] * power
        power = power * a
    return out


def boundary_prime(p: dict, a):
    """b'(a) = -t1/a - t2/(1-a) + poly'(a)."""
    t1, t2 = positive(p["t1_free"]), positive(p["t2_free"])
    out = -t1 / a - t2 / (1 - a)
    power = a * 0 + 1
    for k in range(p["poly"].shape[1]):
        out = out + (k + 1) * p["poly"][:, k] * power
        power = power * a
    return out


def _where_rows(mask, new, old):
    if isinstance(old, torch.Tensor):
        return torch.where(torch.as_tensor(mask)[:, None], new, old)
    return np.where(mask[:, None], new, old)


class _Stats:
    halvings = 0


def _euler(p: dict, n: int, a, h: float):
    w = _offdiag_to_matrix(p["w_off"], n)
    bp = boundary_prime(p, a)
    return a + h * (a @ w.T + boundary(p, a)), 1 + bp * h, bp


def _rejected(a_row, fac_row) -> np.ndarray:
    if isinstance(a_row, torch.Tensor):
        a_row, fac_row = a_row.detach().numpy(), fac_row.detach().numpy()
    return (a_row <= 0) | (a_row >= 1) | (fac_row <= 0) | ~np.isfinite(a_row)


def _summary(a_row) -> str:
    if isinstance(a_row, torch.Tensor):
        a_row = a_row.detach().numpy()
    return np.array2string(np.asarray(a_row).reshape(-1), precision=17)


def _substeps(p: dict, n: int, a_row, h: float, t: float, stats: _Stats):
    """Cover [t, t+h] for one (1, n) state with steps halved until accepted.

    After an accepted sub-step the size doubles again (never above the time
    left), so a transient stiff spot does not slow the rest of the interval.
    """
    remaining, level = h, 1
    log_fac = cont = None
    accepted = 0
    while remaining > 1e-12 * h:
        s = min(h / 2 ** level, remaining)
        a_try, fac, bp = _euler(p, n, a_row, s)
        bad = _rejected(a_try, fac)
        if bad.any():
            level += 1
            stats.halvings += 1
            if level > MAX_HALVINGS:
                node = int(np.nonzero(bad.reshape(-1))[0][0])
                raise StiffnessError(f"halving budget exhausted at t={t:.6g}, node {node} "
                                     f"(state {_summary(a_row)}, step {s / 2:.3g} "
                                     f"after {MAX_HALVINGS} halvings)")
            continue
        a_row = a_try
        lf, c = _log(fac), bp * s
        log_fac = lf if log_fac is None else log_fac + lf
        cont = c if cont is None else cont + c
        remaining -= s
        t += s
        accepted += 1
        if accepted > MAX_SUBSTEPS:
            raise StiffnessError(f"more than {MAX_SUBSTEPS} sub-steps needed near t={t:.6g} "
                                 f"(state {_summary(a_row)}, step {s:.3g})")
        level = max(level - 1, 0)
    return a_row, log_fac, cont


def _advance(p: dict, n: int, a, h: float, t: float, stats: _Stats):
    """One guarded Euler step of size h; returns (a_new, log_factor, b' h).

    Rows whose proposal leaves the open cube, or whose diagonal factor
    1 + b' h is not positive, are redone with halved sub-steps.
    """
    a_new, fac, bp = _euler(p, n, a, h)
    bad = _rejected(a_new, fac).any(axis=1)
    log_fac = _log(_where_rows(bad, fac * 0 + 1, fac))
    cont = bp * h
    if not bad.any():
        return a_new, log_fac, cont
    idx = np.nonzero(bad)[0]
    parts = [_substeps(p, n, a[i:i + 1], h, t, stats) for i in idx]
    if isinstance(a, torch.Tensor):
        ti = torch.as_tensor(idx)
        a_new = a_new.index_put((ti,), torch.cat([q[0] for q in parts]))
        log_fac = log_fac.index_put((ti,), torch.cat([q[1] for q in parts]))
        cont = cont.index_put((ti,), torch.cat([q[2] for q in parts]))
    else:
        a_new, log_fac, cont = a_new.copy(), log_fac.copy(), cont.copy()
        a_new[idx] = np.concatenate([q[0] for q in parts])
        log_fac[idx] = np.concatenate([q[1] for q in parts])
        cont[idx] = np.concatenate([q[2] for q in parts])
    return a_new, log_fac, cont


def _initial_states(model: NonlinearTimeModel, a0):
    if isinstance(a0, InputAssignment):
        a0 = a0.a0
    if isinstance(a0, torch.Tensor):
        a = a0 if a0.dim() == 2 else a0[None, :]
        bad = bool(((a <= 0) | (a >= 1)).any())
    else:
        a = np.atleast_2d(np.asarray(a0, dtype=float))
        bad = bool(np.any((a <= 0) | (a >= 1)))
    if a.shape[1] != model.n:
        raise ValueError(f"expected {model.n} initial coordinates, got {a.shape[1]}")
    if bad:
        raise DataError("initial states must lie in the open unit cube")
    return a


def rollout(model: NonlinearTimeModel, a0, p: dict | None = None, keep_states: bool = True):
    """Guarded Euler rollout; works on numpy arrays or, with torch ``p``, tensors.

    Returns (states list, log-factor list, continuum list, halvings).
    """
    p = model.params() if p is None else p
    a = _initial_states(model, a0)
    times = _time_grid(model.T, model.dt)
    stats = _Stats()
    states, logs, conts = [a], [], []
    for k, h in enumerate(np.diff(times)):
        a, lf, c = _advance(p, model.n, a, float(h), float(times[k]), stats)
        logs.append(lf)
        conts.append(c)
        if keep_states:
            states.append(a)
    return times, states, logs, conts, stats.halvings


def evolve_nonlinear(model: NonlinearTimeModel, a0) -> Trajectory:
    """Euler rollout with adaptive halving; accepted states stay interior."""
    times, states, logs, conts, halvings = rollout(model, a0)
    return Trajectory(times, np.stack(states, axis=1), np.stack(logs, axis=1),
                      np.stack(conts, axis=1), halvings)


@dataclass
class NonlinearNLL:
    discrete: np.ndarray     # -sum ln(1 + b' dt), per sample
    continuum: np.ndarray    # -sum b' dt, per sample
    local: np.ndarray        # (B, steps, n) table of -b'(a_i(t)) per unit time


def nonlinear_nll(trajectory: Trajectory, model: NonlinearTimeModel | None = None) -> NonlinearNLL:
    """Discrete and continuum negative log densities of a stored rollout.

    ``local[b, k, i] * dt_k`` summed over (k, i) is the continuum total,
    term for term.
    """
    if trajectory.log_factors is None:
        raise ValueError("trajectory has no stored diagonal factors")
    dts = np.diff(trajectory.times)
    local = -trajectory.continuum / dts[None, :, None]
    return NonlinearNLL(-trajectory.log_factors.sum(axis=(1, 2)),
                        -trajectory.continuum.sum(axis=(1, 2)), local)


@dataclass
class InputAssignment:
    """a(0) = (x_1..x_m, r_{m+1}..r_n) with r ~ Uniform(0,1)."""

    m: int
    x: np.ndarray
    r: np.ndarray
    seed: int | None = None

    @property
    def a0(self) -> np.ndarray:
        x = np.atleast_2d(self.x)
        r = np.atleast_2d(self.r)
        return np.concatenate([x, r.reshape(x.shape[0], -1)], axis=1)

    @classmethod
    def draw(cls, x, n: int, rng, seed: int | None = None) -> "InputAssignment":
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return cls(x.shape[1], x, rng.uniform(size=(x.shape[0], n - x.shape[1])), seed)


def recover_input_density(model: NonlinearTimeModel, x_grid, n_mc: int = 256,
                          rng=None) -> np.ndarray:
    """Phi(x) as the mean of Phi(x, r) over ``n_mc`` auxiliary draws.

    With Uniform(0,1) auxiliaries the divisor prod P(r_i) is 1.  The grid is
    in scaled (0,1) coordinates; the same draws are reused at every point.
    """
    x_grid = np.asarray(x_grid, dtype=float)
    x_grid = x_grid[:, None] if x_grid.ndim == 1 else x_grid
    n_aux = model.n - model.m
    if n_aux == 0:
        return np.exp(-nonlinear_nll(evolve_nonlinear(model, x_grid)).discrete)
    rng = rng or make_rng(0, "recover")
    r = rng.uniform(size=(n_mc, n_aux))
    out = np.empty(len(x_grid))
    for g, x in enumerate(x_grid):
        a0 = np.concatenate([np.repeat(x[None, :], n_mc, axis=0), r], axis=1)
        _, _, logs, _, _ = rollout(model, a0, keep_states=False)
        out[g] = np.mean(np.exp(np.sum(logs, axis=0).sum(axis=1)))
    return out


# -- training -----------------------------------------------------------------

GLOBAL, SEQUENTIAL = "global", "sequential_local"


def _scaled_data(data, config: TrainConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(data, Dataset):
        cols = config.data.get("inputs")
        x = data.numeric(cols)
    else:
        x = np.asarray(data, dtype=float)
        x = x[:, None] if x.ndim == 1 else x
    if x.shape[0] == 0:
        raise DataError("cannot train on an empty dataset")
    if not np.all(np.isfinite(x)):
        raise DataError("training data contains non-finite values")
    lo, hi = x.min(axis=0), x.max(axis=0)
    if np.any(hi <= lo):
        raise DataError("zero-variance input column")
    return x, lo, hi


def _mean_nll(model, a0, p) -> torch.Tensor:
    _, _, logs, _, _ = rollout(model, a0, p, keep_states=False)
    return -torch.stack(logs, dim=1).sum(dim=(1, 2)).mean()


def evaluate_nll(model: NonlinearTimeModel, xs: np.ndarray, seed: int) -> float:
    """Mean discrete NLL of scaled data with a fixed auxiliary draw."""
    a0 = InputAssignment.draw(xs, model.n, make_rng(seed, "eval")).a0
    nll = nonlinear_nll(evolve_nonlinear(model, a0)).discrete
    return math.fsum(nll) / len(nll)


def train_time_model(data, config: TrainConfig | None = None,
                     mode: str = GLOBAL) -> tuple[NonlinearTimeModel, RunReport]:
    """Fit the nonlinear model to m data columns.

    ``config.model`` keys: ``n`` (default 2m), ``T`` (1.0), ``dt`` (1e-2),
    ``degree`` (3), ``boundary`` (initial t1 = t2, 0.02), ``push`` (0.1),
    ``coupling`` (0.01).  Auxiliaries are
    redrawn for every presentation.  ``sequential_local`` builds each update
    from the per-slice terms alone, with every slice's incoming state
    treated as a constant.
    """
    if mode not in (GLOBAL, SEQUENTIAL):
        raise ValueError(f"unknown mode {mode!r}")
    config = config or TrainConfig()
    x, lo, hi = _scaled_data(data, config)
    m = x.shape[1]
    mc = config.model
    model = NonlinearTimeModel.init(int(mc.get("n", 2 * m)), m, make_rng(config.seed, "init"),
                                    degree=int(mc.get("degree", 3)),
                                    boundary=float(mc.get("boundary", 0.02)),
                                    push=float(mc.get("push", 0.1)),
                                    coupling=float(mc.get("coupling", 0.01)),
                                    T=float(mc.get("T", 1.0)), dt=float(mc.get("dt", 1e-2)),
                                    lo=lo, hi=hi)
    xs = model.scale_data(x)
    report = RunReport("evolve", config.to_dict(), mode=mode)
    start = time.perf_counter()
    report.extra["initial_nll"] = evaluate_nll(model, xs, config.seed)
    stepper = Stepper(model.params(), config)
    aux = make_rng(config.seed, "aux")
    batches = make_rng(config.seed, "batches")
    n_samples = xs.shape[0]
    batch = config.batch_size if 0 < config.batch_size < n_samples else n_samples
    times = _time_grid(model.T, model.dt)
    prev = None
    for epoch in range(config.epochs):
        order = batches.permutation(n_samples) if batch < n_samples else np.arange(n_samples)
        parts = []
        for lo_i in range(0, n_samples, batch):
            idx = order[lo_i:lo_i + batch]
            a0 = torch.tensor(InputAssignment.draw(xs[idx], model.n, aux).a0)
            try:
                if mode == GLOBAL:
                    value = stepper.step(_mean_nll(model, a0, stepper.tparams))
                else:
                    value = _sequential_pass(model, stepper, a0, times)
            except (NumericError, StiffnessError) as exc:
                raise type(exc)(f"epoch {epoch}: {exc}") from None
            parts.append(value * len(idx))
        epoch_loss = math.fsum(parts) / n_samples
        report.losses.append(epoch_loss)
        if config.tol and prev is not None and abs(prev - epoch_loss) < config.tol:
            break
        prev = epoch_loss
    model = model.with_params(stepper.params())
    report.extra["final_nll"] = evaluate_nll(model, xs, config.seed)
    # Scaled-unit NLL plus the affine scaling term gives raw-unit NLL.
    report.extra["data_log_jacobian"] = math.log(model.data_jacobian())
    report.wall_time = time.perf_counter() - start
    return model, report


def _sequential_pass(model: NonlinearTimeModel, stepper: Stepper, a0: torch.Tensor,
                     times: np.ndarray) -> float:
    # Each slice sees its incoming state as a constant, so no gradient flows
    # across slices; the per-slice gradients are summed into one update.
    a = a0
    terms = []
    stats = _Stats()
    p = stepper.tparams
    for k, h in enumerate(np.diff(times)):
        a, log_fac, _ = _advance(p, model.n, a.detach(), float(h), float(times[k]), stats)
        terms.append(log_fac.sum(dim=1))
    return stepper.step(-torch.stack(terms, dim=1).sum(dim=1).mean())


def rollout_loss_and_grad(model: NonlinearTimeModel, a0) -> tuple[float, dict]:
    """Mean discrete NLL and its parameter gradient by reverse mode through the rollout."""
    tp = to_torch(model.params())
    loss = _mean_nll(model, torch.tensor(np.asarray(a0, dtype=float)), tp)
    loss.backward()
    return float(loss.detach()), {k: v.grad.numpy().copy() for k, v in tp.items()}
