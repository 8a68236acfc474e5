"""Multivariate density estimation with stacked lower-triangular monotone blocks.

Each block maps R^n onto (0,1)^n with a lower-triangular Jacobian whose
diagonal is strictly positive.  Coordinate j of block i is a mixture of K
logistic CDFs whose locations depend on the earlier coordinates::

    pre[k, j] = sum_{l<j} L[k, j, l] u[l] + D[k, j] u[j] + bias[k, j]
    F[j]      = sum_k w[k, j] sigmoid(pre[k, j]),   w = softmax over k

with D positive (softplus plus a floor) and the strictly lower entries of L
unconstrained.  Blocks are chained in logit space, u_{i+1} = logit(F), and the
final output is b = F of the last block.  Measured on the (0,1) values
c_i = sigmoid(u_i), every block is a triangular map of the cube (or of R^n for
the first block) onto the cube, so the per-block diagonal derivatives
multiply to the density and each block's localized loss is itself the
negative log of a normalized density of that block's input.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.special import logsumexp

from probe.config import RunReport, TrainConfig, make_rng
from probe.data import Dataset
from probe.errors import DataError, NumericError, UnderflowError
from probe.flow1d import LOG_TINY, TINY, inverse_positive, positive
from probe.numeric import dual as D
from probe.numeric.calculus import quadrature, simpson_2d
from probe.training import fit

GLOBAL, LOCAL = "global", "local"
LAYER_KEYS = ("tri_weights", "diag_free", "bias", "mix_logits")


def _strict_lower(w, n):
    mask = np.tril(np.ones((n, n)), -1)
    if isinstance(w, torch.Tensor):
        mask = torch.tensor(mask, dtype=w.dtype)
    return w * mask


def _diag_embed(d):
    if isinstance(d, torch.Tensor):
        return torch.diag_embed(d)
    return d[..., :, None] * np.eye(d.shape[-1])


def _lse_k(x):
    """logsumexp over the mixture axis (axis 1 of a (B, K, n) array)."""
    if isinstance(x, D.Dual):
        m = np.max(D.value_of(x), axis=1)
        return D.log(D.linear(D.exp(x - m[:, None, :]), lambda v: v.sum(axis=1))) + m
    if isinstance(x, torch.Tensor):
        return torch.logsumexp(x, dim=1)
    return logsumexp(x, axis=1)


def _log_softmax_k(z):
    if isinstance(z, torch.Tensor):
        return torch.log_softmax(z, dim=0)
    return z - logsumexp(z, axis=0)


def block(u, lp: dict, n: int, shift=None, first: bool = True, with_logdiag: bool = True):
    """One block on logit-space input ``u`` of shape (B, n), plain or ``Dual``.

    Returns (logit of F, log diagonal).  For blocks after the first the
    diagonal is taken with respect to c = sigmoid(u), which adds
    -ln sigmoid'(u).
    """
    xp = torch if isinstance(D.value_of(u), torch.Tensor) else np
    diag_d = positive(lp["diag_free"])
    m = _strict_lower(lp["tri_weights"], n) + _diag_embed(diag_d)
    pre = D.linear(u, lambda v: xp.einsum("kjl,bl->bkj", m, v)) + lp["bias"]
    if shift is not None:
        pre = pre + shift
    logw = _log_softmax_k(lp["mix_logits"])
    log_f = _lse_k(logw - D.softplus(-pre))
    log_1mf = _lse_k(logw - D.softplus(pre))
    out = log_f - log_1mf
    if not with_logdiag:
        return out, None
    pv = D.value_of(pre)
    ld = _lse_k(logw + D.log(diag_d) + D.log_sigmoid_prime(pv))
    if not first:
        ld = ld - D.log_sigmoid_prime(D.value_of(u))
    return out, ld


@dataclass
class TriangularFlowNet:
    """Equal-width triangular flow on the standardized, reordered domain.

    ``layers`` holds ``depth + 1`` blocks.  ``mean``, ``std`` and ``order``
    map raw data columns into the net domain.
    """

    n: int
    layers: list = field(repr=False)
    mean: np.ndarray = field(default=None, repr=False)
    std: np.ndarray = field(default=None, repr=False)
    order: tuple = None

    def __post_init__(self):
        self.layers = [{k: np.asarray(lp[k], dtype=float) for k in LAYER_KEYS}
                       for lp in self.layers]
        if not self.layers:
            raise ValueError("a flow needs at least one block")
        self.mean = np.zeros(self.n) if self.mean is None else np.asarray(self.mean, float)
        self.std = np.ones(self.n) if self.std is None else np.asarray(self.std, float)
        if np.any(self.std <= 0):
            raise ValueError("standardization std must be positive")
        self.order = tuple(range(self.n)) if self.order is None else tuple(self.order)
        if sorted(self.order) != list(range(self.n)):
            raise ValueError(f"order must be a permutation of 0..{self.n - 1}")

    @property
    def depth(self) -> int:
        return len(self.layers) - 1

    @property
    def units(self) -> int:
        return self.layers[0]["bias"].shape[0]

    @classmethod
    def init(cls, n: int, rng: np.random.Generator, depth: int = 2, units: int = 8,
             **kw) -> "TriangularFlowNet":
        """First block spread over the standardized range; later blocks start
        near the identity in logit space (diagonal close to 1)."""
        layers = []
        for i in range(depth + 1):
            if i == 0:
                d_eff = rng.uniform(1.0, 3.0, size=(units, n))
                centers = rng.uniform(-2.5, 2.5, size=(units, n))
                tri = rng.normal(0.0, 0.3, size=(units, n, n))
            else:
                d_eff = np.exp(rng.normal(0.0, 0.1, size=(units, n)))
                centers = rng.normal(0.0, 0.3, size=(units, n))
                tri = rng.normal(0.0, 0.05, size=(units, n, n))
            layers.append({
                "tri_weights": _strict_lower(tri, n),
                "diag_free": inverse_positive(d_eff),
                "bias": -d_eff * centers,
                "mix_logits": np.zeros((units, n)),
            })
        return cls(n, layers, **kw)

    def params(self) -> dict:
        return {f"{i}.{k}": v for i, lp in enumerate(self.layers) for k, v in lp.items()}

    def with_params(self, p: dict) -> "TriangularFlowNet":
        layers = [{k: np.asarray(p[f"{i}.{k}"]) for k in LAYER_KEYS}
                  for i in range(len(self.layers))]
        return TriangularFlowNet(self.n, layers, self.mean, self.std, self.order)

    def to_dict(self) -> dict:
        return {"n": self.n, "depth": self.depth,
                "layers": [{k: v.tolist() for k, v in lp.items()} for lp in self.layers],
                "conditioner": None,
                "standardize": [{"mean": float(m), "std": float(s)}
                                for m, s in zip(self.mean, self.std)],
                "order": list(self.order)}

    @classmethod
    def from_dict(cls, d: dict) -> "TriangularFlowNet":
        st = d["standardize"]
        return cls(d["n"], d["layers"], [s["mean"] for s in st], [s["std"] for s in st],
                   d.get("order"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def standardize(self, a) -> np.ndarray:
        """Raw data rows (B, n) -> net-domain rows, reordered."""
        a = np.atleast_2d(np.asarray(a, dtype=float))
        return ((a - self.mean) / self.std)[:, list(self.order)]


def run_layers(net: TriangularFlowNet, u, p: dict | None = None, shifts=None,
               detach_inputs: bool = False, with_logdiag: bool = True):
    """Forward through every block; returns (final logit, [logdiag per block])."""
    p = net.params() if p is None else p
    logdiags = []
    for i in range(len(net.layers)):
        if detach_inputs and isinstance(u, torch.Tensor):
            u = u.detach()
        lp = {k: p[f"{i}.{k}"] for k in LAYER_KEYS}
        shift = None if shifts is None else shifts[i]
        u, ld = block(u, lp, net.n, shift, first=(i == 0), with_logdiag=with_logdiag)
        logdiags.append(ld)
    return u, logdiags


def _batch(a) -> tuple[np.ndarray, bool]:
    a = np.asarray(a, dtype=float)
    single = a.ndim == 1
    return np.atleast_2d(a), single


def forward_flow(net: TriangularFlowNet, a):
    """Outputs in (0,1)^n and the [(depth+1) x n] per-block diagonal derivatives.

    ``a`` is one net-domain point (n,) or a batch (B, n); batched diagonals
    have shape (B, depth+1, n).
    """
    a, single = _batch(a)
    if a.shape[1] != net.n:
        raise ValueError(f"expected {net.n} coordinates, got {a.shape[1]}")
    if not np.all(np.isfinite(a)):
        raise NumericError("forward_flow: non-finite input")
    u, lds = run_layers(net, a)
    b = D.sigmoid(u)
    diag = np.exp(np.stack(lds, axis=1))
    return (b[0], diag[0]) if single else (b, diag)


def flow_map(net: TriangularFlowNet, upto: int | None = None):
    """The map a -> c on single points, through the first ``upto`` blocks
    (all by default); accepts ``Dual`` inputs."""
    k = len(net.layers) if upto is None else upto

    def f(a):
        u = D.linear(a, lambda v: np.atleast_2d(v))
        p = net.params()
        for i in range(k):
            lp = {key: p[f"{i}.{key}"] for key in LAYER_KEYS}
            u, _ = block(u, lp, net.n, first=(i == 0), with_logdiag=False)
        return D.linear(D.sigmoid(u), lambda v: v[0])
    return f


def block_map(net: TriangularFlowNet, i: int):
    """Block ``i`` alone as a map between its (0,1) input and output values
    (raw domain input for the first block)."""
    def f(c):
        u = D.linear(c, lambda v: np.atleast_2d(v))
        if i > 0:
            u = D.log(u) - D.log(1 - u)
        lp = {key: net.layers[i][key] for key in LAYER_KEYS}
        u, _ = block(u, lp, net.n, first=(i == 0), with_logdiag=False)
        return D.linear(D.sigmoid(u), lambda v: v[0])
    return f


def _log_diagonals(net: TriangularFlowNet, a) -> np.ndarray:
    a, _ = _batch(a)
    _, lds = run_layers(net, a)
    return np.stack(lds, axis=1)


@dataclass
class LocalLossTable:
    losses: np.ndarray  # [(depth+1) x n]
    total: float


def local_losses(net: TriangularFlowNet, a) -> LocalLossTable:
    """Entry (i, j) = -ln d c_{j;i+1} / d c_{j;i} at one point."""
    ld = _log_diagonals(net, np.asarray(a, dtype=float).reshape(1, -1))[0]
    if np.any(ld <= LOG_TINY):
        raise UnderflowError(f"a diagonal derivative fell below {TINY:g}")
    table = -ld
    return LocalLossTable(table, math.fsum(table.ravel()))


def nll_nd(net: TriangularFlowNet, a) -> float:
    """-sum of log diagonals, O(depth * n^2) with no determinant routine."""
    return local_losses(net, a).total


def batch_nll(net: TriangularFlowNet, a) -> np.ndarray:
    return -_log_diagonals(net, a).sum(axis=(1, 2))


def log_density(net: TriangularFlowNet, a_raw) -> np.ndarray:
    """Log density in raw data units for rows of ``a_raw``."""
    return -batch_nll(net, net.standardize(a_raw)) - float(np.sum(np.log(net.std)))


def autoregressive_conditionals(net: TriangularFlowNet, a) -> np.ndarray:
    """Composite diagonal per coordinate: the density of a_i given a_1..a_{i-1}.

    Values are in net-domain units; divide by ``std`` of the (reordered)
    column for raw units.
    """
    a, single = _batch(a)
    out = np.exp(_log_diagonals(net, a).sum(axis=1))
    return out[0] if single else out


# -- training -----------------------------------------------------------------

def _matrix(data, columns=None) -> np.ndarray:
    if isinstance(data, Dataset):
        return data.numeric(columns)
    arr = np.asarray(data, dtype=float)
    return arr[:, None] if arr.ndim == 1 else arr


def _check_matrix(x: np.ndarray, what: str) -> np.ndarray:
    if x.size == 0 or x.shape[0] == 0:
        raise DataError(f"{what}: empty dataset")
    if x.shape[1] < 1:
        raise DataError(f"{what}: needs at least one column")
    if not np.all(np.isfinite(x)):
        raise DataError(f"{what}: non-finite values")
    if np.any(x.std(axis=0) == 0):
        raise DataError(f"{what}: zero-variance input column")
    return x


def _torch_loss(net, u, tp, idx, mode, shifts=None):
    _, lds = run_layers(net, u[idx], tp, shifts=shifts, detach_inputs=(mode == LOCAL))
    ld = torch.stack(lds, dim=1)
    return -torch.clamp(ld, min=LOG_TINY).sum(dim=(1, 2)).mean()


def train_nd(data, config: TrainConfig | None = None, mode: str = GLOBAL,
             columns=None) -> tuple[TriangularFlowNet, RunReport]:
    """Fit a ``TriangularFlowNet``.

    ``mode="global"`` backpropagates the full negative log density.
    ``mode="local"`` detaches each layer's input, so every layer only sees
    gradients of its own localized terms.  ``config.model`` keys: ``depth``
    (2), ``units`` (8), ``order`` (column permutation).
    """
    if mode not in (GLOBAL, LOCAL):
        raise ValueError(f"unknown mode {mode!r}")
    config = config or TrainConfig()
    x = _check_matrix(_matrix(data, columns), "train_nd")
    n = x.shape[1]
    report = RunReport("fitnd", config.to_dict(), mode=mode)
    start = time.perf_counter()
    net = TriangularFlowNet.init(n, make_rng(config.seed, "init"),
                                 depth=int(config.model.get("depth", 2)),
                                 units=int(config.model.get("units", 8)),
                                 mean=x.mean(axis=0), std=x.std(axis=0),
                                 order=config.model.get("order"))
    u_np = net.standardize(x)
    u = torch.tensor(u_np)

    params = fit(net.params(), lambda tp, idx: _torch_loss(net, u, tp, idx, mode),
                 x.shape[0], config, report, make_rng(config.seed, "batches"))
    net = net.with_params(params)
    report.bump("clamps", int(np.sum(_log_diagonals(net, u_np) < LOG_TINY)))
    log_std = float(np.sum(np.log(net.std)))
    report.losses = [v + log_std for v in report.losses]
    report.extra["final_nll"] = float(np.mean(batch_nll(net, u_np))) + log_std
    report.extra["initial_nll"] = report.losses[0] if report.losses else None
    if n == 2:
        m = normalization_2d(net)
        report.add_check("flownd.mass_2d", "simpson mass", m, [0.98, 1.0], 0.98 <= m <= 1.0)
    report.wall_time = time.perf_counter() - start
    return net, report


def normalization_2d(net: TriangularFlowNet, half_width: float = 10.0,
                     n_panels: int = 400) -> float:
    """Simpson mass of exp(-nll) over a box in the standardized domain."""
    if net.n != 2:
        raise ValueError("normalization_2d needs n == 2")
    box = ((-half_width, half_width), (-half_width, half_width))
    return simpson_2d(lambda pts: np.exp(-batch_nll(net, pts)), box, n_panels)


# -- conditional flow ----------------------------------------------------------

@dataclass
class ConditionalFlowNet:
    """A triangular flow over targets whose layer biases are shifted by an
    unconstrained network of the inputs.  Shifts never see the targets, so
    triangularity and positivity in t hold for every x.
    """

    flow: TriangularFlowNet
    conditioner: dict = field(repr=False)
    x_mean: np.ndarray = field(default=None, repr=False)
    x_std: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.conditioner = {k: np.asarray(v, dtype=float) for k, v in self.conditioner.items()}
        m = self.conditioner["w0"].shape[1]
        self.x_mean = np.zeros(m) if self.x_mean is None else np.asarray(self.x_mean, float)
        self.x_std = np.ones(m) if self.x_std is None else np.asarray(self.x_std, float)

    @classmethod
    def init(cls, m: int, n: int, rng, depth=2, units=8, hidden=32, **kw) -> "ConditionalFlowNet":
        flow = TriangularFlowNet.init(n, rng, depth=depth, units=units,
                                      mean=kw.pop("t_mean", None), std=kw.pop("t_std", None))
        n_shift = (depth + 1) * units * n
        cond = {"w0": rng.normal(0.0, 1.0 / math.sqrt(m), size=(hidden, m)),
                "b0": rng.normal(0.0, 0.5, size=hidden),
                "w1": rng.normal(0.0, 0.1 / math.sqrt(hidden), size=(n_shift, hidden)),
                "b1": np.zeros(n_shift)}
        return cls(flow, cond, **kw)

    def params(self) -> dict:
        p = dict(self.flow.params())
        p.update({f"cond.{k}": v for k, v in self.conditioner.items()})
        return p

    def with_params(self, p: dict) -> "ConditionalFlowNet":
        cond = {k: np.asarray(p[f"cond.{k}"]) for k in self.conditioner}
        return ConditionalFlowNet(self.flow.with_params(p), cond, self.x_mean, self.x_std)

    def to_dict(self) -> dict:
        d = self.flow.to_dict()
        d["conditioner"] = {**{k: v.tolist() for k, v in self.conditioner.items()},
                            "standardize": [{"mean": float(m), "std": float(s)}
                                            for m, s in zip(self.x_mean, self.x_std)]}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ConditionalFlowNet":
        cond = dict(d["conditioner"])
        st = cond.pop("standardize")
        return cls(TriangularFlowNet.from_dict(d), cond,
                   [s["mean"] for s in st], [s["std"] for s in st])

    def standardize_x(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        x = x[:, None] if x.ndim == 1 and self.x_mean.size == 1 else np.atleast_2d(x)
        return (x - self.x_mean) / self.x_std


def shifts_for(cnet: ConditionalFlowNet, xs, p: dict | None = None) -> list:
    """Per-layer additive bias shifts, computed from standardized inputs only."""
    p = cnet.params() if p is None else p
    xp = torch if isinstance(xs, torch.Tensor) else np
    h = xp.tanh(xs @ p["cond.w0"].T + p["cond.b0"])
    flat = h @ p["cond.w1"].T + p["cond.b1"]
    net = cnet.flow
    k, n = net.units, net.n
    return [flat[:, i * k * n:(i + 1) * k * n].reshape(-1, k, n)
            for i in range(net.depth + 1)]


def conditional_log_density(cnet: ConditionalFlowNet, x, t) -> np.ndarray:
    """ln Phi(t | x) in raw units for paired rows of x and t."""
    xs = cnet.standardize_x(x)
    u = cnet.flow.standardize(np.asarray(t, dtype=float).reshape(xs.shape[0], -1))
    _, lds = run_layers(cnet.flow, u, shifts=shifts_for(cnet, xs))
    return np.stack(lds, axis=1).sum(axis=(1, 2)) - float(np.sum(np.log(cnet.flow.std)))


def conditional_density_on_grid(cnet: ConditionalFlowNet, x_value, t_grid) -> np.ndarray:
    """Phi(t | x) for one (scalar-target) model over a 1D grid of t."""
    t_grid = np.asarray(t_grid, dtype=float)
    x_rows = np.repeat(np.atleast_2d(np.asarray(x_value, dtype=float)), t_grid.size, axis=0)
    return np.exp(conditional_log_density(cnet, x_rows, t_grid[:, None]))


def train_conditional(data, config: TrainConfig | None = None, inputs=None,
                      targets=None) -> tuple[ConditionalFlowNet, RunReport]:
    """Fit Phi(t | x) = prod of diagonal derivatives of the t-path.

    ``inputs``/``targets`` name the x and t columns of a ``Dataset``, or
    ``data`` may be an ``(x, t)`` pair of arrays.
    """
    config = config or TrainConfig()
    if isinstance(data, Dataset):
        if not inputs or not targets:
            raise DataError("train_conditional needs nonempty input and target columns")
        x, t = data.numeric(inputs), data.numeric(targets)
    else:
        x, t = (_matrix(v) for v in data)
    x = _check_matrix(x, "train_conditional inputs")
    t = _check_matrix(t, "train_conditional targets")
    if x.shape[0] != t.shape[0]:
        raise DataError("inputs and targets have different lengths")
    report = RunReport("fit-conditional", config.to_dict())
    start = time.perf_counter()
    model = config.model
    cnet = ConditionalFlowNet.init(x.shape[1], t.shape[1], make_rng(config.seed, "init"),
                                   depth=int(model.get("depth", 2)),
                                   units=int(model.get("units", 8)),
                                   hidden=int(model.get("hidden", 32)),
                                   t_mean=t.mean(axis=0), t_std=t.std(axis=0),
                                   x_mean=x.mean(axis=0), x_std=x.std(axis=0))
    u_np = cnet.flow.standardize(t)
    u = torch.tensor(u_np)
    xs = torch.tensor(cnet.standardize_x(x))

    def loss_fn(tp, idx):
        return _torch_loss(cnet.flow, u, tp, idx, GLOBAL, shifts_for(cnet, xs[idx], tp))

    params = fit(cnet.params(), loss_fn, x.shape[0], config, report,
                 make_rng(config.seed, "batches"))
    cnet = cnet.with_params(params)
    log_std = float(np.sum(np.log(cnet.flow.std)))
    report.losses = [v + log_std for v in report.losses]
    report.extra["final_nll"] = -float(np.mean(conditional_log_density(cnet, x, t)))
    if t.shape[1] == 1:
        lo = float(t.min() - 10 * t.std())
        hi = float(t.max() + 10 * t.std())
        worst = 0.0
        for q in np.quantile(x, [0.1, 0.5, 0.9], axis=0):
            mass = quadrature(lambda g: conditional_density_on_grid(cnet, q, g), lo, hi, 4000)
            worst = max(worst, abs(mass - 1.0))
        report.add_check("conditional.mass", "max |mass-1| over x quantiles", worst, 1e-2,
                         worst <= 1e-2)
    report.wall_time = time.perf_counter() - start
    return cnet, report
