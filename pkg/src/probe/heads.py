"""Supervised heads read as conditional-probability estimators.

* ``SoftmaxClassifier``: Phi(t | x) over K label kinds; the loss on the true
  label is one-hot cross-entropy.
* ``GaussianRegressionHead``: Phi(t | x) = N(t; mu(x), L(x) L(x)^T).  With the
  covariance fixed to I the loss is squared error plus a constant.
* ``ParametricFamily`` and ``estimate_params``: streaming per-sample maximum
  likelihood for a closed-form family.
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
from probe.errors import DataError, NumericError
from probe.flow1d import positive
from probe.numeric import dual as D
from probe.training import fit

LOG_2PI = math.log(2.0 * math.pi)


def _standardizer(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    std = x.std(axis=0)
    # Constant features stay usable; they just carry no information.
    return x.mean(axis=0), np.where(std > 0, std, 1.0)


def _mlp_init(rng, sizes) -> dict:
    p = {}
    for k in range(len(sizes) - 1):
        p[f"w{k}"] = rng.normal(0.0, 1.0 / math.sqrt(sizes[k]), size=(sizes[k + 1], sizes[k]))
        p[f"b{k}"] = np.zeros(sizes[k + 1])
    return p


def _mlp(p: dict, x, n_layers: int, prefix: str = ""):
    h = x
    for k in range(n_layers):
        h = h @ p[f"{prefix}w{k}"].T + p[f"{prefix}b{k}"]
        if k < n_layers - 1:
            h = D.tanh(h)
    return h


def _matrix(data: Dataset, cols) -> np.ndarray:
    if not cols:
        raise DataError("at least one column is required")
    return data.numeric(list(cols))


# -- classification -----------------------------------------------------------

@dataclass
class SoftmaxClassifier:
    classes: tuple
    params: dict = field(repr=False)
    sizes: tuple = ()
    mean: np.ndarray = field(default=None, repr=False)
    std: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.classes = tuple(self.classes)
        self.sizes = tuple(int(s) for s in self.sizes)
        self.params = {k: np.asarray(v, dtype=float) for k, v in self.params.items()}
        m = self.sizes[0]
        self.mean = np.zeros(m) if self.mean is None else np.asarray(self.mean, float)
        self.std = np.ones(m) if self.std is None else np.asarray(self.std, float)

    @classmethod
    def init(cls, classes, n_features: int, rng, hidden=(16,), **kw) -> "SoftmaxClassifier":
        sizes = (n_features, *hidden, len(classes))
        return cls(classes, _mlp_init(rng, sizes), sizes, **kw)

    def logits(self, x, p=None):
        p = self.params if p is None else p
        return _mlp(p, x, len(self.sizes) - 1)

    def probabilities(self, x) -> np.ndarray:
        xs = (np.atleast_2d(np.asarray(x, dtype=float)) - self.mean) / self.std
        z = self.logits(xs)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def prob(self, label, x) -> float:
        return float(self.probabilities(x)[0, self.classes.index(label)])

    def to_dict(self) -> dict:
        return {"kind": "classifier", "classes": list(self.classes), "sizes": list(self.sizes),
                "params": {k: v.tolist() for k, v in self.params.items()},
                "standardize": {"mean": self.mean.tolist(), "std": self.std.tolist()}}

    @classmethod
    def from_dict(cls, d: dict) -> "SoftmaxClassifier":
        return cls(d["classes"], d["params"], d["sizes"], d["standardize"]["mean"],
                   d["standardize"]["std"])


def classifier_loss(logits, labels):
    """Mean -ln softmax(logits)[label]; ``labels`` are integer indices."""
    if isinstance(logits, torch.Tensor):
        return -torch.log_softmax(logits, dim=1)[torch.arange(len(labels)), labels].mean()
    z = np.asarray(logits, dtype=float)
    lse = z.max(axis=1) + np.log(np.exp(z - z.max(axis=1, keepdims=True)).sum(axis=1))
    return float(np.mean(lse - z[np.arange(len(labels)), labels]))


def one_hot_cross_entropy(probs: np.ndarray, onehot: np.ndarray) -> float:
    """-mean sum_k y_k ln p_k, written out independently of ``classifier_loss``."""
    probs = np.asarray(probs, dtype=float)
    out = []
    for p_row, y_row in zip(probs, onehot):
        out.append(-sum(y * math.log(p) for p, y in zip(p_row, y_row) if y))
    return math.fsum(out) / len(out)


def train_classifier(data: Dataset, config: TrainConfig | None = None, features=None,
                     label: str | None = None, classes=None) -> tuple[SoftmaxClassifier, RunReport]:
    """Minimize -ln Phi(label | x) of the observed labels."""
    config = config or TrainConfig()
    label = label or config.data.get("label")
    if label is None or label not in data.names:
        raise DataError(f"label column {label!r} not found")
    features = list(features or config.data.get("inputs")
                    or [c for c in data.names if c != label])
    x = _matrix(data, features)
    raw = list(data.column(label))
    if not raw:
        raise DataError("cannot train on an empty dataset")
    classes = tuple(classes) if classes is not None else tuple(sorted(set(raw), key=str))
    unknown = sorted({v for v in raw if v not in classes}, key=str)
    if unknown:
        raise DataError(f"unknown label(s) {unknown}")
    y = np.array([classes.index(v) for v in raw])
    mean, std = _standardizer(x)
    report = RunReport("classify", config.to_dict())
    start = time.perf_counter()
    clf = SoftmaxClassifier.init(classes, x.shape[1], make_rng(config.seed, "init"),
                                 hidden=tuple(config.model.get("hidden", (16,))),
                                 mean=mean, std=std)
    xs = torch.tensor((x - mean) / std)
    yt = torch.tensor(y)
    n_layers = len(clf.sizes) - 1
    params = fit(clf.params, lambda tp, idx: classifier_loss(_mlp(tp, xs[idx], n_layers), yt[idx]),
                 len(y), config, report, make_rng(config.seed, "batches"))
    clf = SoftmaxClassifier(classes, params, clf.sizes, mean, std)
    probs = clf.probabilities(x)
    report.extra["final_loss"] = classifier_loss(clf.logits((x - mean) / std), y)
    report.extra["cross_entropy"] = one_hot_cross_entropy(probs, np.eye(len(classes))[y])
    report.wall_time = time.perf_counter() - start
    return clf, report


# -- Gaussian regression -----------------------------------------------------

def tril_from_vector(vec, n: int):
    """Lower factor with softplus-positive diagonal from n(n+1)/2 free values.

    ``vec`` has shape (..., n(n+1)/2); the first n entries feed the diagonal.
    """
    diag = positive(vec[..., :n])
    rows, cols = np.tril_indices(n, -1)
    if isinstance(vec, torch.Tensor):
        out = torch.diag_embed(diag)
        if len(rows):
            off = torch.zeros_like(out)
            off[..., rows, cols] = vec[..., n:]
            out = out + off
        return out
    out = diag[..., :, None] * np.eye(n)
    out[..., rows, cols] = vec[..., n:]
    return out


def gaussian_nll(mu, factor, t) -> float:
    """n/2 ln 2pi + 1/2 ln|S| + 1/2 (t-mu)^T S^-1 (t-mu) with S = factor factor^T.

    Uses a triangular solve against ``factor``; no explicit inverse.
    """
    from scipy.linalg import solve_triangular

    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    factor = np.atleast_2d(np.asarray(factor, dtype=float))
    t = np.atleast_1d(np.asarray(t, dtype=float))
    n = mu.size
    diag = np.diag(factor)
    if not np.all(diag > 0) or not np.allclose(factor, np.tril(factor)):
        raise NumericError("covariance factor must be lower triangular with positive diagonal")
    z = solve_triangular(factor, t - mu, lower=True)
    return 0.5 * n * LOG_2PI + float(np.sum(np.log(diag))) + 0.5 * float(z @ z)


def gaussian_nll_torch(mu: torch.Tensor, factor: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Batched ``gaussian_nll``: mu, t (B, n); factor (B, n, n)."""
    n = mu.shape[1]
    z = torch.linalg.solve_triangular(factor, (t - mu)[..., None], upper=False)[..., 0]
    logdet = torch.log(torch.diagonal(factor, dim1=-2, dim2=-1)).sum(dim=1)
    return 0.5 * n * LOG_2PI + logdet + 0.5 * (z * z).sum(dim=1)


FULL, IDENTITY = "full", "identity"


@dataclass
class GaussianRegressionHead:
    """x -> (mu, L).  ``mu`` has a linear path plus a tanh network; ``L`` has
    two tanh hidden layers of its own.  In identity mode L = I and is not learned."""

    n_in: int
    n_out: int
    params: dict = field(repr=False)
    hidden: int = 32
    mode: str = FULL
    x_mean: np.ndarray = field(default=None, repr=False)
    x_std: np.ndarray = field(default=None, repr=False)
    t_mean: np.ndarray = field(default=None, repr=False)
    t_std: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in (FULL, IDENTITY):
            raise ValueError(f"unknown regression mode {self.mode!r}")
        self.params = {k: np.asarray(v, dtype=float) for k, v in self.params.items()}
        for name, size in (("x_mean", self.n_in), ("t_mean", self.n_out)):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(size))
        for name, size in (("x_std", self.n_in), ("t_std", self.n_out)):
            if getattr(self, name) is None:
                setattr(self, name, np.ones(size))
        for name in ("x_mean", "x_std", "t_mean", "t_std"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))

    @property
    def n_factor(self) -> int:
        return self.n_out * (self.n_out + 1) // 2

    @classmethod
    def init(cls, n_in: int, n_out: int, rng, hidden: int = 32, mode: str = FULL,
             **kw) -> "GaussianRegressionHead":
        n_factor = n_out * (n_out + 1) // 2
        p = {"lin": np.zeros((n_out, n_in)),
             "w0": rng.normal(0.0, 3.0 / math.sqrt(n_in), size=(hidden, n_in)),
             "b0": rng.normal(0.0, 2.0, size=hidden),
             "w_mu": rng.normal(0.0, 0.1 / math.sqrt(hidden), size=(n_out, hidden)),
             "b_mu": np.zeros(n_out)}
        if mode == FULL:
            p["w0_l"] = rng.normal(0.0, 3.0 / math.sqrt(n_in), size=(hidden, n_in))
            p["b0_l"] = rng.normal(0.0, 2.0, size=hidden)
            p["w1_l"] = rng.normal(0.0, 1.0 / math.sqrt(hidden), size=(hidden, hidden))
            p["b1_l"] = np.zeros(hidden)
            p["w_l"] = rng.normal(0.0, 0.1 / math.sqrt(hidden), size=(n_factor, hidden))
            # softplus(0.5413) + floor == 1: start from unit standardized scale
            p["b_l"] = np.concatenate([np.full(n_out, 0.5413248546129181),
                                       np.zeros(n_factor - n_out)])
        return cls(n_in, n_out, p, hidden, mode, **kw)

    def outputs(self, xs, p=None):
        """(mu, factor) on the standardized scale for standardized inputs."""
        p = self.params if p is None else p
        h = D.tanh(xs @ p["w0"].T + p["b0"])
        mu = xs @ p["lin"].T + h @ p["w_mu"].T + p["b_mu"]
        if self.mode == IDENTITY:
            return mu, None
        h_l = D.tanh(xs @ p["w0_l"].T + p["b0_l"])
        h_l = D.tanh(h_l @ p["w1_l"].T + p["b1_l"])
        return mu, tril_from_vector(h_l @ p["w_l"].T + p["b_l"], self.n_out)

    def predict(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Raw-unit mean (B, n) and covariance factor (B, n, n)."""
        xs = (np.atleast_2d(np.asarray(x, dtype=float)) - self.x_mean) / self.x_std
        mu, factor = self.outputs(xs)
        if factor is None:
            factor = np.broadcast_to(np.eye(self.n_out), (xs.shape[0], self.n_out, self.n_out))
        return self.t_mean + mu * self.t_std, self.t_std[:, None] * factor

    def sigma(self, x) -> np.ndarray:
        """Marginal standard deviations per target in raw units."""
        _, factor = self.predict(x)
        return np.sqrt(np.einsum("bij,bij->bi", factor, factor))

    def to_dict(self) -> dict:
        return {"kind": "regression", "n_in": self.n_in, "n_out": self.n_out,
                "hidden": self.hidden, "mode": self.mode,
                "params": {k: v.tolist() for k, v in self.params.items()},
                "standardize": {k: getattr(self, k).tolist()
                                for k in ("x_mean", "x_std", "t_mean", "t_std")}}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianRegressionHead":
        return cls(d["n_in"], d["n_out"], d["params"], d["hidden"], d["mode"],
                   **d["standardize"])


def mean_nll(head: GaussianRegressionHead, x, t) -> float:
    """Mean raw-unit Gaussian NLL over paired rows."""
    mu, factor = head.predict(x)
    t = np.atleast_2d(np.asarray(t, dtype=float)).reshape(mu.shape)
    return math.fsum(gaussian_nll(m, f, ti) for m, f, ti in zip(mu, factor, t)) / len(t)


def _regression_data(data, config, inputs, targets):
    if isinstance(data, Dataset):
        inputs = inputs or config.data.get("inputs")
        targets = targets or config.data.get("targets")
        return _matrix(data, inputs), _matrix(data, targets)
    x, t = (np.asarray(v, dtype=float) for v in data)
    return (x[:, None] if x.ndim == 1 else x), (t[:, None] if t.ndim == 1 else t)


def _regression_setup(data, config, inputs, targets, mode):
    x, t = _regression_data(data, config, inputs, targets)
    if x.shape[0] == 0 or x.shape[0] != t.shape[0]:
        raise DataError("inputs and targets must be nonempty and of equal length")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(t))):
        raise DataError("regression data contains non-finite values")
    x_mean, x_std = _standardizer(x)
    t_mean, t_std = _standardizer(t)
    if mode == IDENTITY:
        # Sigma = I must hold in data units.
        t_mean, t_std = np.zeros(t.shape[1]), np.ones(t.shape[1])
    head = GaussianRegressionHead.init(x.shape[1], t.shape[1], make_rng(config.seed, "init"),
                                       hidden=int(config.model.get("hidden", 32)), mode=mode,
                                       x_mean=x_mean, x_std=x_std, t_mean=t_mean, t_std=t_std)
    xs = torch.tensor((x - x_mean) / x_std)
    ts = torch.tensor((t - t_mean) / t_std)
    return head, x, t, xs, ts


def train_regression(data, config: TrainConfig | None = None, inputs=None, targets=None,
                     mode: str = FULL) -> tuple[GaussianRegressionHead, RunReport]:
    """Minimize the mean Gaussian NLL.  ``mode="identity"`` fixes Sigma = I."""
    config = config or TrainConfig()
    head, x, t, xs, ts = _regression_setup(data, config, inputs, targets, mode)
    report = RunReport("regress", config.to_dict(), mode=mode)
    start = time.perf_counter()
    n = t.shape[1]

    def loss_fn(tp, idx):
        mu, factor = head.outputs(xs[idx], tp)
        if factor is None:
            r = ts[idx] - mu
            return (0.5 * n * LOG_2PI + 0.5 * (r * r).sum(dim=1)).mean()
        return gaussian_nll_torch(mu, factor, ts[idx]).mean()

    params = fit(head.params, loss_fn, len(t), config, report, make_rng(config.seed, "batches"))
    head = GaussianRegressionHead(head.n_in, head.n_out, params, head.hidden, mode,
                                  head.x_mean, head.x_std, head.t_mean, head.t_std)
    log_std = float(np.sum(np.log(head.t_std)))
    report.losses = [v + log_std for v in report.losses]
    report.extra["final_nll"] = mean_nll(head, x, t)
    report.wall_time = time.perf_counter() - start
    return head, report


def train_mse(data, config: TrainConfig | None = None, inputs=None,
              targets=None) -> tuple[GaussianRegressionHead, RunReport]:
    """Plain squared-error training, 1/2 |t - mu|^2, of the identity-mode head."""
    config = config or TrainConfig()
    head, x, t, xs, ts = _regression_setup(data, config, inputs, targets, IDENTITY)
    report = RunReport("mse", config.to_dict(), mode="mse")

    def loss_fn(tp, idx):
        mu, _ = head.outputs(xs[idx], tp)
        r = ts[idx] - mu
        return (0.5 * (r * r).sum(dim=1)).mean()

    params = fit(head.params, loss_fn, len(t), config, report, make_rng(config.seed, "batches"))
    return GaussianRegressionHead(head.n_in, head.n_out, params, head.hidden, IDENTITY,
                                  head.x_mean, head.x_std, head.t_mean, head.t_std), report


# -- parameter estimation ------------------------------------------------------

@dataclass(frozen=True)
class ParametricFamily:
    """A closed-form density family.  Only ``gaussian1d`` is provided:
    theta = (mean, log_std)."""

    tag: str = "gaussian1d"

    def __post_init__(self):
        if self.tag not in FAMILIES:
            raise ValueError(f"unknown family {self.tag!r}; available: {sorted(FAMILIES)}")

    def log_density(self, x, theta) -> np.ndarray:
        return FAMILIES[self.tag]["log_density"](np.asarray(x, dtype=float), np.asarray(theta))

    def grad(self, x: float, theta) -> np.ndarray:
        """Gradient of -ln P(x | theta) with respect to theta."""
        return FAMILIES[self.tag]["grad"](float(x), np.asarray(theta, dtype=float))

    def fisher(self, theta) -> np.ndarray:
        return FAMILIES[self.tag]["fisher"](np.asarray(theta, dtype=float))

    def natural_step(self, x: float, theta, lr: float, var_floor: float = 0.0) -> np.ndarray:
        return FAMILIES[self.tag]["natural_step"](float(x), np.asarray(theta, dtype=float),
                                                   lr, var_floor)

    def scale(self, theta) -> float:
        return FAMILIES[self.tag]["scale"](np.asarray(theta, dtype=float))


def _g1_log_density(x, theta):
    mean, log_std = theta
    z = (x - mean) * np.exp(-log_std)
    return -0.5 * LOG_2PI - log_std - 0.5 * z * z


def _g1_grad(x, theta):
    mean, log_std = theta
    inv_var = math.exp(-2.0 * log_std)
    r = x - mean
    return np.array([-r * inv_var, 1.0 - r * r * inv_var])


def _g1_natural_step(x, theta, lr, var_floor):
    # In (mean, var) the inverse-Fisher gradient of -ln P is (-(x-m), var-(x-m)^2).
    mean, var = theta[0], math.exp(2.0 * theta[1])
    r = x - mean
    var = max(var - lr * (var - r * r), var_floor, 1e-300)
    return np.array([mean + lr * r, 0.5 * math.log(var)])


FAMILIES = {
    "gaussian1d": {
        "log_density": _g1_log_density,
        "grad": _g1_grad,
        "fisher": lambda th: np.diag([math.exp(-2.0 * th[1]), 2.0]),
        "natural_step": _g1_natural_step,
        "scale": lambda th: math.exp(th[1]),
    },
}


def _column(data) -> np.ndarray:
    if isinstance(data, Dataset):
        arr = data.numeric()
        if arr.shape[1] != 1:
            raise DataError(f"estimate-params expects one numeric column, got {arr.shape[1]}")
        return arr[:, 0]
    return np.asarray(data, dtype=float).reshape(-1)


def estimate_params(data, family: ParametricFamily | None = None,
                    config: TrainConfig | None = None,
                    report: RunReport | None = None) -> np.ndarray:
    """Streaming maximum likelihood: one sample per update.

    Each step moves theta along the inverse-Fisher-preconditioned gradient
    of -ln P(x_k | theta) with step 1/(k+1), k counting every presentation
    over ``config.epochs`` shuffled passes.  The step is taken in the
    family's natural coordinates (mean and variance for ``gaussian1d``).  ``config.model`` may set
    ``variance_floor``; without it, zero-variance data is rejected.
    """
    family = family or ParametricFamily()
    config = config or TrainConfig(epochs=200)
    x = _column(data)
    if x.size < 2:
        raise DataError(f"{family.tag} needs at least two samples")
    if not np.all(np.isfinite(x)):
        raise DataError("data contains non-finite values")
    floor = config.model.get("variance_floor")
    if np.ptp(x) == 0 and not floor:
        raise DataError(f"degenerate data for {family.tag}: all samples equal "
                        "(set model.variance_floor to allow it)")
    var_floor = float(floor) if floor else 0.0
    rng = make_rng(config.seed, "stream")
    theta = np.array([x[0], 0.0])
    k = 0
    for epoch in range(config.epochs):
        for i in rng.permutation(x.size):
            theta = family.natural_step(x[i], theta, 1.0 / (k + 1), var_floor)
            k += 1
        if not np.all(np.isfinite(theta)):
            raise NumericError(f"epoch {epoch}: non-finite parameters")
        if report is not None:
            report.losses.append(-float(np.mean(family.log_density(x, theta))))
    return theta


def batch_mle(data, family: ParametricFamily | None = None, iters: int = 200,
              tol: float = 1e-14) -> np.ndarray:
    """Full-batch maximization of sum_k ln P(x_k | theta) by Fisher scoring."""
    family = family or ParametricFamily()
    x = _column(data)
    if x.size < 2 or np.ptp(x) == 0:
        raise DataError(f"degenerate data for {family.tag}")
    theta = np.array([float(np.median(x)), math.log(float(np.std(x - np.median(x))) + 1e-300)])
    for _ in range(iters):
        g = np.mean([family.grad(v, theta) for v in x], axis=0)
        step = np.linalg.solve(family.fisher(theta), g)
        theta = theta - step
        if np.max(np.abs(step)) < tol:
            break
    return theta


def to_json(model) -> str:
    return json.dumps(model.to_dict())
