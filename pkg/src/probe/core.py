"""Negative-log loss, its expectation, and normalized discrete estimators."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from probe.config import TrainConfig
from probe.data import CATEGORICAL, Dataset
from probe.errors import DataError, DomainError, UnseenConditionError
from probe.numeric.optim import OptimizerState, sgd_step


def log_loss(phi: float) -> float:
    """-ln(phi) for a strictly positive model-function value."""
    phi = float(phi)
    if not phi > 0 or not math.isfinite(phi):
        raise DomainError(f"model-function value must be positive and finite, got {phi!r}")
    return -math.log(phi)


def _samples(data) -> list:
    if isinstance(data, Dataset):
        cols = [data.columns[n] for n in data.names]
        if len(cols) == 1:
            return list(cols[0])
        return list(zip(*cols))
    return list(data)


def expected_loss(model: Callable, data) -> float:
    """Mean of ``log_loss(model(x))`` over the samples of ``data``.

    The sum is exactly rounded (``math.fsum``), so the result does not depend
    on sample order.
    """
    samples = _samples(data)
    if not samples:
        raise DataError("expected_loss needs at least one sample")
    terms = []
    for i, x in enumerate(samples):
        try:
            terms.append(log_loss(model(x)))
        except DomainError as exc:
            raise DomainError(f"sample {i}: {exc}") from None
    return math.fsum(terms) / len(terms)


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    e = np.exp(z - z.max())
    return e / e.sum()


@dataclass(frozen=True)
class DiscreteEstimator:
    """Probabilities over a finite support, normalized by softmax."""

    support: tuple
    logits: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "support", tuple(self.support))
        object.__setattr__(self, "logits", np.asarray(self.logits, dtype=float).reshape(-1))
        if len(self.support) < 1:
            raise DataError("a discrete estimator needs at least one outcome")
        if len(set(self.support)) != len(self.support):
            raise DataError("support outcomes must be distinct")
        if self.logits.size != len(self.support):
            raise DataError("one logit per support outcome is required")

    @property
    def probabilities(self) -> np.ndarray:
        return softmax(self.logits)

    def prob(self, outcome) -> float:
        try:
            k = self.support.index(outcome)
        except ValueError:
            return 0.0
        return float(self.probabilities[k])

    __call__ = prob

    def to_dict(self) -> dict:
        return {"support": list(self.support), "logits": self.logits.tolist()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "DiscreteEstimator":
        return cls(tuple(d["support"]), np.asarray(d["logits"], dtype=float))


def _categorical_values(data, column: str | None) -> list:
    if isinstance(data, Dataset):
        if column is None:
            cats = [n for n in data.names if data.kinds[n] == CATEGORICAL] or data.names
            if len(cats) != 1:
                raise DataError(f"expected one categorical column, found {cats}")
            column = cats[0]
        return list(data.column(column))
    return list(data)


def _discrete_defaults(config: TrainConfig | None) -> tuple[OptimizerState, int, float]:
    if config is None:
        return OptimizerState(learning_rate=1.0, mode="plain"), 100_000, 1e-6
    tol = 1e-6 if config.tol is None else config.tol
    return (OptimizerState(learning_rate=config.learning_rate, mode=config.optimizer),
            config.epochs, tol)


def _descend(freqs: np.ndarray, config: TrainConfig | None) -> np.ndarray:
    # The gradient of the mean log loss w.r.t. the logits is softmax - freqs,
    # so the stopping rule bounds the deviation from the empirical frequencies.
    state, epochs, tol = _discrete_defaults(config)
    logits = np.zeros(freqs.size)
    for _ in range(epochs):
        grad = softmax(logits) - freqs
        if np.max(np.abs(grad)) <= tol:
            break
        logits, state = sgd_step(logits, grad, state)
    return logits


def fit_discrete(data, config: TrainConfig | None = None, support: Iterable | None = None,
                 column: str | None = None) -> DiscreteEstimator:
    """Gradient descent on the mean log loss of a softmax-parametrized estimator."""
    values = _categorical_values(data, column)
    if not values:
        raise DataError("cannot fit an estimator to an empty dataset")
    counts = Counter(values)
    if support is None:
        support = sorted(counts, key=_sort_key)
    else:
        support = list(support)
        outside = [v for v in counts if v not in support]
        if outside:
            raise DataError(f"categories outside the declared support: {outside}")
    freqs = np.array([counts.get(s, 0) for s in support], dtype=float) / len(values)
    return DiscreteEstimator(tuple(support), _descend(freqs, config))


def _sort_key(v):
    return (type(v).__name__, v)


@dataclass(frozen=True)
class ConditionalEstimator:
    """One ``DiscreteEstimator`` per observed conditioning value."""

    rows: dict

    def row(self, condition) -> DiscreteEstimator:
        try:
            return self.rows[condition]
        except KeyError:
            raise UnseenConditionError(f"unseen condition {condition!r}") from None

    def prob(self, outcome, given) -> float:
        return self.row(given).prob(outcome)

    def __call__(self, pair) -> float:
        condition, outcome = pair
        return self.prob(outcome, condition)


def fit_discrete_conditional(data, config: TrainConfig | None = None,
                             condition: str | None = None,
                             outcome: str | None = None) -> ConditionalEstimator:
    """Fit outcome frequencies separately under every condition value.

    Each row's support is the set of outcomes seen under that condition;
    unseen outcomes get probability zero (no smoothing).
    """
    if isinstance(data, Dataset):
        names = data.names
        condition = condition or names[0]
        outcome = outcome or names[1]
        pairs = list(zip(data.column(condition), data.column(outcome)))
    else:
        pairs = list(data)
    if not pairs:
        raise DataError("cannot fit a conditional estimator to an empty dataset")
    grouped: dict = {}
    for a, b in pairs:
        grouped.setdefault(a, []).append(b)
    rows = {a: fit_discrete(bs, config) for a, bs in sorted(grouped.items(),
                                                             key=lambda kv: _sort_key(kv[0]))}
    return ConditionalEstimator(rows)
