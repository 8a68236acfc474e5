"""First-order optimizer over flat parameter vectors."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from probe.errors import NumericError

MODES = ("plain", "momentum", "rmsprop", "adam")


@dataclass(frozen=True)
class OptimizerState:
    learning_rate: float = 1e-2
    mode: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    first: np.ndarray | None = field(default=None, repr=False)
    second: np.ndarray | None = field(default=None, repr=False)
    step_count: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.mode not in MODES:
            raise ValueError(f"unknown optimizer mode {self.mode!r}; expected one of {MODES}")


def sgd_step(params, grads, state: OptimizerState,
             learning_rate: float | None = None) -> tuple[np.ndarray, OptimizerState]:
    """One update; returns new parameters and new state (inputs untouched).

    ``learning_rate`` overrides the state's rate for this step only, which
    is how decaying schedules are expressed.
    """
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape:
        raise ValueError(f"shape mismatch: params {params.shape} vs grads {grads.shape}")
    bad = np.flatnonzero(~np.isfinite(grads))
    if bad.size:
        raise NumericError(f"non-finite gradient at parameter index {int(bad[0])}")
    for acc in (state.first, state.second):
        if acc is not None and acc.shape != params.shape:
            raise ValueError("optimizer accumulators do not match parameter shape")

    lr = state.learning_rate if learning_rate is None else learning_rate
    step = state.step_count + 1
    first = state.first if state.first is not None else np.zeros_like(params)
    second = state.second if state.second is not None else np.zeros_like(params)

    if state.mode == "plain":
        update = grads
    elif state.mode == "momentum":
        first = state.beta1 * first + grads
        update = first
    elif state.mode == "rmsprop":
        second = state.beta2 * second + (1 - state.beta2) * grads ** 2
        update = grads / (np.sqrt(second) + state.eps)
    else:
        first = state.beta1 * first + (1 - state.beta1) * grads
        second = state.beta2 * second + (1 - state.beta2) * grads ** 2
        m_hat = first / (1 - state.beta1 ** step)
        v_hat = second / (1 - state.beta2 ** step)
        update = m_hat / (np.sqrt(v_hat) + state.eps)

    new_state = replace(state, first=first, second=second, step_count=step)
    return params - lr * update, new_state
