"""Shared gradient loop: torch autograd for gradients, ``sgd_step`` for updates."""

from __future__ import annotations

import math
import time
from typing import Callable

import numpy as np
import torch

from probe.config import RunReport, TrainConfig
from probe.errors import NumericError
from probe.numeric.optim import OptimizerState, sgd_step

DTYPE = torch.float64


def to_torch(params: dict, requires_grad: bool = True) -> dict:
    return {k: torch.tensor(np.asarray(v, dtype=float), dtype=DTYPE,
                            requires_grad=requires_grad)
            for k, v in params.items()}


def to_numpy(tparams: dict) -> dict:
    return {k: v.detach().cpu().numpy().copy() for k, v in tparams.items()}


def flatten(params: dict) -> np.ndarray:
    return np.concatenate([np.asarray(v, dtype=float).reshape(-1) for v in params.values()])


def unflatten(vec: np.ndarray, like: dict) -> dict:
    out, i = {}, 0
    for k, v in like.items():
        size = np.asarray(v).size
        out[k] = np.asarray(vec[i:i + size]).reshape(np.shape(v))
        i += size
    return out


class Stepper:
    """Owns the torch parameter tensors and the optimizer state for one run."""

    def __init__(self, params: dict, config: TrainConfig):
        self.tparams = to_torch(params)
        self.state = OptimizerState(learning_rate=config.learning_rate,
                                    mode=config.optimizer)

    def step(self, loss: torch.Tensor, learning_rate: float | None = None) -> float:
        value = float(loss.detach())
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss {value!r}")
        for t in self.tparams.values():
            t.grad = None
        loss.backward()
        grads = np.concatenate([
            (t.grad if t.grad is not None else torch.zeros_like(t)).detach().numpy().reshape(-1)
            for t in self.tparams.values()])
        flat = np.concatenate([t.detach().numpy().reshape(-1) for t in self.tparams.values()])
        new, self.state = sgd_step(flat, grads, self.state, learning_rate)
        i = 0
        with torch.no_grad():
            for t in self.tparams.values():
                t.copy_(torch.from_numpy(new[i:i + t.numel()].reshape(t.shape)))
                i += t.numel()
        return value

    def params(self) -> dict:
        return to_numpy(self.tparams)


def fit(params: dict, loss_fn: Callable, n_samples: int, config: TrainConfig,
        report: RunReport, rng: np.random.Generator) -> dict:
    """Minibatch loop; ``loss_fn(tparams, idx)`` returns the mean loss on ``idx``.

    The per-epoch loss recorded in ``report.losses`` is the sample-weighted
    mean of the batch losses evaluated before each update.
    """
    stepper = Stepper(params, config)
    batch = config.batch_size if 0 < config.batch_size < n_samples else n_samples
    start = time.perf_counter()
    prev = None
    for epoch in range(config.epochs):
        order = rng.permutation(n_samples) if batch < n_samples else np.arange(n_samples)
        parts = []
        for lo in range(0, n_samples, batch):
            idx = order[lo:lo + batch]
            try:
                value = stepper.step(loss_fn(stepper.tparams, idx))
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}: {exc}") from None
            parts.append(value * len(idx))
        epoch_loss = math.fsum(parts) / n_samples
        report.losses.append(epoch_loss)
        if config.tol and prev is not None and abs(prev - epoch_loss) < config.tol:
            break
        prev = epoch_loss
    report.wall_time += time.perf_counter() - start
    return stepper.params()
