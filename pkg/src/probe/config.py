"""Training configuration, run reports and the seeded generator."""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field

import jsonschema
import numpy as np

from probe.errors import ConfigError
from probe.numeric.optim import MODES

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
        "epochs": {"type": "integer", "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 0},
        "learning_rate": {"type": "number", "exclusiveMinimum": 0},
        "optimizer": {"enum": list(MODES)},
        "tol": {"type": ["number", "null"], "minimum": 0},
        "model": {"type": "object"},
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "schema": {"type": "object",
                           "additionalProperties": {"enum": ["numeric", "categorical"]}},
                "inputs": {"type": "array", "items": {"type": "string"}},
                "targets": {"type": "array", "items": {"type": "string"}},
                "label": {"type": "string"},
            },
        },
    },
}


@dataclass
class TrainConfig:
    """Optimizer and schedule settings plus a free-form model block.

    ``batch_size`` 0 means full batch.  ``tol`` ``None`` lets each trainer
    pick its own stopping rule (fixed epoch count for networks).
    """

    seed: int = 0
    epochs: int = 2000
    batch_size: int = 0
    learning_rate: float = 1e-2
    optimizer: str = "adam"
    tol: float | None = None
    model: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)

    def __post_init__(self):
        try:
            jsonschema.validate(self.to_dict(), CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config {path}: {exc.message}") from None

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        try:
            jsonschema.validate(d, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config {path}: {exc.message}") from None
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                d = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    def model_get(self, key, default):
        return self.model.get(key, default)


@dataclass
class RunReport:
    kind: str
    config: dict
    mode: str | None = None
    losses: list = field(default_factory=list)
    checks: list = field(default_factory=list)
    counters: dict = field(default_factory=dict)
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    def add_check(self, check: str, metric: str, value: float, tolerance,
                  passed: bool) -> None:
        self.checks.append({"check": check, "metric": metric, "value": float(value),
                            "tolerance": tolerance, "pass": bool(passed)})

    def bump(self, counter: str, amount: int = 1) -> None:
        self.counters[counter] = self.counters.get(counter, 0) + int(amount)

    def metrics_lines(self) -> list[str]:
        """One JSON object per epoch; no timing, so seeded runs compare byte-for-byte."""
        return [json.dumps({"epoch": i, "loss": loss}) for i, loss in enumerate(self.losses)]

    def to_dict(self) -> dict:
        return asdict(self)


def make_rng(seed: int, stream: str) -> np.random.Generator:
    """Counter-based Philox generator keyed by (seed, stream name)."""
    key = (int(seed) % 2 ** 64) | (zlib.crc32(stream.encode()) << 64)
    return np.random.Generator(np.random.Philox(key=key))
