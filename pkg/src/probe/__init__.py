"""Probability estimation with models normalized by construction."""

from probe.config import RunReport, TrainConfig
from probe.data import Dataset, ingest_csv
from probe.errors import (ConfigError, DataError, DomainError, NumericError, ProbeError,
                          StiffnessError, UnderflowError, UnseenConditionError)

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "Dataset", "DomainError", "NumericError", "ProbeError",
           "RunReport", "StiffnessError", "TrainConfig", "UnderflowError",
           "UnseenConditionError", "ingest_csv"]
