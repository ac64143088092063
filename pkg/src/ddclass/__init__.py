"""Domain-decomposition classifiers: local CNNs and LDAs composed into global models."""

from .errors import (
    ConfigError,
    ContractError,
    DDClassError,
    DivergenceError,
    FormatError,
    PhaseError,
    ShapeError,
)
from .pipelines import PIPELINES, RunConfig, RunReport, evaluate, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "DDClassError", "DivergenceError", "FormatError",
    "PIPELINES", "PhaseError", "RunConfig", "RunReport", "ShapeError", "evaluate", "run_pipeline",
]
