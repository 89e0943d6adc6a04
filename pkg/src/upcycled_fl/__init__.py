"""Deterministic federated-learning simulator with the Upcycled-FL even-round
extrapolation strategy, output/objective perturbation and closed-form privacy
accounting."""

from .errors import (
    ConfigError,
    ContractError,
    DiagnosticError,
    DivergenceError,
    DomainError,
    EvaluationError,
    ParseError,
    SchemaError,
    SplitError,
    UpcycledError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DiagnosticError",
    "DivergenceError",
    "DomainError",
    "EvaluationError",
    "ParseError",
    "SchemaError",
    "SplitError",
    "UpcycledError",
]
