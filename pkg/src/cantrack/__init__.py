"""Composite appearance aggregation, greedy multi-camera tracking and tracking metrics."""

from cantrack.errors import (
    CantrackError,
    ContractError,
    DomainError,
    ShapeError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "CantrackError",
    "ContractError",
    "DomainError",
    "ShapeError",
    "ValidationError",
    "__version__",
]
