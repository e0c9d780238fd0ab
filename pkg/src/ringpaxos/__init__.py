"""Ring-based Paxos atomic broadcast protocol kit."""

from .core import (
    ConfigError,
    Deployment,
    InvariantViolation,
    Params,
    Round,
    ROUND_ZERO,
    ValueEntry,
    ValueId,
    pick_value,
    quorum_size,
    round_compare,
)

__all__ = [
    "ConfigError",
    "Deployment",
    "InvariantViolation",
    "Params",
    "Round",
    "ROUND_ZERO",
    "ValueEntry",
    "ValueId",
    "pick_value",
    "quorum_size",
    "round_compare",
]

__version__ = "0.1.0"
