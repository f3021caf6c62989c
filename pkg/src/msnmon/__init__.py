"""Hierarchical multivariate statistical network monitoring.

Sensors turn raw record streams (NetFlow-like logs) into per-window counter
vectors, watch them with a PCA latent-variable model through the Q and D
statistics against adaptive control limits, and forward only those two
numbers up a sensor hierarchy.  Analysts can drill an anomalous window back
down to the raw lines that caused it.
"""

__version__ = "0.1.0"

from msnmon.errors import (
    ConfigError,
    DimensionError,
    InvalidData,
    NotFound,
    ParseWarning,
    ProtocolError,
    RankError,
    Unreachable,
)

__all__ = [
    "ConfigError",
    "DimensionError",
    "InvalidData",
    "NotFound",
    "ParseWarning",
    "ProtocolError",
    "RankError",
    "Unreachable",
]
