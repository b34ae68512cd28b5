"""Probe-based fault localization and root-cause attribution for parallel storage."""

from .errors import (ConfigError, ConvergenceWarning, EmptyWindowError, ForensicsError,
                     InfeasibleError, InsufficientDataError, NotFoundError, PairingError,
                     SpecError)
from .topology import ComponentId, Kind, Topology, TopologySpec, build_topology, check_identifiability

__version__ = "0.1.0"

__all__ = [
    "ComponentId", "ConfigError", "ConvergenceWarning", "EmptyWindowError", "ForensicsError",
    "InfeasibleError", "InsufficientDataError", "Kind", "NotFoundError", "PairingError",
    "SpecError", "Topology", "TopologySpec", "build_topology", "check_identifiability",
]
