"""Utility-optimal scheduling for multihop networks of energy-harvesting nodes."""

from .engine import run, sweep
from .esa import EsaNetwork, InvariantViolationError, QueueState, esa_step
from .mesa import mesa_capacity, mesa_run, phase1, phase2_step
from .model import ConfigError, NetworkConfig, load_config, validate_and_derive
from .oracle import brute_force_bound, compute_upper_bound

__all__ = [
    "run", "sweep", "EsaNetwork", "InvariantViolationError", "QueueState", "esa_step",
    "mesa_capacity", "mesa_run", "phase1", "phase2_step", "ConfigError", "NetworkConfig",
    "load_config", "validate_and_derive", "brute_force_bound", "compute_upper_bound",
]
