"""Restricted additive Schwarz testbed with lock-step and asynchronous execution."""
from .convergence import DetectorConfig, verify_global
from .errors import (
    FormatError,
    InvalidArgumentError,
    NoConvergenceError,
    NotSPDError,
    RasError,
    VerificationFailedError,
)
from .harness import ExperimentConfig, run_experiment
from .partition import make_partition
from .problem import GridSpec, LinearSystem, laplace_2d, random_rhs
from .solver import SolverConfig, solve

__version__ = "0.1.0"

__all__ = [
    "DetectorConfig",
    "ExperimentConfig",
    "FormatError",
    "GridSpec",
    "InvalidArgumentError",
    "LinearSystem",
    "NoConvergenceError",
    "NotSPDError",
    "RasError",
    "SolverConfig",
    "VerificationFailedError",
    "laplace_2d",
    "make_partition",
    "random_rhs",
    "run_experiment",
    "solve",
    "verify_global",
]
