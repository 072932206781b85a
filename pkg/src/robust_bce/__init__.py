"""Robust factor-graph trajectory estimation with learned residual noise models."""

__version__ = "0.1.0"

from .errors import EstimationError
from .model import FactorGraph, NoiseModel, Observation, StateTrajectory, build_graph
from .pipeline import MODES, PipelineConfig, run
from .scenario import DegradationConfig, ScenarioConfig, generate, oracle_error
from .solver import SolverConfig, solve

__all__ = [
    "MODES",
    "DegradationConfig",
    "EstimationError",
    "FactorGraph",
    "NoiseModel",
    "Observation",
    "PipelineConfig",
    "ScenarioConfig",
    "SolverConfig",
    "StateTrajectory",
    "build_graph",
    "generate",
    "oracle_error",
    "run",
    "solve",
]
