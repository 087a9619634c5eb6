"""Deterministic digital twin of multi-adapter LLM serving, with placement
sweeps and a tree-ensemble placement predictor."""

__version__ = "0.1.0"

from .config import ServerConfig, preset_config
from .engine import SimulationResult, default_backend, native_available, run_simulation, simulate_requests
from .errors import ConfigError, FittingError, LoraTwinError, SimulationError, TrainingError, ValidationError
from .estimators import H100_SYNTHETIC, Estimators, LatencyCoefficients, LoadLatencyTable, MemoryModel
from .metrics import MetricsSummary, compute_metrics, ideal_throughput, smape
from .workload import AdapterSpec, LengthSpec, Request, WorkloadSpec

__all__ = [
    "ServerConfig", "preset_config", "SimulationResult", "default_backend", "native_available",
    "run_simulation", "simulate_requests", "ConfigError", "FittingError", "LoraTwinError",
    "SimulationError", "TrainingError", "ValidationError", "H100_SYNTHETIC", "Estimators",
    "LatencyCoefficients", "LoadLatencyTable", "MemoryModel", "MetricsSummary", "compute_metrics",
    "ideal_throughput", "smape", "AdapterSpec", "LengthSpec", "Request", "WorkloadSpec",
]
