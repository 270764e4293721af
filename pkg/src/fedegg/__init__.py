"""Federated learning simulator with a server-side guiding task, baseline
strategies, data partitioning utilities and one-step convergence checks."""

from .engine import SimulationConfig, run_simulation
from .guidance import GuidanceConfig
from .strategies import StrategyConfig

__version__ = "0.1.0"

__all__ = ["SimulationConfig", "run_simulation", "GuidanceConfig", "StrategyConfig", "__version__"]
