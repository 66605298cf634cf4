"""Graph-structure-learning spatiotemporal forecaster with a synthetic advection benchmark."""
from .config import EvalConfig, RunConfig, TrainConfig
from .estimator import AdaptiveGraphForecaster, PersistenceForecaster
from .synthgen import SimConfig, generate_dataset, read_dataset, write_dataset

__version__ = "0.1.0"

__all__ = [
    "AdaptiveGraphForecaster",
    "PersistenceForecaster",
    "EvalConfig",
    "RunConfig",
    "SimConfig",
    "TrainConfig",
    "generate_dataset",
    "read_dataset",
    "write_dataset",
]
