"""Entire-chain cross-domain pre-ranking: cascade simulator, ECM/ECMM models and metrics."""
from .cascade_sim import CascadeConfig, simulate
from .config import ExperimentConfig, load_config
from .models import MODEL_KINDS, build_model
from .train import evaluate, load_checkpoint, save_checkpoint, train_loop

__version__ = "0.1.0"

__all__ = [
    "CascadeConfig",
    "ExperimentConfig",
    "MODEL_KINDS",
    "build_model",
    "evaluate",
    "load_checkpoint",
    "load_config",
    "save_checkpoint",
    "simulate",
    "train_loop",
]
