"""Sparse parameter updates for class-incremental learning of a dual-tower
contrastive model, with replay and importance-weighted drift penalties."""

from .config import RunConfig
from .data import UniverseConfig, make_synthetic_universe
from .harness import learn_task, pretrain, run_sequence
from .kernels import backend
from .metrics import AccuracyMatrix, average_accuracy, forgetting
from .model import BlockSpec, build_model

__version__ = "0.1.0"

__all__ = ["AccuracyMatrix", "BlockSpec", "RunConfig", "UniverseConfig", "average_accuracy",
           "backend", "build_model", "forgetting", "learn_task", "make_synthetic_universe",
           "pretrain", "run_sequence"]
