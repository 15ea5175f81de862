"""Multi-scenario CTR prediction with disentangled scenario representations and
hypernetwork-gated scenario towers, on a small numpy autodiff engine."""

from .data import (Dataset, FeatureSchema, FieldDef, GeneratorConfig, Splits, batch_iter,
                   default_schema, generate, load_csv, read_splits, write_splits)
from .metrics import auc, logloss, per_scenario
from .model import ModelConfig, OptMSM, load_model, save_model
from .training import TrainConfig, compare, measure_overhead, train

__version__ = "0.1.0"

__all__ = [
    "Dataset", "FeatureSchema", "FieldDef", "GeneratorConfig", "Splits", "batch_iter",
    "default_schema", "generate", "load_csv", "read_splits", "write_splits",
    "auc", "logloss", "per_scenario",
    "ModelConfig", "OptMSM", "load_model", "save_model",
    "TrainConfig", "compare", "measure_overhead", "train",
]
