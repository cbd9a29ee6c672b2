"""Iterative domain adaptation with feature disentanglement and synthetic target data."""
from .config import ConfigError, RunConfig, load_config
from .data import DatasetSplit, DeskConfig, SampleSet, make_desk_benchmark
from .estimator import DiDAClassifier
from .loop import RunFailed, RunReport, run_control, run_dida
from .models import BundleConfig, ModelBundle, load_checkpoint, save_checkpoint
from .stages import StageConfig, train_da_stage, train_di_stage

__version__ = "0.1.0"

__all__ = [
    "BundleConfig", "ConfigError", "DatasetSplit", "DeskConfig", "DiDAClassifier", "ModelBundle",
    "RunConfig", "RunFailed", "RunReport", "SampleSet", "StageConfig", "load_checkpoint", "load_config",
    "make_desk_benchmark", "run_control", "run_dida", "save_checkpoint", "train_da_stage", "train_di_stage",
]
