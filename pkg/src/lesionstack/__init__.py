"""Lesion classification with multi-stream 3D DenseNet ensembles.

Provides the data stages (cohort storage, grid unification, patch
sampling), the stream networks and their training, the stacked ensembles
and the metrics and reports of a pipeline run.
"""

from .config import PipelineConfig, load_config
from .densenet import StreamConfig, build_stream, load_checkpoint
from .ensemble import (
    FamilySelection,
    build_ensemble,
    load_ensemble,
    meta_features,
    predict,
)
from .exceptions import (
    CheckpointError,
    ConfigurationError,
    DataError,
    FrozenModelError,
    LesionStackError,
    MissingArtifactError,
    NumericError,
    PandocConversionError,
    PandocError,
    PandocNotInstalledError,
    ReportError,
    StaleArtifactError,
)
from .losses import FocalParams, focal_loss
from .metrics import roc_auc, summarize
from .pipeline import Pipeline
from .trainer import TrainConfig, make_folds, train_stream

__all__ = [
    "CheckpointError",
    "ConfigurationError",
    "DataError",
    "FamilySelection",
    "FocalParams",
    "FrozenModelError",
    "LesionStackError",
    "MissingArtifactError",
    "NumericError",
    "PandocConversionError",
    "PandocError",
    "PandocNotInstalledError",
    "Pipeline",
    "PipelineConfig",
    "ReportError",
    "StaleArtifactError",
    "StreamConfig",
    "TrainConfig",
    "build_ensemble",
    "build_stream",
    "focal_loss",
    "load_checkpoint",
    "load_config",
    "load_ensemble",
    "make_folds",
    "meta_features",
    "predict",
    "roc_auc",
    "summarize",
    "train_stream",
]

__version__ = "0.1.0"
