"""Continual learning over a shared SVD-factorized representational space.

Tasks train in factorized form (U, sigma, V per conv layer) against a
frozen shared space, are compressed by singular-value energy pruning,
and appended; per-task cumulative ranks make every earlier task's
sub-network recoverable bitwise, so backward transfer is exactly zero.
"""

from .checkpoint import (
    load_dataset,
    load_dense_models,
    load_space,
    load_task_factors,
    save_dataset,
    save_dense_models,
    save_space,
    save_task_factors,
)
from .compression import PruneConfig, compress, energy_prune, retained_rank, sort_by_magnitude
from .datasets import TaskDataset, TaskStreamSpec, generate_stream
from .errors import (
    ConfigError,
    DataError,
    FormatError,
    NumericError,
    ShapeError,
    TrainingError,
)
from .factorized import (
    LayerShape,
    NetworkSpec,
    SharedSpace,
    TaskFactors,
    TaskHead,
    append,
    compose_dense,
    empty_space,
    expand,
    extract_subnetwork,
    param_count,
    predict_logits,
    size_bytes,
)
from .metrics import MetricsReport, compute_metrics
from .regularizers import LossWeights, l_orth, l_sparse
from .trainer import MODES, DenseTaskModels, TrainConfig, run_continual, train_task

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DenseTaskModels",
    "FormatError",
    "LayerShape",
    "LossWeights",
    "MetricsReport",
    "MODES",
    "NetworkSpec",
    "NumericError",
    "PruneConfig",
    "ShapeError",
    "SharedSpace",
    "TaskDataset",
    "TaskFactors",
    "TaskHead",
    "TaskStreamSpec",
    "TrainConfig",
    "TrainingError",
    "append",
    "compose_dense",
    "compress",
    "compute_metrics",
    "empty_space",
    "energy_prune",
    "expand",
    "extract_subnetwork",
    "generate_stream",
    "l_orth",
    "l_sparse",
    "load_dataset",
    "load_dense_models",
    "load_space",
    "load_task_factors",
    "param_count",
    "predict_logits",
    "retained_rank",
    "run_continual",
    "save_dataset",
    "save_dense_models",
    "save_space",
    "save_task_factors",
    "size_bytes",
    "sort_by_magnitude",
    "train_task",
]
