"""somnoflow: wake/sleep staging of pulse-oximeter heart rate.

A self-contained sequence-to-sequence staging engine: dense tensors with
reverse-mode automatic differentiation, convolutional/attention model
variants, focal-loss training with Adam, per-patient evaluation metrics,
and a synthetic data generator for desk-scale experiments.
"""

from .autodiff import Tensor, backward, grad_check, no_grad, set_default_dtype
from .data import (
    Batch,
    GeneratorConfig,
    SleepRecord,
    StandardizationStats,
    make_batches,
    repair_hr,
    standardize,
    synthesize_dataset,
)
from .errors import SomnoflowError
from .evaluation import ConfusionCounts, MetricsReport, confusion, metrics
from .model import ModelConfig, ModelParameters, SleepStager, init_parameters
from .training import (
    Checkpoint,
    LossConfig,
    OptimizerConfig,
    TrainConfig,
    adam_step,
    focal_loss,
    load_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "grad_check",
    "no_grad",
    "set_default_dtype",
    "Batch",
    "GeneratorConfig",
    "SleepRecord",
    "StandardizationStats",
    "make_batches",
    "repair_hr",
    "standardize",
    "synthesize_dataset",
    "SomnoflowError",
    "ConfusionCounts",
    "MetricsReport",
    "confusion",
    "metrics",
    "ModelConfig",
    "ModelParameters",
    "SleepStager",
    "init_parameters",
    "Checkpoint",
    "LossConfig",
    "OptimizerConfig",
    "TrainConfig",
    "adam_step",
    "focal_loss",
    "load_checkpoint",
    "save_checkpoint",
    "train",
    "__version__",
]
