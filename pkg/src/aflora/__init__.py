"""Low-rank adapters with feature-transformation vectors and adaptive freezing of
the projection matrices, on a small numpy transformer encoder."""

from .accounting import ShapeSpec, adapter_flops, analytic_param_count, total_training_flops
from .adapters import AdapterLayer, AdapterMode, adapter_forward, adapter_init, effective_delta
from .config import ExperimentConfig
from .errors import AfloraError, ConfigError, ContractError, DimensionError, ScheduleError
from .freezing import (
    FreezeController,
    FreezeSchedule,
    Pairing,
    ScoreState,
    ScoreVariant,
    freeze_fraction,
    freezing_score,
    update_score_state,
)
from .model import ModelConfig, TransformerModel, build_model, model_forward
from .tasks import Dataset, SyntheticTask, generate_task
from .tensor import SeededRng, Tensor, backward
from .trainer import ExperimentReport, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AdapterLayer",
    "AdapterMode",
    "AfloraError",
    "ConfigError",
    "ContractError",
    "Dataset",
    "DimensionError",
    "ExperimentConfig",
    "ExperimentReport",
    "FreezeController",
    "FreezeSchedule",
    "ModelConfig",
    "Pairing",
    "ScheduleError",
    "ScoreState",
    "ScoreVariant",
    "SeededRng",
    "ShapeSpec",
    "SyntheticTask",
    "Tensor",
    "TrainConfig",
    "TransformerModel",
    "adapter_flops",
    "adapter_forward",
    "adapter_init",
    "analytic_param_count",
    "backward",
    "build_model",
    "effective_delta",
    "freeze_fraction",
    "freezing_score",
    "generate_task",
    "model_forward",
    "total_training_flops",
    "train",
    "update_score_state",
]
