"""Daily well-data forecasting with recurrent and attention models on a small numpy autodiff core."""

from .dataio import FeatureSet, ScalerParams, WellSeries, generate_synthetic, prepare_global, prepare_well
from .errors import ConfigError, ContractError, DataError, NumericError, ShapeError, WellcastError
from .metrics import MetricReport, evaluate
from .models import ModelConfig, build_model
from .tensor import Tensor, backward, grad_check, no_grad
from .training import Checkpoint, TrainConfig, fine_tune, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "ConfigError", "ContractError", "DataError", "FeatureSet", "MetricReport",
    "ModelConfig", "NumericError", "ScalerParams", "ShapeError", "Tensor", "TrainConfig",
    "WellSeries", "WellcastError", "backward", "build_model", "evaluate", "fine_tune",
    "generate_synthetic", "grad_check", "no_grad", "prepare_global", "prepare_well", "train",
]
