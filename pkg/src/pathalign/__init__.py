"""Joint image-report representation learning on synthetic pairs:
instance-level contrastive alignment, query-token pathology-level
alignment, and patch-covariance prediction, on a self-contained autodiff
engine."""

from .config import TrainConfig, load_config, save_config
from .encoders import EncoderConfig
from .errors import (CheckpointError, ConfigError, ContractError, DimensionError,
                     DomainError, PathalignError, TrainingDivergence)
from .synth import SyntheticPair, WorldSpec, generate_pair, make_split
from .tensor import Tensor, grad_check, no_grad

__all__ = [
    "TrainConfig", "load_config", "save_config", "EncoderConfig",
    "CheckpointError", "ConfigError", "ContractError", "DimensionError",
    "DomainError", "PathalignError", "TrainingDivergence",
    "SyntheticPair", "WorldSpec", "generate_pair", "make_split",
    "Tensor", "grad_check", "no_grad",
]
