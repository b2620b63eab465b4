"""Residual temporal convolutional networks for 3D-skeleton action
recognition, with hand-derived gradients and filter-level explanations."""

from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    DomainError,
    InterpretabilityError,
    ParseError,
    RestcnError,
)
from .model import (
    ActivationCache,
    LayerSpec,
    ModelConfig,
    ResTcnModel,
    backward,
    build_model,
    capacity_config,
    decompose,
    forward,
    interpretable_config,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from .ops import ConvFilterBank, TemporalMap
from .train import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ActivationCache",
    "CheckpointError",
    "ConfigError",
    "ContractError",
    "ConvFilterBank",
    "DataError",
    "DimensionError",
    "DomainError",
    "InterpretabilityError",
    "LayerSpec",
    "ModelConfig",
    "ParseError",
    "ResTcnModel",
    "RestcnError",
    "TemporalMap",
    "TrainConfig",
    "backward",
    "build_model",
    "capacity_config",
    "decompose",
    "evaluate",
    "forward",
    "interpretable_config",
    "load_checkpoint",
    "predict",
    "save_checkpoint",
    "train",
]
