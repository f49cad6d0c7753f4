"""Grouped token-pruning pose transformer, trainable at desk scale."""

from .autodiff import (ParamStore, ShapeError, Tensor, backward, count_macs,
                       gradcheck)
from .model import ForwardResult, PoseModel, init_params, parameter_layout
from .pruning import PruneDecision, PruneEngine, retained_count, select, softmax_pool
from .schema import (ConfigError, KeypointSchema, ModelConfig, SchemaError,
                     build_schema, load_config, validate_config)

__all__ = [
    "ConfigError", "ForwardResult", "KeypointSchema", "ModelConfig",
    "ParamStore", "PoseModel", "PruneDecision", "PruneEngine", "SchemaError",
    "ShapeError", "Tensor", "backward", "build_schema", "count_macs",
    "gradcheck", "init_params", "load_config", "parameter_layout",
    "retained_count", "select", "softmax_pool", "validate_config",
]

__version__ = "0.1.0"
