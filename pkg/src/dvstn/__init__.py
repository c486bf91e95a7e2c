"""Tiny CNN engine and tooling for DVS fall detection."""

from .errors import (BindingError, ConfigurationError, DataError, DimensionError, DvstnError, FormatError,
                     GraphError, TrainingDiverged, TransformError)
from .graph import (CompiledModel, LayerSpec, ModelSpec, WeightStore, compile_model, count_macs, count_params,
                    forward, init_weights, load_spec, save_spec, validate_and_plan)
from .compression import apply_passes, fold_batchnorm, scale_channels, separable_factorize, set_input_resolution
from .zoo import MODEL_IDS, bn_inception, canonical_model, load_canonical

__version__ = "0.1.0"

__all__ = [
    "BindingError", "ConfigurationError", "DataError", "DimensionError", "DvstnError", "FormatError",
    "GraphError", "TrainingDiverged", "TransformError",
    "CompiledModel", "LayerSpec", "ModelSpec", "WeightStore", "compile_model", "count_macs", "count_params",
    "forward", "init_weights", "load_spec", "save_spec", "validate_and_plan",
    "apply_passes", "fold_batchnorm", "scale_channels", "separable_factorize", "set_input_resolution",
    "MODEL_IDS", "bn_inception", "canonical_model", "load_canonical",
]
