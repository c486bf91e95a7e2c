"""Exception hierarchy shared by every stage of the engine."""


class DvstnError(Exception):
    """Base class; ``layer`` names the offending layer when one is known."""

    def __init__(self, message, layer=None):
        if layer is not None:
            message = f"[{layer}] {message}"
        super().__init__(message)
        self.layer = layer


class DimensionError(DvstnError, ValueError):
    """Operand extents disagree (channel counts, weight shapes, ranks)."""


class ConfigurationError(DvstnError, ValueError):
    """Layer geometry is impossible, e.g. a non-positive output extent."""


class DataError(DvstnError, ValueError):
    """Numeric content is invalid: NaN/Inf, negative variance, empty dataset."""


class GraphError(DvstnError, ValueError):
    """Malformed layer DAG: duplicate ids, dangling inputs, bad output."""


class BindingError(DvstnError):
    """A weight store does not match the model it is bound to."""


class FormatError(DvstnError):
    """A serialized file is corrupt, truncated or of an unknown version."""


class TransformError(DvstnError):
    """A compression pass cannot be applied to the given model."""


class TrainingDiverged(DvstnError, RuntimeError):
    """Loss became non-finite during training."""
