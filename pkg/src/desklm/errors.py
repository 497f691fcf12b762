"""Error types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ValueError):
    """Non-finite or otherwise invalid numeric input."""


class TracingError(RuntimeError):
    """Backward requested on a value that was not produced under tracing."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class LengthError(ValueError):
    """Sequence or cache length exceeds the configured maximum."""


class VocabularyError(ValueError):
    """Token id outside the vocabulary."""


class StateError(ValueError):
    """Optimizer or trainer state inconsistent with the given inputs."""
