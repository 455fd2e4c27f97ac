"""Exception types shared across the package."""


class FimpError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(FimpError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class MaskedSoftmaxError(FimpError, ValueError):
    """A softmax row has no allowed entries."""


class NonFiniteError(FimpError, ValueError):
    """A value that must be finite is NaN or infinite."""


class NonFiniteGradientError(NonFiniteError):
    """An optimizer step saw a NaN/inf gradient and was aborted."""

    def __init__(self, names):
        self.names = list(names)
        super().__init__(f"non-finite gradient in parameters: {', '.join(self.names)}")


class SceneFormatError(FimpError, ValueError):
    """A scene or label file violates the JSON-lines schema."""


class CheckpointError(FimpError, ValueError):
    """A checkpoint file is malformed or does not match the model."""


class ConfigError(FimpError, ValueError):
    """A configuration file or override is invalid."""
