"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes do not agree."""


class ConfigError(ValueError):
    """A configuration value is invalid."""


class MaskError(ValueError):
    """An attention mask leaves a query row with no admissible key."""


class NonFiniteError(ValueError):
    """A NaN or infinity reached a matrix or a loss value."""


class StreamingError(RuntimeError):
    """The segment-ordering contract of a streaming state was violated."""


class CheckpointError(ValueError):
    """A checkpoint file is corrupted or belongs to another configuration."""


class SchemaError(ValueError):
    """An input file does not follow the expected record schema."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
