"""Exception hierarchy shared across the package."""


class MMSentError(Exception):
    """Base class for every error raised by mmsent."""


class ShapeError(MMSentError, ValueError):
    pass


class ParameterError(MMSentError, ValueError):
    pass


class PreconditionError(MMSentError, ValueError):
    pass


class GradientStateError(MMSentError, RuntimeError):
    """Raised when backward() is misused (consumed graph, stale grads, non-scalar loss)."""


class ConfigError(MMSentError, ValueError):
    pass


class DataError(MMSentError, ValueError):
    pass


class ManifestParseError(DataError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SchemaError(DataError):
    pass


class IntegrityError(DataError):
    pass


class NumericalError(MMSentError, ArithmeticError):
    """Non-finite loss or gradient encountered during training."""


class CheckpointError(MMSentError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    def __init__(self, found: int, expected: int):
        super().__init__(
            f"checkpoint format version {found} is incompatible with supported version {expected}"
        )
        self.found = found
        self.expected = expected
