"""Exception types shared across the package."""


class GwnetError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(GwnetError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(GwnetError, ValueError):
    """A caller broke an operation's precondition."""


class ValidationError(GwnetError, ValueError):
    """Input data failed a value check (negative weights, bad ratios, ...)."""


class ConfigError(GwnetError, ValueError):
    """Model or run configuration is inconsistent.

    ``key`` names the offending configuration field when one is known.
    """

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class SequenceTooShortError(DimensionError):
    """A valid-mode convolution would produce an empty time axis."""


class ParseError(GwnetError, ValueError):
    """A data file could not be parsed; ``line`` is 1-based when known."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        super().__init__(message)
        self.path = path
        self.line = line


class CorruptCheckpointError(GwnetError, ValueError):
    """A checkpoint file is truncated, has the wrong version, or mismatches its config."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class DivergenceError(GwnetError, RuntimeError):
    """Training produced a non-finite loss."""
