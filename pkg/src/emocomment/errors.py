"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """A configuration value is out of range or the combination is invalid."""


class DataError(ValueError):
    """Input data violates a required invariant (empty corpus, bad label, ...)."""


class CorpusFormatError(ValueError):
    """A corpus file line failed to parse; carries the 1-based line number."""

    def __init__(self, line_no, message):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class TrainingError(RuntimeError):
    """Training cannot proceed (non-finite gradient or loss)."""


class UsageError(TypeError):
    """An API was called in a way its contract forbids."""


class CheckpointError(RuntimeError):
    """A checkpoint file is corrupt, truncated, or incompatible."""
