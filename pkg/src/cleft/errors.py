"""Exception types shared across the package."""


class CleftError(Exception):
    """Base class for all package errors."""


class DimensionError(CleftError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(CleftError, ValueError):
    """A configuration value is invalid or inconsistent."""


class ContractError(CleftError, ValueError):
    """A call violated a documented precondition."""


class VocabularyError(CleftError, KeyError):
    """A token is missing from the vocabulary."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class NumericError(CleftError, FloatingPointError):
    """Non-finite values showed up where they must not."""


class CheckpointError(CleftError, ValueError):
    """A checkpoint or tensor file is malformed or corrupted."""
