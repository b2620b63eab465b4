"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes, so raising the right class
matters: ConfigError/DomainError -> 2, DataError/ParseError -> 3,
CheckpointError -> 4, InterpretabilityError -> 5.
"""


class RestcnError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(RestcnError):
    """Array shapes or channel counts are incompatible."""


class DomainError(RestcnError):
    """A value lies outside its mathematical domain (bad rate, label, percentile...)."""


class ConfigError(RestcnError):
    """A configuration is internally inconsistent or incomplete."""


class ContractError(RestcnError):
    """An operation was called on state it was not built from (e.g. wrong cache)."""


class DataError(RestcnError):
    """Dataset-level problem: unknown ids, empty splits, bad directories."""


class ParseError(DataError):
    """Malformed skeleton file. Carries the 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CheckpointError(RestcnError):
    """Checkpoint file is missing, truncated, corrupt, or version-mismatched."""


class InterpretabilityError(RestcnError):
    """Filter tracing refused because the model breaks the additive decomposition."""
