"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: configuration/usage/ingestion errors
exit with 2, numerical and training failures with 3.
"""


class IcldiagError(Exception):
    """Base class for all package errors."""


class ConfigError(IcldiagError):
    """Invalid user-supplied configuration or violated data contract."""


class IngestionError(ConfigError):
    """Malformed input file; the message names the offending row/column."""


class UsageError(IcldiagError):
    """API misuse: bad shapes, out-of-range arguments, missing state."""


class TrainingDivergenceError(IcldiagError):
    """Training produced a non-finite loss."""


class NumericalError(IcldiagError):
    """A numerical routine failed (factorization, conditioning)."""
