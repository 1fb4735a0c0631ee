"""Exception hierarchy shared by all rim modules.

The CLI maps these onto process exit codes: config errors exit 2, data
errors 3, numeric errors 4, oracle mismatches 5.
"""


class RimError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ConfigError(RimError):
    """Invalid configuration: bad schema kind, bad option value, bad shapes."""

    exit_code = 2


class SchemaError(ConfigError):
    """Schema violates its invariants (label/timestamp/id cardinality, kinds)."""


class DataError(RimError):
    """The data itself is unusable: parse failures, missing fields, bad files."""

    exit_code = 3


class ParseError(DataError):
    """Malformed input row; carries the 1-based line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class FormatError(DataError):
    """Binary artifact has wrong magic, wrong version, or is truncated."""


class StaleCacheError(DataError):
    """Retrieval cache provenance does not match the live index/parameters."""


class NumericError(RimError):
    """A non-finite value appeared during model evaluation."""

    exit_code = 4


class OracleMismatchError(RimError):
    """Fast path disagreed with the exhaustive cross-check."""

    exit_code = 5


class DataWarning(UserWarning):
    """Recoverable data oddity (degenerate bins, empty split partitions)."""
