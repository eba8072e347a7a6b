"""Exception classes shared across the package, mapped to CLI exit codes."""


class PmsaclError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(PmsaclError):
    """Bad configuration: unknown key, unparseable value, invalid range."""

    exit_code = 2


class MissingArtifactError(PmsaclError):
    """A command depends on an artifact that does not exist."""

    exit_code = 3


class NumericError(PmsaclError):
    """Non-finite values or other numeric failures during computation."""

    exit_code = 4


class FormatError(PmsaclError):
    """Malformed binary artifact: bad magic, truncation, overflow."""

    exit_code = 3


class DegenerateEmbeddingError(NumericError):
    """Embedding coincides with its class centre; normalisation undefined."""
