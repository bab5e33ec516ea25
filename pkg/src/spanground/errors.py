"""Exception hierarchy shared across the toolkit.

Each error carries the process exit code the CLI maps it to:
1 usage/configuration, 2 data, 3 numeric failure.
"""


class SpangroundError(Exception):
    exit_code = 2


class UsageError(SpangroundError):
    exit_code = 1


class ConfigurationError(SpangroundError):
    """Invalid configuration value or incompatible artifacts (e.g. feature_dim mismatch)."""

    exit_code = 1


class CorpusError(SpangroundError):
    """Schema or invariant violation in corpus files."""

    exit_code = 2


class DataError(SpangroundError):
    """Malformed or missing pipeline artifact."""

    exit_code = 2


class NoDecodableSpanError(DataError):
    """No window offered a scoreable phrase pair."""


class TrainingError(SpangroundError):
    """Non-finite loss or gradient during head training."""

    exit_code = 3


class DecodeError(SpangroundError):
    """Numeric failure during span or sequence decoding."""

    exit_code = 3
