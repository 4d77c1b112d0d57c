"""Exception taxonomy shared by all modules.

The CLI maps these onto exit codes: ConfigError -> 2, DataError (and
subclasses) -> 3, NumericError -> 4.
"""


class RcftError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(RcftError):
    """Shapes or axes violate an operation's contract."""


class ContractError(RcftError):
    """An operation was called in a way its contract forbids."""


class ConfigError(RcftError):
    """Invalid or inconsistent configuration."""


class DataError(RcftError):
    """Missing, malformed, or out-of-range input data."""


class FormatError(DataError):
    """A file could not be decoded in its declared format."""


class StratificationError(DataError):
    """A class would be absent from one of the requested splits."""


class StateError(RcftError):
    """Stateful component used before it was initialized or fitted."""


class NumericError(RcftError):
    """Non-finite values or numerical breakdown."""


class CheckpointError(RcftError):
    """Corrupt checkpoint or config fingerprint mismatch."""


class MetricError(RcftError):
    """A metric is undefined for the given inputs."""


class StatsError(RcftError):
    """A summary statistic is undefined for the given group sizes."""
