"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError (and its
format subclasses) -> 3, NumericError -> 4.
"""


class MilError(Exception):
    """Base class for all miltransfer errors."""


class ConfigError(MilError):
    """Invalid configuration: bad architecture fields, malformed experiment config."""


class DataError(MilError):
    """Invalid or missing data: manifests, feature files, sampling preconditions."""


class FeatureFormatError(DataError):
    """Malformed feature file."""


class BadMagicError(FeatureFormatError):
    """Feature file does not start with the expected magic bytes."""


class TruncatedPayloadError(FeatureFormatError):
    """Feature file payload is shorter than its declared dimensions require."""


class DimensionOverflowError(FeatureFormatError):
    """Declared dimensions are zero or too large to describe a real payload."""


class CheckpointFormatError(DataError):
    """Malformed checkpoint container."""


class VersionMismatchError(CheckpointFormatError):
    """Checkpoint or feature file written with an unsupported format version."""


class ShapeMismatchError(CheckpointFormatError):
    """Stored parameter shapes disagree with the embedded model config."""


class NumericError(MilError):
    """Non-finite loss or gradients encountered during optimization."""


class UndefinedMetricError(MilError):
    """Metric is undefined for the given inputs (e.g. single-class AUROC)."""
