"""Exception taxonomy shared by all mixnet modules."""


class MixNetError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(MixNetError):
    """Tensor / volume shapes are inconsistent with an operation's contract."""


class ParameterError(MixNetError):
    """A numeric argument is outside its legal range."""


class DataError(MixNetError):
    """File contents, labels or dataset structure are invalid."""


class ConfigError(MixNetError):
    """A configuration object or config file is malformed."""


class PolicyError(MixNetError):
    """An augmentation parameter is outside the configured policy."""


class BuildError(MixNetError):
    """A network cannot be assembled from the given configuration."""


class TrainingDiverged(MixNetError):
    """Non-finite values were produced during optimization."""


class VerificationFailure(MixNetError):
    """A verification suite reported at least one failing check."""
