"""Exception hierarchy shared by all somnoflow modules."""


class SomnoflowError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(SomnoflowError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(SomnoflowError):
    """A caller violated an operation's precondition."""


class DataError(SomnoflowError):
    """A record is unusable (e.g. no good-quality samples at all)."""


class ConfigError(SomnoflowError):
    """A configuration value or combination is invalid."""


class ConfigMismatchError(ConfigError):
    """A checkpoint was produced under a different model configuration."""


class ParseError(SomnoflowError):
    """A data file is malformed; the message names file and line."""


class CorruptionError(SomnoflowError):
    """A checkpoint file is truncated or inconsistent with its header."""


class NumericalError(SomnoflowError):
    """Training produced a non-finite quantity."""
