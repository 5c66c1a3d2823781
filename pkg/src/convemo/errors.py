"""Exception hierarchy. Each family maps to one CLI exit code."""


class ConvEmoError(Exception):
    exit_code = 1


class ConfigError(ConvEmoError, ValueError):
    exit_code = 2


class DimensionError(ConfigError):
    """Operand shapes do not agree."""


class DataError(ConvEmoError, ValueError):
    exit_code = 3


class NumericError(ConvEmoError, FloatingPointError):
    exit_code = 4


class DegenerateRowError(NumericError):
    """A normalisation row has nothing to normalise over (fully masked / zero degree)."""


class ContractError(ConvEmoError, ValueError):
    exit_code = 2
