"""Exception types shared across the package."""


class StclError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it."""

    exit_code = 1


class DimensionError(StclError, ValueError):
    exit_code = 4


class StateError(StclError, RuntimeError):
    exit_code = 4


class NumericError(StclError, ArithmeticError):
    exit_code = 4


class DegenerateInputError(StclError, ValueError):
    exit_code = 4


class LabelError(StclError, IndexError):
    exit_code = 4


class GenerationError(StclError, RuntimeError):
    exit_code = 4


class ConfigError(StclError, ValueError):
    exit_code = 3


class UsageError(StclError):
    exit_code = 2


class CheckpointError(StclError, IOError):
    exit_code = 5
