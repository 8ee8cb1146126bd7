"""Shared exception types, mapped to CLI exit codes in cli.py."""


class DimensionError(ValueError):
    """Operand shapes incompatible with the operation."""


class InputError(ValueError):
    """Invalid input values (non-finite image, negative density, ...)."""


class ConfigurationError(ValueError):
    """Invalid configuration (bad flag, missing prior, n_frames < 2, ...)."""


class StateError(RuntimeError):
    """Required runtime state missing (e.g. feature cache not populated)."""


class TrainingError(RuntimeError):
    """Non-finite loss or parameters during optimization."""


class EvaluationError(RuntimeError):
    """Function evaluation failed (e.g. non-finite value in grad_check)."""
