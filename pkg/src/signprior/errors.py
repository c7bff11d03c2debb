"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to.
"""


class SignPriorError(Exception):
    exit_code = 1


class ConfigError(SignPriorError, ValueError):
    exit_code = 2


class ContractError(SignPriorError, ValueError):
    """Shape or dimension mismatch between collaborating objects."""

    exit_code = 2


class InputError(SignPriorError, ValueError):
    exit_code = 2


class MissingArtifactError(SignPriorError, FileNotFoundError):
    exit_code = 3


class CheckpointError(SignPriorError):
    exit_code = 3


class NumericError(SignPriorError, ArithmeticError):
    exit_code = 4


class UndefinedMetricError(SignPriorError, ValueError):
    """Metric is mathematically undefined for the batch (e.g. AUROC on one class)."""

    exit_code = 4
