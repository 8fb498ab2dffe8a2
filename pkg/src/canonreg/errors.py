"""Exception hierarchy.

Every error carries an ``exit_code`` used by the command-line front end:
2 for configuration problems, 3 for data problems, 4 for numerical failures.
"""


class CanonRegError(Exception):
    exit_code = 3


class ConfigError(CanonRegError):
    exit_code = 2


class BadParameter(CanonRegError, ValueError):
    exit_code = 2


class EmptyCloud(CanonRegError, ValueError):
    pass


class DegenerateShape(CanonRegError, ValueError):
    pass


class SizeMismatch(CanonRegError, ValueError):
    pass


class ShapeError(CanonRegError, ValueError):
    pass


class InsufficientPairs(CanonRegError, ValueError):
    pass


class DegenerateConfiguration(CanonRegError, ValueError):
    exit_code = 4


class StateError(CanonRegError, RuntimeError):
    exit_code = 4


class TrainingDiverged(CanonRegError, RuntimeError):
    exit_code = 4

    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss at epoch {epoch}")
