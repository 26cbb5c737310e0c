"""Exception hierarchy shared by every beamkit module."""


class BeamkitError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it."""

    exit_code = 4


class InvalidInputError(BeamkitError, ValueError):
    exit_code = 2


class DegenerateInputError(InvalidInputError):
    pass


class ShapeError(BeamkitError, ValueError):
    exit_code = 2


class RankError(BeamkitError, ValueError):
    pass


class NumericError(BeamkitError, ArithmeticError):
    pass


class CapacityError(BeamkitError, ValueError):
    exit_code = 2


class ConfigError(BeamkitError, ValueError):
    exit_code = 2


class FormatError(BeamkitError):
    """Malformed dataset or checkpoint file."""

    exit_code = 3

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(FormatError):
    pass


class InfeasibleInstanceError(BeamkitError):
    pass


class LifecycleError(BeamkitError, RuntimeError):
    pass


class TrainingAbort(BeamkitError):
    """Raised when the loss or a gradient stops being finite."""

    def __init__(self, message, batch_index=None, sample_index=None, last_good=None):
        super().__init__(message)
        self.batch_index = batch_index
        self.sample_index = sample_index
        self.last_good = last_good
