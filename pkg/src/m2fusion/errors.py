"""Exception hierarchy shared by every module.

The CLI maps :class:`InputError` to exit code 2 and :class:`NumericalError`
to exit code 3.
"""


class M2Error(Exception):
    pass


class InputError(M2Error, ValueError):
    """Bad shapes, missing files, malformed manifests."""


class NumericalError(M2Error, ArithmeticError):
    pass


class ConvergenceError(NumericalError):
    pass


class RankDeficiencyError(NumericalError):
    pass


class TrainingDiverged(NumericalError):
    def __init__(self, epoch, loss):
        super().__init__(f"non-finite training loss {loss!r} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss
