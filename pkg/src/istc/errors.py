"""Exception hierarchy shared by all modules."""


class IstcError(Exception):
    """Base class for every error raised by this package."""


class ZeroColumn(IstcError, ValueError):
    def __init__(self, index):
        super().__init__(f"column {index} has (near) zero norm")
        self.index = index


class SingleAtom(IstcError, ValueError):
    pass


class ShapeMismatch(IstcError, ValueError):
    pass


class NoConvergence(IstcError, RuntimeError):
    pass


class ZeroReference(IstcError, ValueError):
    pass


class StepTooLarge(IstcError, ValueError):
    pass


class BadRange(IstcError, ValueError):
    pass


class GammaOutOfRange(IstcError, ValueError):
    pass


class ScheduleMismatch(IstcError, ValueError):
    pass


class CertificationUnreachable(IstcError, RuntimeError):
    pass


class TooManyAtoms(IstcError, ValueError):
    pass


class NoKKTPoint(IstcError, RuntimeError):
    pass


class InsufficientSamples(IstcError, ValueError):
    pass


class CacheMismatch(IstcError, ValueError):
    pass


class DivergedLoss(IstcError, FloatingPointError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class BatchError(IstcError):
    """Wraps an error raised while solving one problem of a batch."""

    def __init__(self, index, error):
        super().__init__(f"problem {index}: {error!r}")
        self.index = index
        self.error = error
