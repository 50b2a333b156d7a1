"""Exception hierarchy.

Two families matter to callers: :class:`InputError` for malformed or
inconsistent inputs and :class:`NumericalError` for geometry or optimization
failures.  The CLI maps them to exit codes 3 and 4.
"""


class DualcapError(Exception):
    pass


class InputError(DualcapError):
    pass


class NumericalError(DualcapError):
    pass


class FormatError(InputError):
    """A file could not be parsed or violates its schema."""


class SizeMismatch(InputError):
    pass


class EmptyInput(InputError):
    pass


class EmptyCorrespondences(EmptyInput):
    pass


class EmptyCloud(EmptyInput):
    pass


class EmptyObservations(EmptyInput):
    pass


class LengthMismatch(InputError):
    pass


class FrameMisalignment(InputError):
    pass


class TooFewRegistrations(InputError):
    pass


class InsufficientOverlap(InputError):
    pass


class ScaleNotUnity(InputError):
    pass


class NoContactFrames(InputError):
    pass


class SpecInvalid(InputError):
    pass


class BehindCamera(NumericalError):
    pass


class NonPositiveDepth(NumericalError):
    pass


class DegenerateConfiguration(NumericalError):
    pass


class TooFewConfidentViews(NumericalError):
    pass


class DegenerateRays(NumericalError):
    pass


class NonFiniteLoss(NumericalError):
    def __init__(self, message, last_params=None):
        super().__init__(message)
        self.last_params = last_params


class NoValidJoints(NumericalError):
    pass


class EmptySurface(NumericalError):
    pass


class ZeroDisplacement(NumericalError):
    pass
