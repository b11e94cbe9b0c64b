"""Exception hierarchy.

Every error raised by the package derives from :class:`MvsUqError`. Errors that
signal bad user input carry ``exit_code = 2``; everything else is treated as a
processing-stage failure (``exit_code = 3``) by the CLI.
"""


class MvsUqError(Exception):
    exit_code = 3


class InputError(MvsUqError, ValueError):
    exit_code = 2


# geometry
class NonPositiveDepth(MvsUqError, ValueError):
    pass


class ParallelRays(MvsUqError, ValueError):
    pass


class CoincidentCenters(MvsUqError, ValueError):
    pass


class DegeneratePoint(MvsUqError, ValueError):
    pass


class ExcessiveConvergence(MvsUqError, ValueError):
    pass


class NonPositiveDisparity(MvsUqError, ValueError):
    pass


# stereo
class WindowTooLarge(InputError):
    pass


class EmptyDisparityRange(InputError):
    pass


class DimensionMismatch(MvsUqError, ValueError):
    pass


class ImageTooSmall(InputError):
    pass


# fusion
class InsufficientViews(MvsUqError, ValueError):
    exit_code = 2


class KBelowTwo(InputError):
    pass


class FrameMismatch(MvsUqError, ValueError):
    pass


# evaluation
class EmptyCloud(MvsUqError, ValueError):
    pass


class EmptyReference(EmptyCloud):
    pass


class DegenerateGeometry(MvsUqError, ValueError):
    pass


class NonMonotonicEdges(InputError):
    pass


class InsufficientBins(MvsUqError, ValueError):
    pass


# uncertainty
class DegenerateSamples(MvsUqError, ValueError):
    pass


class NoSamples(MvsUqError, ValueError):
    pass


class EmptyTable(MvsUqError, ValueError):
    pass


# harness
class InvalidSpec(InputError):
    pass


class NoIntersection(MvsUqError, ValueError):
    pass


class StageError(MvsUqError):
    """A pipeline stage failed on a specific unit of work."""

    def __init__(self, stage, unit, cause):
        self.stage = stage
        self.unit = unit
        self.cause = cause
        super().__init__(f"stage {stage!r} failed on {unit}: {type(cause).__name__}: {cause}")
