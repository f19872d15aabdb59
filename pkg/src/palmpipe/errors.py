"""Exception hierarchy.

Every error carries a stable ``code`` (the class name) that the CLI logs and
the HTTP service returns, so failures can be grepped and scripted against.
"""


class PalmError(Exception):
    """Base class for all pipeline errors."""

    @property
    def code(self) -> str:
        return type(self).__name__


# imaging
class OutOfBounds(PalmError):
    pass


class BadWindow(PalmError):
    pass


# geometry
class DegenerateConfiguration(PalmError):
    pass


class SingularHomography(PalmError):
    pass


# tps
class InsufficientPoints(PalmError):
    pass


class CollinearPoints(PalmError):
    pass


class DuplicateSourcePoints(PalmError):
    pass


# shared shape / identity checks
class DimensionMismatch(PalmError):
    pass


class ExtractorMismatch(PalmError):
    pass


# keypoints
class ParseError(PalmError):
    pass


class SchemaViolation(PalmError):
    pass


class SegmentationFailed(PalmError):
    pass


class ValleysNotFound(PalmError):
    pass


# fusion
class WrongArity(PalmError):
    pass


class OutOfRangeScore(PalmError):
    pass


class LengthMismatch(PalmError):
    pass


# evaluation
class EmptyManifest(PalmError):
    pass


class MissingClass(PalmError):
    pass


class ReportIoError(PalmError):
    pass


# gallery
class DuplicateCapture(PalmError):
    pass


class UnknownSubject(PalmError):
    pass


class EmptyGallery(PalmError):
    pass


# synth
class BadSize(PalmError):
    pass
