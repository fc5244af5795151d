"""Exception hierarchy shared by every module."""


class SlamError(Exception):
    """Base class for all library errors."""


class DegenerateDisparity(SlamError):
    pass


class InsufficientParallax(SlamError):
    pass


class NegativeDepth(SlamError):
    pass


class InsufficientCorrespondences(SlamError):
    pass


class NoConsensus(SlamError):
    pass


class TooFewAssociations(SlamError):
    pass


class BehindCamera(SlamError):
    pass


class OutsideFov(SlamError):
    pass


class NoConvergence(SlamError):
    pass


class InvalidCalibration(SlamError):
    def __init__(self, key, message=""):
        self.key = key
        super().__init__(f"invalid calibration value for '{key}'" + (f": {message}" if message else ""))


class ParseError(SlamError):
    def __init__(self, message, line=None, offset=None):
        self.line = line
        self.offset = offset
        where = ""
        if line is not None:
            where = f" (line {line})"
        elif offset is not None:
            where = f" (byte offset {offset})"
        super().__init__(message + where)


class DimensionMismatch(SlamError):
    pass


class TooFewResiduals(SlamError):
    pass


class Diverged(SlamError):
    pass


class EmptyWindow(SlamError):
    pass


class InsufficientTracks(SlamError):
    pass


class TrackingLost(SlamError):
    pass


class FisheyeUnregistered(SlamError):
    pass


class RelocalizationFailed(SlamError):
    pass


class CorpusTooSmall(SlamError):
    pass


class InvalidSpec(SlamError):
    pass


class NoRegisteredPairs(SlamError):
    pass


class EmptyErrors(SlamError):
    pass
