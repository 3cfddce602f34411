"""Exception hierarchy shared by every module."""


class HandTrackError(Exception):
    """Base class for all errors raised by handtrack."""


class InvalidInputError(HandTrackError, ValueError):
    pass


class CalibrationError(HandTrackError):
    pass


class BehindCameraError(HandTrackError, ValueError):
    pass


class InvalidDepthError(HandTrackError, ValueError):
    pass


class DepthHoleError(HandTrackError):
    """No valid depth sample around the requested pixel."""


class NoDataError(HandTrackError):
    """The observation has no usable joint this frame."""


class FormatError(HandTrackError):
    """A stream or config file is malformed or has the wrong version."""


class MissingGroundTruthError(HandTrackError):
    pass


class VersionMismatchError(FormatError):
    """The file is well formed but written by an unsupported format version."""
