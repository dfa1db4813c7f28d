"""
Exception hierarchy shared by the numerical tools, services and CLI.
"""


class StereoSSMError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(StereoSSMError):
    pass


class ConfigError(StereoSSMError):
    pass


class NumericError(StereoSSMError):
    """Non-finite value detected; ``index`` locates the first offender."""

    def __init__(self, message: str, index: int | tuple[int, ...] | None = None):
        super().__init__(message)
        self.index = index


class EmptyMaskError(StereoSSMError):
    pass


class ToleranceError(StereoSSMError):
    pass


class FormatError(StereoSSMError):
    pass


class ArchiveError(FormatError):
    pass


class DuplicateTensorError(ArchiveError):
    pass


class TruncatedArchiveError(ArchiveError):
    pass


class BadMagicError(ArchiveError):
    pass


class UnknownDtypeError(ArchiveError):
    pass


class PfmFormatError(FormatError):
    pass


class PpmFormatError(FormatError):
    pass
