"""Exception types shared across revoxf."""


class RevoxfError(Exception):
    """Base class for every error raised by this package."""


class DomainError(RevoxfError, ValueError):
    """An argument lies outside the domain of the operation."""


class BehindCameraError(DomainError):
    """A world point projects onto or behind the camera plane."""


class NumericError(RevoxfError, ArithmeticError):
    """A non-finite value showed up where finite values are required.

    ``term`` names the loss term or parameter block at fault.
    """

    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term


class StaleTraceError(RevoxfError):
    """A ray trace was produced against an older grid state."""


class FormatError(RevoxfError):
    """A binary file (PFM, checkpoint) is malformed or truncated."""


class LoadError(RevoxfError):
    """A dataset on disk is structurally invalid."""


class DepthFileError(RevoxfError, OSError):
    """An external depth map is missing or has the wrong shape."""
