"""Exception hierarchy shared by every module and mapped to CLI exit codes."""


class ItofuseError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(ItofuseError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class BehindCameraError(DomainError):
    """A point cannot be projected because it is not in front of the camera."""


class ShapeError(ItofuseError, ValueError):
    """Array or tensor shapes are incompatible."""


class ValidationError(ItofuseError, ValueError):
    """A configuration, calibration or domain object violates its invariants."""


class SingularFitError(ItofuseError, ArithmeticError):
    """A least-squares system is rank deficient."""


class EmptyMaskError(ItofuseError, ValueError):
    """A reduction was requested over zero valid pixels."""


class FormatError(ItofuseError, ValueError):
    """Base class for on-disk format problems."""


class MagicMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class DimensionOverflowError(FormatError):
    pass


class TrainingDivergedError(ItofuseError, FloatingPointError):
    """The training objective became non-finite."""
