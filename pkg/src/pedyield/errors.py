"""Exception types raised across the package."""


class PedYieldError(Exception):
    """Base class for all package errors."""


class FrameUndefinedError(PedYieldError):
    """Vehicle heading (or relative velocity) is undefined."""


class ContractError(PedYieldError, ValueError):
    """A documented precondition was violated by the caller."""


class DataFormatError(PedYieldError, ValueError):
    """Input file is malformed or does not match its schema."""


class TrainingInfeasibleError(PedYieldError):
    """No usable interaction records remain after filtering."""


class VersionError(PedYieldError, ValueError):
    """Model file format version is missing or unsupported."""


class CoverageError(PedYieldError, ValueError):
    """Known vehicle trajectories do not cover the prediction horizon."""


class NumericalError(PedYieldError, ArithmeticError):
    """A numerical routine failed to produce a finite answer."""
