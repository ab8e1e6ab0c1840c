"""Exception hierarchy for the toa_tomo package."""


class ToaError(Exception):
    """Base class for all package errors."""


class InvalidGeometry(ToaError, ValueError):
    pass


class InvalidPermittivity(ToaError, ValueError):
    pass


class StabilityViolation(ToaError, ValueError):
    pass


class InvalidProbe(ToaError, ValueError):
    pass


class InvalidFilter(ToaError, ValueError):
    pass


class InvalidPartition(ToaError, ValueError):
    pass


class ZeroDesignMatrix(ToaError, ValueError):
    pass


class SchemeNotAvailable(ToaError, ValueError):
    pass


class SubsetUnusable(ToaError, RuntimeError):
    pass


class NoValidPairs(ToaError, ValueError):
    pass


class NoValidCells(ToaError, ValueError):
    pass


class InvalidContrast(ToaError, ValueError):
    pass


class InvalidWindow(ToaError, ValueError):
    pass


class SpecError(ToaError, ValueError):
    """Malformed phantom spec, config file, or unknown builtin name."""


class CheckpointMismatch(ToaError, RuntimeError):
    pass


class NoData(ToaError, RuntimeError):
    pass
