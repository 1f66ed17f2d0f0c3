"""Exception hierarchy shared by every module."""


class ExpostError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(ExpostError, ValueError):
    """Inputs are structurally inconsistent (grids, shares, agent counts, files)."""


class InvalidResolutionError(ConfigurationError):
    pass


class DomainError(ExpostError, ValueError):
    """A signal profile lies outside the signal space."""


class DegenerateDensityError(ExpostError, ValueError):
    """The density vanishes where the inverse hazard rate is needed."""


class PreconditionError(ExpostError, ValueError):
    pass


class NotEventuallyMonotoneError(PreconditionError):
    """Raised by payment synthesis; ``report`` carries the EM violations."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ResourceError(ExpostError, RuntimeError):
    pass
