"""Exception hierarchy shared by all modules."""


class MVSDEError(Exception):
    """Base class for library errors."""


class DegenerateDiffusionError(MVSDEError, ValueError):
    """sigma vanishes at the discontinuity, so no transform exists."""


class SpecViolationError(MVSDEError, ValueError):
    """A transform parameter left the range its bounds were derived for."""


class UnsupportedInputError(MVSDEError, ValueError):
    """Input outside the supported domain (e.g. unequal sample counts)."""


class InversionError(MVSDEError, ArithmeticError):
    """Scalar inversion of G failed to converge. Indicates a bug."""


class ImplicitStepError(MVSDEError, ArithmeticError):
    """The fixed-point inversion of the hybrid scheme did not converge."""

    def __init__(self, message, step=None, contraction=None):
        super().__init__(message)
        self.step = step
        self.contraction = contraction


class DivergedSimulationError(MVSDEError, ArithmeticError):
    """A non-finite particle state appeared."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class LatticeTooLargeError(MVSDEError, MemoryError):
    """Requested Brownian lattice exceeds the memory guard."""

    def __init__(self, message, required_bytes):
        super().__init__(message)
        self.required_bytes = required_bytes


class ConfigError(MVSDEError, ValueError):
    """Experiment config failed validation; carries every problem found."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class ParameterDomainError(MVSDEError, ValueError):
    """Model parameters outside the domain the model is defined on."""


class DegenerateFitError(MVSDEError, ValueError):
    """Order fit refused: a zero RMSE means two levels coincided."""
