"""
Exception hierarchy for fluidps.

Two families matter to the command line: validation problems (bad specs,
out-of-range requests, missing tail information) end a run with exit code 1,
numerical problems (a divergent scheme or a certificate above its threshold)
end it with exit code 2.
"""


class FluidPSError(Exception):
    """Base class for every error raised by the package."""


# --- Validation (exit code 1) ---
class ValidationError(FluidPSError, ValueError):
    """Inputs that can never produce a meaningful result."""


class InvalidSpecError(ValidationError):
    """A distribution or measure spec string is malformed or out of domain."""


class AtomInSpecError(InvalidSpecError):
    """The described measure charges a single point."""


class MassAtOriginError(AtomInSpecError):
    """The service distribution puts mass at zero."""


class InfiniteMeanError(InvalidSpecError):
    """The service distribution has no finite mean, so no critical rate exists."""


class WorkloadInfiniteError(ValidationError):
    """The initial measure has an infinite first moment."""


class TestFunctionError(ValidationError):
    """A test function violates g(0) = 0, g'(0) = 0 or its declared bounds."""

    __test__ = False  # keep pytest from collecting this class


class InvalidScaleError(ValidationError):
    """A simulation scale below one."""


class InsufficientSamplesError(ValidationError):
    """Too few positive samples to fit a power law."""


class GridMismatchError(ValidationError):
    """Two tabulated objects do not live on the same grid."""


class GridResampleError(GridMismatchError):
    """Two grids cannot be brought onto a common refinement."""


class OutOfRangeError(FluidPSError, IndexError):
    """A time, increment or position outside the tabulated range."""


class TailBoundMissingError(FluidPSError):
    """A measure carries mass beyond its grid without a tail model."""


class RateUndefinedError(FluidPSError):
    """A rate statement needs a positive renewal rate, which is zero here."""


class DegenerateSolutionError(FluidPSError):
    """The operation is undefined for the zero fluid solution."""


# --- Numerical (exit code 2) ---
class NumericalError(FluidPSError):
    """A computation ran but its accuracy cannot be vouched for."""


class DivergentSchemeError(NumericalError):
    """The implicit renewal scheme has a non-positive pivot."""


class CertificateError(NumericalError):
    """A certified error bar exceeds its configured threshold."""


def exit_code_for(error: Exception) -> int:
    """Maps an exception onto the command-line exit code."""
    if isinstance(error, NumericalError):
        return 2
    return 1
