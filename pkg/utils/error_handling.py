import logging
from typing import Callable, Tuple, Type, TypeVar

from tenacity import (
    Retrying,
    before_sleep_log,
    retry_if_exception_type,
    stop_after_attempt,
    wait_none,
)

# Type variable for generic function
T = TypeVar('T')

logger = logging.getLogger(__name__)

class AddressingError(Exception):
    """Base exception for addressing simulation errors."""
    pass

class GeometryError(AddressingError):
    """Exception raised for invalid sites, beams or target lists."""
    pass

class PulseError(AddressingError):
    """Exception raised for invalid pulse specifications."""
    pass

class IntegrationError(AddressingError):
    """Exception raised when pulse integration produces non-finite amplitudes."""
    pass

class MeasurementError(AddressingError):
    """Exception raised for invalid detection requests."""
    pass

class SequenceError(AddressingError):
    """Exception raised when a sequence is malformed or cannot be compiled."""
    pass

class FitError(AddressingError):
    """Exception raised when a fit cannot be performed or does not converge."""
    pass

class FidelityError(AddressingError):
    """Exception raised for invalid density matrices or missing class data."""
    pass

class StabilizationError(AddressingError):
    """Exception raised by the imaging, feedback and alignment loops."""
    pass

class ConfigError(AddressingError):
    """Exception raised when a configuration file is unreadable or invalid."""
    pass

class RecipeError(AddressingError):
    """Exception raised when a recipe cannot run with the given configuration."""
    pass

def refit_attempts(max_attempts: int = 3,
                   exceptions: Tuple[Type[BaseException], ...] = (FitError,)) -> Retrying:
    """
    Build a tenacity retry controller for nonlinear fits.

    Fits do not benefit from waiting, so attempts run back to back; the caller
    perturbs its initial guess using ``attempt.retry_state.attempt_number``.

    Args:
        max_attempts: Maximum number of fit attempts
        exceptions: Exception types that trigger another attempt

    Returns:
        A ``tenacity.Retrying`` instance to iterate over
    """
    return Retrying(
        stop=stop_after_attempt(max_attempts),
        wait=wait_none(),
        retry=retry_if_exception_type(exceptions),
        before_sleep=before_sleep_log(logger, logging.WARNING),
        reraise=True,
    )

def with_refit(func: Callable[[int], T], max_attempts: int = 3) -> T:
    """
    Call ``func(attempt_number)`` until it stops raising FitError.

    Args:
        func: Fit routine taking the 1-based attempt number
        max_attempts: Maximum number of attempts

    Returns:
        The first successful result

    Raises:
        FitError: If every attempt fails
    """
    for attempt in refit_attempts(max_attempts):
        with attempt:
            return func(attempt.retry_state.attempt_number)
    raise FitError("Refit loop exited without a result")
