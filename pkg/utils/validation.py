import logging
import math
import re
from typing import Any, Dict, Iterable, Optional

from utils.error_handling import ConfigError

logger = logging.getLogger(__name__)

_PI_PATTERN = re.compile(r"^\s*([-+]?\d*\.?\d*(?:[eE][-+]?\d+)?)\s*\*?\s*pi\s*$")

def reject_unknown_keys(section: str, params: Dict[str, Any], allowed: Iterable[str]) -> None:
    """
    Raise ConfigError naming the first key of ``params`` not in ``allowed``.

    Args:
        section: Dotted section name used in the error message
        params: Parsed section dictionary
        allowed: Accepted key names
    """
    allowed_set = set(allowed)
    unknown = sorted(key for key in params if key not in allowed_set)
    if unknown:
        name = f"{section}.{unknown[0]}" if section else unknown[0]
        logger.error(f"Unknown configuration key: {name}")
        raise ConfigError(f"Unknown configuration key '{name}' (allowed: {', '.join(sorted(allowed_set))})")

def check_range(name: str, value: float,
                low: Optional[float] = None, high: Optional[float] = None,
                low_inclusive: bool = True, high_inclusive: bool = True) -> float:
    """
    Check that a numeric value lies within bounds.

    Args:
        name: Dotted key name used in the error message
        value: Value to check
        low: Lower bound, or None for unbounded
        high: Upper bound, or None for unbounded
        low_inclusive: Whether ``low`` itself is allowed
        high_inclusive: Whether ``high`` itself is allowed

    Returns:
        The value as float

    Raises:
        ConfigError: If the value is not a number or is out of range
    """
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{name}={value!r} must be a number")
    number = float(value)
    if math.isnan(number):
        raise ConfigError(f"{name}=nan must be a number")

    low_ok = low is None or (number >= low if low_inclusive else number > low)
    high_ok = high is None or (number <= high if high_inclusive else number < high)
    if not (low_ok and high_ok):
        left = "" if low is None else f"{low:g} {'<=' if low_inclusive else '<'} "
        right = "" if high is None else f" {'<=' if high_inclusive else '<'} {high:g}"
        raise ConfigError(f"{name}={number:g} violates {left}value{right}")
    return number

def check_positive(name: str, value: float) -> float:
    return check_range(name, value, low=0.0, low_inclusive=False)

def check_probability(name: str, value: float) -> float:
    return check_range(name, value, low=0.0, high=1.0)

def parse_angle(name: str, value: Any) -> float:
    """
    Parse an angle in radians given as a number or as a string like ``"0.35pi"``.

    Args:
        name: Dotted key name used in the error message
        value: Number or multiple-of-pi string

    Returns:
        Angle in radians
    """
    if isinstance(value, str):
        match = _PI_PATTERN.match(value)
        if not match:
            raise ConfigError(f"{name}={value!r} is not an angle (expected radians or e.g. '0.35pi')")
        factor = match.group(1)
        if factor in ("", "+"):
            return math.pi
        if factor == "-":
            return -math.pi
        return float(factor) * math.pi
    return check_range(name, value)
