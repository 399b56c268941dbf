import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple

import numpy as np

from utils.error_handling import StabilizationError
from utils.imaging import PositionEstimate
from utils.random_streams import SeedLike, make_rng
from utils.validation import check_positive, check_range

# Configure logging
logger = logging.getLogger(__name__)

# Brewster-plate calibration: 8 mrad of tilt gives a π/2 lattice phase, i.e. 4.9 μm of translation
TILT_PER_QUARTER_MRAD = 8.0
TRANSLATION_PER_QUARTER_UM = 4.9

def _vector(name: str, value: Sequence[float]) -> np.ndarray:
    array = np.asarray(value, dtype=float).reshape(-1)
    if array.shape != (3,):
        raise StabilizationError(f"{name} needs three entries (x, y, z), got {array.size}")
    if not np.all(np.isfinite(array)):
        raise StabilizationError(f"{name} must be finite")
    return array

@dataclass
class DriftState:
    """Lattice offset with a linear ramp (μm/hour) and a per-step random walk (μm)."""
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rate_um_per_hour: np.ndarray = field(default_factory=lambda: np.ones(3))
    random_walk_um: float = 0.0

    def __post_init__(self):
        self.offset = _vector("drift.offset", self.offset)
        self.rate_um_per_hour = _vector("drift.rate_um_per_hour", self.rate_um_per_hour)
        check_range("drift.random_walk_um", self.random_walk_um, low=0.0)

    def advance(self, dt: float, rng: SeedLike = None,
                disturbance: Optional[Sequence[float]] = None) -> "DriftState":
        step = self.rate_um_per_hour * dt / 3600.0
        if self.random_walk_um > 0:
            step = step + self.random_walk_um * make_rng(rng).standard_normal(3)
        if disturbance is not None:
            step = step + _vector("disturbance", disturbance)
        return replace(self, offset=self.offset + step)

@dataclass(frozen=True)
class BrewsterActuator:
    """Per-axis Brewster-plate tilts translating the lattice interference pattern."""
    tilt_mrad: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    max_tilt_mrad: float = 80.0

    def __post_init__(self):
        object.__setattr__(self, "tilt_mrad", tuple(float(v) for v in _vector("tilt_mrad", self.tilt_mrad)))
        check_positive("actuator.max_tilt_mrad", self.max_tilt_mrad)
        if np.any(np.abs(self.tilt_mrad) > self.max_tilt_mrad + 1e-12):
            raise StabilizationError(f"Tilt {self.tilt_mrad} exceeds the ±{self.max_tilt_mrad} mrad range")

    @staticmethod
    def phase_for_tilt(tilt_mrad: np.ndarray) -> np.ndarray:
        return np.asarray(tilt_mrad, dtype=float) / TILT_PER_QUARTER_MRAD * (math.pi / 2.0)

    @staticmethod
    def translation_for_phase(phase: np.ndarray) -> np.ndarray:
        return np.asarray(phase, dtype=float) / (math.pi / 2.0) * TRANSLATION_PER_QUARTER_UM

    @staticmethod
    def tilt_for_translation(translation_um: np.ndarray) -> np.ndarray:
        return np.asarray(translation_um, dtype=float) / TRANSLATION_PER_QUARTER_UM * TILT_PER_QUARTER_MRAD

    @property
    def translation_um(self) -> np.ndarray:
        return self.translation_for_phase(self.phase_for_tilt(np.array(self.tilt_mrad)))

    def step(self, command_um: Sequence[float]) -> Tuple["BrewsterActuator", bool]:
        """
        Apply a translation command.

        Returns:
            The updated actuator and whether any axis hit its tilt limit
        """
        target = np.array(self.tilt_mrad) + self.tilt_for_translation(_vector("command", command_um))
        clipped = np.clip(target, -self.max_tilt_mrad, self.max_tilt_mrad)
        return replace(self, tilt_mrad=tuple(clipped)), bool(np.any(clipped != target))

@dataclass(frozen=True)
class PidGains:
    kp: float = 1.0
    ki: float = 0.1
    kd: float = 0.0
    tau_s: float = 120.0
    integrator_limit_um: float = 5.0

    def __post_init__(self):
        for name in ("kp", "ki", "kd"):
            check_range(f"pid.{name}", getattr(self, name), low=0.0)
        check_positive("pid.tau_s", self.tau_s)
        check_positive("pid.integrator_limit_um", self.integrator_limit_um)

@dataclass
class PidState:
    gains: PidGains = field(default_factory=PidGains)
    integrator: np.ndarray = field(default_factory=lambda: np.zeros(3))
    last_error: np.ndarray = field(default_factory=lambda: np.zeros(3))
    discrete: bool = True

def pid_step(state: PidState, measurement: PositionEstimate, dt: float) -> Tuple[PidState, np.ndarray]:
    """
    One discrete correction of the lattice position.

    The setpoint is zero offset. With g = dt/τ the translation command is
    g·(kp·e + ki·I) + kd·(e − e_prev), where I is the running error sum clamped to the
    integrator limit.

    Args:
        state: Controller state before the step
        measurement: Estimated lattice offset
        dt: Time since the previous correction in seconds

    Returns:
        The new state and the translation command in μm

    Raises:
        StabilizationError: If dt is not positive
    """
    if not dt > 0:
        raise StabilizationError(f"PID step needs dt > 0, got {dt}")
    gains = state.gains
    error = -measurement.vector
    integrator = np.clip(state.integrator + error, -gains.integrator_limit_um, gains.integrator_limit_um)
    g = dt / gains.tau_s if state.discrete else 1.0
    command = g * (gains.kp * error + gains.ki * integrator) + gains.kd * (error - state.last_error)
    return replace(state, integrator=integrator, last_error=error), command
