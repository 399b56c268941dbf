import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import curve_fit, least_squares

from utils.config import FIT_MAX_ATTEMPTS
from utils.error_handling import FitError, with_refit
from utils.geometry import AtomClass

logger = logging.getLogger(__name__)

# Relative first-harmonic amplitude below which the fringe phase is unidentifiable
FLAT_FRINGE_TOLERANCE = 1e-6

@dataclass
class FringeData:
    """Detected F=3 probability versus the phase α of the closing π/2 pulse."""
    alpha: np.ndarray
    p0: np.ndarray
    counts: Optional[np.ndarray] = None
    atom_class: Optional[AtomClass] = None
    flagged: bool = False

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float).reshape(-1)
        self.p0 = np.asarray(self.p0, dtype=float).reshape(-1)
        if self.alpha.shape != self.p0.shape:
            raise FitError(f"Fringe has {self.alpha.size} phases but {self.p0.size} probabilities")
        if self.counts is not None:
            self.counts = np.asarray(self.counts, dtype=float).reshape(-1)
            if self.counts.shape != self.p0.shape:
                raise FitError("Fringe counts must match the number of phases")
        if self.atom_class is not None:
            self.atom_class = AtomClass(self.atom_class)

    def __len__(self) -> int:
        return self.alpha.size

@dataclass
class BlochEstimate:
    """
    Fitted storage-qubit state n·(cos(θ/2)|0⟩ + e^{iφ} sin(θ/2)|1⟩).

    The fringe only measures sinθ, so θ and π−θ fit equally well; ``theta`` is reported
    on the branch picked by the fit (or a hint) and ``hemisphere_ambiguous`` stays set.
    """
    n: float
    theta: float
    phi: float
    covariance: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    phi_indeterminate: bool = False
    hemisphere_ambiguous: bool = True
    residual_rms: float = 0.0

    @property
    def errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    @property
    def params(self) -> np.ndarray:
        return np.array([self.n, self.theta, self.phi])

    def mirrored(self) -> "BlochEstimate":
        """The other hemisphere branch θ → π − θ."""
        flip = np.diag([1.0, -1.0, 1.0])
        return replace(self, theta=math.pi - self.theta, covariance=flip @ self.covariance @ flip)

def fringe_model(alpha: np.ndarray, n: float, theta: float, phi: float) -> np.ndarray:
    """P₀(α) = n²(1 + sinθ·cos(α + φ))/2."""
    return 0.5 * n * n * (1.0 + math.sin(theta) * np.cos(np.asarray(alpha) + phi))

def fringe_jacobian(alpha: np.ndarray, n: float, theta: float, phi: float) -> np.ndarray:
    cos_term = np.cos(alpha + phi)
    return np.column_stack([
        n * (1.0 + math.sin(theta) * cos_term),
        0.5 * n * n * math.cos(theta) * cos_term,
        -0.5 * n * n * math.sin(theta) * np.sin(alpha + phi),
    ])

@dataclass
class SinusoidFit:
    offset: float
    amplitude: float
    phase: float

    @property
    def contrast(self) -> float:
        return self.amplitude / self.offset if self.offset > 0 else 0.0

def fit_sinusoid(alpha: Sequence[float], y: Sequence[float]) -> SinusoidFit:
    """
    Linear least-squares first-harmonic fit y ≈ a + A·cos(α + φ).

    For equally spaced phases this is the first term of the discrete Fourier transform.
    """
    alpha = np.asarray(alpha, dtype=float)
    y = np.asarray(y, dtype=float)
    if alpha.size < 3:
        raise FitError(f"A sinusoid fit needs at least 3 points, got {alpha.size}")
    design = np.column_stack([np.ones_like(alpha), np.cos(alpha), np.sin(alpha)])
    (a, b, c), *_ = np.linalg.lstsq(design, y, rcond=None)
    return SinusoidFit(float(a), float(math.hypot(b, c)), float(math.atan2(-c, b)))

def _check_fringe_coverage(alpha: np.ndarray) -> None:
    distinct = np.unique(np.round(np.mod(alpha, 2.0 * math.pi), 12))
    if distinct.size < 4:
        raise FitError(f"Fringe fit needs at least 4 distinct phases, got {distinct.size}")
    if np.ptp(alpha) <= math.pi:
        raise FitError(f"Fringe phases must span more than π, span is {np.ptp(alpha):.3f}")

def _covariance(jacobian: np.ndarray, residuals: np.ndarray, n_params: int) -> np.ndarray:
    dof = max(residuals.size - n_params, 1)
    scale = float(residuals @ residuals) / dof
    covariance = np.linalg.pinv(jacobian.T @ jacobian) * scale
    return 0.5 * (covariance + covariance.T)

def _canonical(params: np.ndarray, covariance: np.ndarray, theta_hint: Optional[float]) -> Tuple[np.ndarray, np.ndarray]:
    """Map fitted (n, θ, φ) to n ≥ 0, θ ∈ [0, π], φ ∈ [0, 2π) with sinθ ≥ 0."""
    n, theta, phi = params
    signs = np.ones(3)
    if n < 0:
        n, signs[0] = -n, -1.0
    theta = math.remainder(theta, 2.0 * math.pi)
    if theta < 0:
        # sinθ < 0: reflect φ by π
        theta, phi, signs[1] = -theta, phi + math.pi, -signs[1]
    if theta_hint is not None and abs((math.pi - theta) - theta_hint) < abs(theta - theta_hint):
        theta, signs[1] = math.pi - theta, -signs[1]
    phi = math.fmod(phi, 2.0 * math.pi)
    if phi < 0:
        phi += 2.0 * math.pi
    transform = np.diag(signs)
    return np.array([n, theta, phi]), transform @ covariance @ transform

def fit_fringe(data: FringeData, theta_hint: Optional[float] = None,
               max_attempts: int = FIT_MAX_ATTEMPTS) -> BlochEstimate:
    """
    Fit (n, θ, φ) of the fringe model to data.

    Args:
        data: Fringe with at least 4 distinct phases spanning more than π
        theta_hint: Expected polar angle used to pick the θ / π−θ branch
        max_attempts: Fit attempts, each starting from a rotated initial phase

    Returns:
        BlochEstimate with linearized covariance

    Raises:
        FitError: On too few points or non-convergence
    """
    alpha, p0 = data.alpha, data.p0
    if not np.all(np.isfinite(p0)):
        raise FitError("Fringe contains non-finite probabilities")
    _check_fringe_coverage(alpha)

    guess = fit_sinusoid(alpha, p0)
    mean = max(guess.offset, 1e-9)
    n0 = math.sqrt(2.0 * mean)

    if guess.amplitude <= FLAT_FRINGE_TOLERANCE * mean:
        # zero contrast: only n is identifiable
        residuals = p0 - mean
        variance = float(residuals @ residuals) / max(alpha.size - 1, 1) / alpha.size
        covariance = np.diag([variance / (n0 * n0), 0.0, 0.0])
        theta = math.pi if theta_hint is not None and theta_hint > math.pi / 2 else 0.0
        logger.warning(f"Flat fringe (mean {mean:.4f}); azimuth is indeterminate")
        return BlochEstimate(n0, theta, 0.0, covariance, phi_indeterminate=True,
                             residual_rms=float(np.sqrt(np.mean(residuals ** 2))))

    sin0 = min(guess.amplitude / mean, 1.0)
    theta0 = math.asin(sin0)
    if sin0 >= 1.0:
        theta0 = math.pi / 2 - 1e-3

    def residual(params: np.ndarray) -> np.ndarray:
        return fringe_model(alpha, *params) - p0

    def jacobian(params: np.ndarray) -> np.ndarray:
        return fringe_jacobian(alpha, *params)

    def attempt(number: int) -> np.ndarray:
        start = np.array([n0, theta0, guess.phase + (number - 1) * 2.0 * math.pi / 3.0])
        result = least_squares(residual, start, jac=jacobian, method="lm",
                               xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000)
        if not result.success or not np.all(np.isfinite(result.x)):
            raise FitError(f"Fringe fit did not converge: {result.message}")
        return result.x

    best = with_refit(attempt, max_attempts)
    residuals = residual(best)
    covariance = _covariance(jacobian(best), residuals, 3)
    params, covariance = _canonical(best, covariance, theta_hint)

    return BlochEstimate(float(params[0]), float(params[1]), float(params[2]), covariance,
                         phi_indeterminate=math.sin(params[1]) < 1e-6,
                         residual_rms=float(np.sqrt(np.mean(residuals ** 2))))

@dataclass
class ExponentialFit:
    amplitude: float
    tau: float
    tau_error: float
    rate: float
    rate_error: float
    unbounded: bool = False

def exponential_model(t: np.ndarray, amplitude: float, rate: float) -> np.ndarray:
    return amplitude * np.exp(-rate * t)

def exponential_jacobian(t: np.ndarray, amplitude: float, rate: float) -> np.ndarray:
    decay = np.exp(-rate * t)
    return np.column_stack([decay, -amplitude * t * decay])

def fit_exponential_contrast(times: Sequence[float], contrasts: Sequence[float]) -> ExponentialFit:
    """
    Fit A·exp(−T/τ) to a contrast curve.

    Args:
        times: At least three times in seconds
        contrasts: Positive fringe contrasts

    Returns:
        ExponentialFit; ``unbounded`` is set and τ = inf when the data do not decay

    Raises:
        FitError: On too few or non-positive points, or non-convergence
    """
    t = np.asarray(times, dtype=float)
    c = np.asarray(contrasts, dtype=float)
    if t.size < 3 or t.size != c.size:
        raise FitError(f"Exponential fit needs at least 3 paired points, got {t.size}")
    if np.any(c <= 0) or not np.all(np.isfinite(c)):
        raise FitError("Contrasts must be positive and finite")

    slope, intercept = np.polyfit(t, np.log(c), 1)
    guess = [math.exp(intercept), max(-slope, 0.0)]

    try:
        popt, pcov = curve_fit(exponential_model, t, c, p0=guess,
                               jac=lambda x, a, k: exponential_jacobian(x, a, k),
                               method="lm", xtol=1e-15, ftol=1e-15, maxfev=5000)
    except (RuntimeError, ValueError) as e:
        logger.error(f"Exponential fit failed: {str(e)}")
        raise FitError(f"Exponential fit failed: {str(e)}")

    amplitude, rate = (float(v) for v in popt)
    rate_error = float(math.sqrt(max(pcov[1, 1], 0.0))) if np.all(np.isfinite(pcov)) else 0.0
    if rate <= 0 or rate * float(np.max(t)) < 1e-9:
        logger.warning(f"Contrast does not decay (rate {rate:.3g}/s); time constant unbounded")
        return ExponentialFit(amplitude, math.inf, math.inf, rate, rate_error, unbounded=True)
    return ExponentialFit(amplitude, 1.0 / rate, rate_error / rate ** 2, rate, rate_error)

@dataclass
class PeakFit:
    center: float
    center_error: float
    sigma: float
    amplitude: float
    offset: float

def gaussian_model(x: np.ndarray, amplitude: float, center: float, sigma: float, offset: float) -> np.ndarray:
    return amplitude * np.exp(-0.5 * ((x - center) / sigma) ** 2) + offset

def fit_gaussian_peak(x: Sequence[float], y: Sequence[float],
                      window: Optional[Tuple[float, float]] = None,
                      max_attempts: int = FIT_MAX_ATTEMPTS) -> PeakFit:
    """
    Fit a single Gaussian peak on a constant background.

    Args:
        x: Abscissa, e.g. detuning
        y: Ordinate, e.g. transfer ratio
        window: Optional (low, high) range of x to fit
        max_attempts: Fit attempts with widening initial width

    Returns:
        PeakFit
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if window is not None:
        keep = (x >= window[0]) & (x <= window[1])
        x, y = x[keep], y[keep]
    if x.size < 5:
        raise FitError(f"Peak fit needs at least 5 points, got {x.size}")

    peak = int(np.argmax(y))
    offset0 = float(np.min(y))
    amplitude0 = float(y[peak] - offset0)
    above = x[y > offset0 + 0.5 * amplitude0]
    width0 = max(float(np.ptp(above)) / 2.355 if above.size > 1 else 0.0, float(np.min(np.diff(np.sort(x)))))

    def attempt(number: int) -> Tuple[np.ndarray, np.ndarray]:
        start = [amplitude0, float(x[peak]), width0 * number, offset0]
        try:
            popt, pcov = curve_fit(gaussian_model, x, y, p0=start, maxfev=5000)
        except (RuntimeError, ValueError) as e:
            raise FitError(f"Gaussian peak fit failed: {str(e)}")
        if not np.all(np.isfinite(popt)) or not (x.min() <= popt[1] <= x.max()):
            raise FitError(f"Gaussian peak fit left the data range (center {popt[1]:.4g})")
        return popt, pcov

    popt, pcov = with_refit(attempt, max_attempts)
    center_error = float(math.sqrt(pcov[1, 1])) if np.isfinite(pcov[1, 1]) else math.inf
    return PeakFit(float(popt[1]), center_error, abs(float(popt[2])), float(popt[0]), float(popt[3]))