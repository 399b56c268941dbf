import logging
import math
from typing import Optional, Tuple

import numpy as np

from utils.error_handling import FidelityError
from utils.fitting import BlochEstimate

logger = logging.getLogger(__name__)

MATRIX_TOLERANCE = 1e-10
# Eigenvalues below this are round-off of a rank-deficient state
EIGENVALUE_FLOOR = 1e-12

def bloch_to_density(est: BlochEstimate) -> np.ndarray:
    """
    ρ = |ψ⟩⟨ψ| for the unnormalized |ψ⟩ = n·cos(θ/2)|0⟩ + n·e^{iφ}·sin(θ/2)|1⟩.

    Args:
        est: Fitted or expected Bloch parameters

    Returns:
        2×2 complex density matrix with trace n²
    """
    psi = est.n * np.array([math.cos(est.theta / 2.0),
                            np.exp(1j * est.phi) * math.sin(est.theta / 2.0)])
    return np.outer(psi, psi.conj())

def _check_state(name: str, matrix: np.ndarray, tolerance: float) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=complex)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise FidelityError(f"{name} must be a square matrix, got shape {matrix.shape}")
    if np.max(np.abs(matrix - matrix.conj().T)) > tolerance:
        raise FidelityError(f"{name} is not Hermitian")
    hermitian = 0.5 * (matrix + matrix.conj().T)
    eigenvalues = np.linalg.eigvalsh(hermitian)
    if eigenvalues.min() < -tolerance:
        raise FidelityError(f"{name} has a negative eigenvalue {eigenvalues.min():.3g}")
    return hermitian

def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    eigenvalues, vectors = np.linalg.eigh(matrix)
    eigenvalues = np.where(eigenvalues < EIGENVALUE_FLOOR, 0.0, eigenvalues)
    return (vectors * np.sqrt(eigenvalues)) @ vectors.conj().T

def uhlmann_fidelity(rho: np.ndarray, sigma: np.ndarray, tolerance: float = MATRIX_TOLERANCE) -> float:
    """
    Uhlmann fidelity F = Tr√(√ρ σ √ρ), evaluated by eigendecomposition.

    Args:
        rho: Reconstructed density matrix
        sigma: Target density matrix
        tolerance: Allowed anti-Hermitian part and negative eigenvalue magnitude

    Returns:
        Fidelity (equal to √⟨ψσ|ρ|ψσ⟩ for a pure target)

    Raises:
        FidelityError: For non-Hermitian or non-positive inputs
    """
    rho = _check_state("rho", rho, tolerance)
    sigma = _check_state("sigma", sigma, tolerance)
    if rho.shape != sigma.shape:
        raise FidelityError(f"Shape mismatch {rho.shape} vs {sigma.shape}")
    root = _psd_sqrt(rho)
    inner = root @ sigma @ root
    eigenvalues = np.linalg.eigvalsh(0.5 * (inner + inner.conj().T))
    return float(np.sum(np.sqrt(np.where(eigenvalues < EIGENVALUE_FLOOR, 0.0, eigenvalues))))

def rotate(vector: np.ndarray, axis_phase: float, angle: float) -> np.ndarray:
    """Right-handed rotation of a Bloch vector about the equatorial axis at azimuth ``axis_phase``."""
    axis = np.array([math.cos(axis_phase), math.sin(axis_phase), 0.0])
    return (vector * math.cos(angle) + np.cross(axis, vector) * math.sin(angle)
            + axis * (axis @ vector) * (1.0 - math.cos(angle)))

# Bloch vector after the opening π/2 pulse about x, starting from |3,0⟩
OPENING_STATE = np.array([0.0, -1.0, 0.0])

def to_fit_frame(vector: np.ndarray) -> Tuple[float, float]:
    """
    Polar angle and fringe azimuth of a pulse-frame Bloch vector.

    The closing pulse has axis phase π − α, which advances the azimuth seen by the
    fringe model by π/2.
    """
    theta = math.acos(max(-1.0, min(1.0, float(vector[2]))))
    if math.hypot(vector[0], vector[1]) < 1e-12:
        return theta, 0.0
    phi = math.atan2(vector[1], vector[0]) + math.pi / 2.0
    return theta, math.fmod(phi + 4.0 * math.pi, 2.0 * math.pi)

def expected_bloch_vector(axis_phase: Optional[float] = None, angle: float = 0.0,
                          echo: bool = True) -> np.ndarray:
    """Pulse-frame Bloch vector expected right before the closing pulse (gate applied before the echo)."""
    vector = OPENING_STATE.copy()
    if axis_phase is not None and angle:
        vector = rotate(vector, axis_phase, angle)
    if echo:
        vector = rotate(vector, 0.0, math.pi)
    return vector

def expected_bloch_state(axis_phase: Optional[float] = None, angle: float = 0.0,
                         echo: bool = True) -> Tuple[float, float]:
    """
    (θ, φ) expected right before the closing pulse.

    Args:
        axis_phase: Gate axis azimuth in the ω₀ pulse frame, or None for no gate
        angle: Gate rotation angle
        echo: Whether the program contains the echo π pulse about x

    Returns:
        (theta, phi) in the fringe-fit frame
    """
    return to_fit_frame(expected_bloch_vector(axis_phase, angle, echo))

def storage_bloch_vectors(amplitudes: np.ndarray) -> np.ndarray:
    """
    Unnormalized storage-qubit Bloch vectors of 5-level amplitude rows.

    |3,0⟩ is the north pole; the length is the storage-basis population.
    """
    amplitudes = np.atleast_2d(amplitudes)
    c0, c1 = amplitudes[:, 0], amplitudes[:, 1]
    cross = np.conj(c0) * c1
    return np.column_stack([2.0 * cross.real, 2.0 * cross.imag, np.abs(c0) ** 2 - np.abs(c1) ** 2])

def state_overlap(amplitudes: np.ndarray, expected: np.ndarray) -> np.ndarray:
    """|⟨σ|ψ⟩|² of each amplitude row against the pure storage state with Bloch vector ``expected``."""
    amplitudes = np.atleast_2d(amplitudes)
    population = np.abs(amplitudes[:, 0]) ** 2 + np.abs(amplitudes[:, 1]) ** 2
    return 0.5 * (population + storage_bloch_vectors(amplitudes) @ np.asarray(expected, dtype=float))

def target_density(theta: float, phi: float) -> np.ndarray:
    return bloch_to_density(BlochEstimate(1.0, theta, phi))

def fidelity_with_error(est: BlochEstimate, sigma: np.ndarray, step: float = 1e-6) -> Tuple[float, float]:
    """
    Fidelity of a fitted state and its error from the fit covariance.

    The gradient with respect to (n, θ, φ) is taken by central differences.
    """
    fidelity = uhlmann_fidelity(bloch_to_density(est), sigma)
    gradient = np.zeros(3)
    for index in range(3):
        delta = np.zeros(3)
        delta[index] = step
        plus = BlochEstimate(*(est.params + delta))
        minus = BlochEstimate(*(est.params - delta))
        gradient[index] = (uhlmann_fidelity(bloch_to_density(plus), sigma)
                           - uhlmann_fidelity(bloch_to_density(minus), sigma)) / (2.0 * step)
    variance = float(gradient @ est.covariance @ gradient)
    return fidelity, math.sqrt(max(variance, 0.0))
