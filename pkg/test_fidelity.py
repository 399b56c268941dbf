import math

import numpy as np
import pytest

from utils.error_handling import FidelityError
from utils.fidelity import (
    bloch_to_density,
    expected_bloch_state,
    expected_bloch_vector,
    fidelity_with_error,
    rotate,
    state_overlap,
    storage_bloch_vectors,
    target_density,
    uhlmann_fidelity,
)
from utils.fitting import BlochEstimate

def test_identical_pure_states():
    rho = target_density(1.1, 0.4)
    assert uhlmann_fidelity(rho, rho) == pytest.approx(1.0, abs=1e-10)

def test_orthogonal_states():
    rho = target_density(0.7, 1.0)
    sigma = target_density(math.pi - 0.7, 1.0 + math.pi)
    assert uhlmann_fidelity(rho, sigma) == pytest.approx(0.0, abs=1e-10)

def test_shrunk_aligned_state_gives_n():
    for n in (0.5, 0.9, 0.97):
        rho = bloch_to_density(BlochEstimate(n, 0.8, 2.0))
        assert uhlmann_fidelity(rho, target_density(0.8, 2.0)) == pytest.approx(n, abs=1e-9)

def test_mixed_state_fidelity():
    mixed = 0.5 * np.eye(2)
    assert uhlmann_fidelity(mixed, target_density(0.3, 0.0)) == pytest.approx(math.sqrt(0.5), abs=1e-10)

def _random_density(rng: np.random.Generator) -> np.ndarray:
    a = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
    rho = a @ a.conj().T
    return 0.8 * rho / np.trace(rho).real + 0.1 * np.eye(2)

def _random_unitary(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2)))
    return q * (np.diag(r) / np.abs(np.diag(r)))

def _conjugate(u: np.ndarray, rho: np.ndarray) -> np.ndarray:
    out = u @ rho @ u.conj().T
    return 0.5 * (out + out.conj().T)

def test_fidelity_symmetric_and_unitarily_invariant():
    rng = np.random.default_rng(8)
    for _ in range(20):
        rho, sigma = _random_density(rng), _random_density(rng)
        u = _random_unitary(rng)
        fidelity = uhlmann_fidelity(rho, sigma)
        assert 0.0 <= fidelity <= 1.0 + 1e-12
        assert uhlmann_fidelity(sigma, rho) == pytest.approx(fidelity, abs=1e-9)
        assert uhlmann_fidelity(_conjugate(u, rho), _conjugate(u, sigma)) == pytest.approx(fidelity, abs=1e-9)

def test_rejects_invalid_matrices():
    with pytest.raises(FidelityError, match="Hermitian"):
        uhlmann_fidelity(np.array([[0.5, 1.0], [0.0, 0.5]]), np.eye(2) / 2)
    with pytest.raises(FidelityError, match="negative"):
        uhlmann_fidelity(np.diag([1.2, -0.2]), np.eye(2) / 2)
    with pytest.raises(FidelityError):
        uhlmann_fidelity(np.eye(2) / 2, np.eye(3) / 3)

def test_density_trace_is_n_squared():
    rho = bloch_to_density(BlochEstimate(0.9, 1.0, 0.5))
    assert np.trace(rho).real == pytest.approx(0.81)

def test_rotation_about_x():
    assert np.allclose(rotate(np.array([0.0, 0.0, 1.0]), 0.0, math.pi / 2), [0.0, -1.0, 0.0])
    assert np.allclose(rotate(np.array([0.0, -1.0, 0.0]), 0.0, math.pi), [0.0, 1.0, 0.0])

def test_expected_states_of_the_gates():
    # non-targets: the echo alone maps the opening state to +y
    assert np.allclose(expected_bloch_vector(None, echo=True), [0.0, 1.0, 0.0])
    assert expected_bloch_state(None, echo=True) == pytest.approx((math.pi / 2, math.pi))
    # gate I: π about x undoes the echo
    assert np.allclose(expected_bloch_vector(0.0, math.pi, echo=True), [0.0, -1.0, 0.0])
    theta, phi = expected_bloch_state(0.0, math.pi, echo=True)
    assert theta == pytest.approx(math.pi / 2)
    assert abs(math.remainder(phi, 2 * math.pi)) < 1e-9
    # gate II lands on the x axis, a quarter turn from the non-targets
    theta, phi = expected_bloch_state(math.pi / 4, math.pi, echo=True)
    assert theta == pytest.approx(math.pi / 2)
    assert abs(math.remainder(phi - math.pi, 2 * math.pi)) == pytest.approx(math.pi / 2, abs=1e-9)
    # gate III points at a pole: flat fringe
    theta, _ = expected_bloch_state(0.0, math.pi / 2, echo=True)
    assert math.sin(theta) == pytest.approx(0.0, abs=1e-6)

def test_storage_bloch_vectors_and_overlap():
    amplitudes = np.zeros((2, 5), dtype=complex)
    amplitudes[0, :2] = [1 / math.sqrt(2), -1j / math.sqrt(2)]
    amplitudes[1, 0] = 1.0
    vectors = storage_bloch_vectors(amplitudes)
    assert np.allclose(vectors[0], [0.0, -1.0, 0.0])
    assert np.allclose(vectors[1], [0.0, 0.0, 1.0])
    overlap = state_overlap(amplitudes, np.array([0.0, -1.0, 0.0]))
    assert overlap == pytest.approx([1.0, 0.5])

def test_overlap_counts_leaked_population():
    amplitudes = np.zeros((1, 5), dtype=complex)
    amplitudes[0, 0] = math.sqrt(0.5)
    amplitudes[0, 2] = math.sqrt(0.5)
    assert state_overlap(amplitudes, np.array([0.0, 0.0, 1.0]))[0] == pytest.approx(0.5)

def test_fidelity_error_from_covariance():
    est = BlochEstimate(0.95, 1.2, 0.5, covariance=np.diag([1e-4, 1e-4, 1e-4]))
    fidelity, error = fidelity_with_error(est, target_density(1.2, 0.5))
    assert fidelity == pytest.approx(0.95)
    # dF/dn = 1 at the aligned state; angle derivatives vanish
    assert error == pytest.approx(1e-2, rel=1e-3)
