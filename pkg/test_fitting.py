import itertools
import math

import numpy as np
import pytest

from utils.error_handling import FitError
from utils.fitting import (
    FringeData,
    fit_exponential_contrast,
    fit_fringe,
    fit_gaussian_peak,
    fit_sinusoid,
    fringe_model,
)

ALPHAS = np.linspace(0.0, 2.0 * math.pi, 16, endpoint=False)

def _phase_error(a: float, b: float) -> float:
    return abs(math.remainder(a - b, 2.0 * math.pi))

def test_fringe_model_extremes():
    assert fringe_model(np.array([0.0]), 1.0, math.pi / 2, 0.0)[0] == pytest.approx(1.0)
    assert fringe_model(np.array([math.pi]), 1.0, math.pi / 2, 0.0)[0] == pytest.approx(0.0)
    assert np.allclose(fringe_model(ALPHAS, 0.9, 0.0, 1.0), 0.405)

def test_noise_free_recovery_over_grid():
    for n, theta, phi in itertools.product(np.linspace(0.7, 1.0, 5), [0.4, 0.9, 1.3, 2.0, 2.6],
                                           np.linspace(0.3, 5.9, 5)):
        data = FringeData(ALPHAS, fringe_model(ALPHAS, n, theta, phi))
        est = fit_fringe(data, theta_hint=theta)
        assert est.n == pytest.approx(n, abs=1e-6)
        assert est.theta == pytest.approx(theta, abs=1e-6)
        assert _phase_error(est.phi, phi) < 1e-6

def test_hemisphere_branch_follows_hint():
    data = FringeData(ALPHAS, fringe_model(ALPHAS, 1.0, 0.5, 1.0))
    assert fit_fringe(data, theta_hint=0.4).theta == pytest.approx(0.5, abs=1e-6)
    assert fit_fringe(data, theta_hint=2.8).theta == pytest.approx(math.pi - 0.5, abs=1e-6)

def test_noisy_fits_cover_truth():
    rng = np.random.default_rng(2024)
    truth = np.array([0.95, 1.2, 2.0])
    covered = np.zeros(3)
    trials = 200
    for _ in range(trials):
        p0 = fringe_model(ALPHAS, *truth) + 0.02 * rng.standard_normal(ALPHAS.size)
        est = fit_fringe(FringeData(ALPHAS, p0), theta_hint=truth[1])
        deviation = np.abs(est.params - truth)
        deviation[2] = _phase_error(est.phi, truth[2])
        covered += deviation <= 3.0 * est.errors
    assert np.all(covered / trials >= 0.97)

def test_flat_fringe_marks_azimuth_indeterminate():
    est = fit_fringe(FringeData(ALPHAS, np.full(ALPHAS.size, 0.45)))
    assert est.phi_indeterminate
    assert est.theta == 0.0
    assert est.n == pytest.approx(math.sqrt(0.9))
    assert fit_fringe(FringeData(ALPHAS, np.full(ALPHAS.size, 0.45)), theta_hint=3.0).theta == math.pi

def test_fringe_needs_phase_coverage():
    with pytest.raises(FitError):
        fit_fringe(FringeData(ALPHAS[:3], np.array([0.5, 0.6, 0.7])))
    narrow = np.linspace(0.0, 2.0, 8)
    with pytest.raises(FitError):
        fit_fringe(FringeData(narrow, fringe_model(narrow, 1.0, 1.0, 0.0)))

def test_fringe_rejects_nan_and_mismatch():
    p0 = fringe_model(ALPHAS, 1.0, 1.0, 0.0)
    p0[3] = np.nan
    with pytest.raises(FitError):
        fit_fringe(FringeData(ALPHAS, p0))
    with pytest.raises(FitError):
        FringeData(ALPHAS, p0[:-1])

def test_sinusoid_fit():
    fit = fit_sinusoid(ALPHAS, 0.5 + 0.3 * np.cos(ALPHAS + 0.7))
    assert fit.offset == pytest.approx(0.5)
    assert fit.amplitude == pytest.approx(0.3)
    assert fit.phase == pytest.approx(0.7)
    assert fit.contrast == pytest.approx(0.6)

def test_exponential_time_constant():
    times = np.array([0.01, 0.5, 1.0, 2.0, 4.0, 6.0, 8.0, 10.0])
    fit = fit_exponential_contrast(times, 0.9 * np.exp(-times / 7.4))
    assert fit.tau == pytest.approx(7.4, rel=1e-6)
    assert fit.amplitude == pytest.approx(0.9, rel=1e-6)
    assert not fit.unbounded

def test_exponential_without_decay_is_unbounded():
    fit = fit_exponential_contrast([1.0, 2.0, 3.0, 4.0], [0.8, 0.8, 0.8, 0.8])
    assert fit.unbounded
    assert math.isinf(fit.tau)

def test_exponential_rejects_bad_input():
    with pytest.raises(FitError):
        fit_exponential_contrast([1.0, 2.0], [0.5, 0.4])
    with pytest.raises(FitError):
        fit_exponential_contrast([1.0, 2.0, 3.0], [0.5, 0.0, 0.4])

def test_gaussian_peak_center():
    x = np.linspace(-50e3, 300e3, 61)
    y = 0.6 * np.exp(-0.5 * ((x - 124e3) / 12e3) ** 2) + 0.015
    fit = fit_gaussian_peak(x, y, window=(60e3, 190e3))
    assert fit.center == pytest.approx(124e3, abs=1.0)
    assert fit.sigma == pytest.approx(12e3, rel=1e-4)
    assert fit.offset == pytest.approx(0.015, abs=1e-6)

def test_gaussian_peak_needs_points():
    with pytest.raises(FitError):
        fit_gaussian_peak([0.0, 1.0, 2.0], [0.0, 1.0, 0.0])
