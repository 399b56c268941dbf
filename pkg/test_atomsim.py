import math
import os

import numpy as np
import pytest
from scipy.integrate import quad

from utils.atomsim import (
    AtomEnsemble,
    AtomState,
    Channel,
    Envelope,
    Level,
    NoiseParams,
    PulseSpec,
    Readout,
    apply_light_phase,
    apply_pulse,
    blackman_envelope,
    calibrate_pi_pulse,
    evolve_free,
    measure_f3,
    sample_noise,
    write_trajectories_csv,
)
from utils.error_handling import MeasurementError, PulseError

DURATION = 100e-6

def _pulse(channel=Channel.OMEGA0, rotation=math.pi, **kwargs) -> PulseSpec:
    return PulseSpec(channel, calibrate_pi_pulse(channel, DURATION, rotation=rotation), DURATION, **kwargs)

def test_blackman_envelope_shape():
    assert blackman_envelope(0.0, 1.0) == pytest.approx(0.0, abs=1e-12)
    assert blackman_envelope(0.5, 1.0) == pytest.approx(1.0)
    assert blackman_envelope(1.0, 1.0) == pytest.approx(0.0, abs=1e-12)
    values = blackman_envelope(np.linspace(0.0, 1.0, 11), 1.0)
    assert np.allclose(values, values[::-1])

def test_blackman_envelope_rejects_bad_arguments():
    with pytest.raises(PulseError):
        blackman_envelope(0.1, 0.0)
    with pytest.raises(PulseError):
        blackman_envelope(1.5, 1.0)

def test_blackman_area_by_quadrature():
    for T in (1.0, 2.5):
        area, _ = quad(blackman_envelope, 0.0, T, args=(T,), epsabs=1e-13, epsrel=1e-13)
        assert area / T == pytest.approx(0.42, abs=1e-9)
        assert Envelope.BLACKMAN.area_fraction == pytest.approx(area / T, abs=1e-9)

def test_square_pulse_follows_rabi_formula():
    rabi = 2.0 * math.pi * 5e3
    for duration in (10e-6, 37e-6, 100e-6, 250e-6):
        pulse = PulseSpec(Channel.OMEGA0, rabi, duration, envelope=Envelope.SQUARE)
        state = apply_pulse(AtomState.in_level(Level.F3_M0), pulse)
        assert state.populations()[Level.F4_M0] == pytest.approx(math.sin(rabi * duration / 2) ** 2, abs=1e-8)

def test_halving_the_step_converges():
    start = AtomState.storage(1.0, 1j)
    for channel, detuning in ((Channel.OMEGA0, 2.0 * math.pi * 3e3), (Channel.OMEGA1, -2.0 * math.pi * 8e3)):
        pulse = _pulse(channel, detuning_offset=detuning)
        coarse = apply_pulse(start, pulse, steps=400)
        fine = apply_pulse(start, pulse, steps=800)
        assert np.max(np.abs(coarse.amplitudes - fine.amplitudes)) < 1e-8

def test_echo_removes_static_detuning():
    def echo(detuning_hz):
        energies = np.zeros(5)
        energies[Level.F4_M0] = 2.0 * math.pi * detuning_hz
        state = apply_pulse(AtomState.in_level(Level.F3_M0), _pulse(rotation=math.pi / 2))
        state = evolve_free(state, energies, 1e-3)
        state = apply_pulse(state, _pulse())
        return evolve_free(state, energies, 1e-3)

    reference = echo(0.0)
    for detuning_hz in (13.0, 130.0, -470.0, 2.2e3):
        overlap = abs(np.vdot(reference.amplitudes, echo(detuning_hz).amplitudes)) ** 2
        assert overlap == pytest.approx(1.0, abs=1e-9)

def test_pi_calibration_area():
    pulse = _pulse()
    assert pulse.area == pytest.approx(math.pi)
    square = PulseSpec(Channel.OMEGA2, calibrate_pi_pulse(Channel.OMEGA2, DURATION, Envelope.SQUARE),
                       DURATION, envelope=Envelope.SQUARE)
    assert square.area == pytest.approx(math.pi)

def test_invalid_pulses():
    with pytest.raises(PulseError):
        PulseSpec("omega9", 1.0, DURATION)
    with pytest.raises(PulseError):
        PulseSpec(Channel.OMEGA0, 1.0, 0.0)
    with pytest.raises(PulseError):
        apply_pulse(AtomState.in_level(Level.F3_M0), _pulse(), steps=0)

def test_resonant_pi_pulse_transfers():
    state = apply_pulse(AtomState.in_level(Level.F3_M0), _pulse())
    assert state.populations()[Level.F4_M0] == pytest.approx(1.0, abs=1e-6)
    assert state.norm() == pytest.approx(1.0, abs=1e-12)

def test_half_pi_pulse_splits():
    state = apply_pulse(AtomState.in_level(Level.F3_M0), _pulse(rotation=math.pi / 2))
    populations = state.populations()
    assert populations[Level.F3_M0] == pytest.approx(0.5, abs=1e-6)
    assert populations[Level.F4_M0] == pytest.approx(0.5, abs=1e-6)

def test_pulse_phase_sets_axis():
    # π/2 about x then π/2 about −x returns the atom
    opened = apply_pulse(AtomState.in_level(Level.F3_M0), _pulse(rotation=math.pi / 2))
    closed = apply_pulse(opened, _pulse(rotation=math.pi / 2, phase=math.pi))
    assert closed.populations()[Level.F3_M0] == pytest.approx(1.0, abs=1e-6)

def test_far_detuned_pulse_leaves_population():
    pulse = _pulse(detuning_offset=2.0 * math.pi * 1.0e6)
    state = apply_pulse(AtomState.in_level(Level.F3_M0), pulse)
    assert state.populations()[Level.F3_M0] > 0.999

def test_uncoupled_levels_untouched():
    state = apply_pulse(AtomState.in_level(Level.F3_MM1), _pulse(Channel.OMEGA2))
    assert state.populations()[Level.F3_MM1] == pytest.approx(1.0)

def test_omega1_drives_both_pairs():
    pulse = _pulse(Channel.OMEGA1)
    from_31 = apply_pulse(AtomState.in_level(Level.F3_M1), pulse)
    from_30 = apply_pulse(AtomState.in_level(Level.F3_M0), pulse)
    assert from_31.populations()[Level.F4_M0] == pytest.approx(1.0, abs=1e-6)
    assert from_30.populations()[Level.F4_M1] == pytest.approx(1.0, abs=1e-6)

def test_ensemble_matches_single_atoms():
    detunings = np.array([0.0, 2.0 * math.pi * 3e3, -2.0 * math.pi * 7e3])
    ensemble = AtomEnsemble.prepared(3)
    out = apply_pulse(ensemble, _pulse(rotation=math.pi / 2), detuning_offsets=detunings)
    for n, detuning in enumerate(detunings):
        single = apply_pulse(AtomState.in_level(Level.F3_M0), _pulse(rotation=math.pi / 2, detuning_offset=detuning))
        assert np.allclose(out.amplitudes[n], single.amplitudes, atol=1e-12)

def test_norm_preserved_under_random_pulses():
    rng = np.random.default_rng(3)
    amplitudes = rng.standard_normal((20, 5)) + 1j * rng.standard_normal((20, 5))
    amplitudes /= np.linalg.norm(amplitudes, axis=1, keepdims=True)
    ensemble = AtomEnsemble.prepared(20, amplitudes)
    energies = 2.0 * math.pi * 1e4 * rng.standard_normal((20, 5))
    for channel in Channel:
        ensemble = apply_pulse(ensemble, _pulse(channel, phase=rng.uniform(0, 2 * math.pi)), energies)
    assert np.allclose(ensemble.populations().sum(axis=1), 1.0, atol=1e-10)

def test_zeeman_kick_only_phases_f4_m0():
    state = AtomState.storage(1.0, 1.0)
    pulse = _pulse(Channel.OMEGA1, detuning_offset=2.0 * math.pi * 248e3)
    noise = NoiseParams()
    plain = apply_pulse(state, pulse)
    kicked = apply_pulse(state, pulse, noise=noise)
    ratio = kicked.amplitudes[Level.F4_M0] / plain.amplitudes[Level.F4_M0]
    assert ratio == pytest.approx(np.exp(-1j * noise.zeeman_phase_kick))
    assert kicked.amplitudes[Level.F3_M0] == pytest.approx(plain.amplitudes[Level.F3_M0])

def test_resonant_addressing_pulse_gets_no_kick():
    state = AtomState.in_level(Level.F3_M1)
    pulse = _pulse(Channel.OMEGA1)
    assert np.allclose(apply_pulse(state, pulse, noise=NoiseParams()).amplitudes,
                       apply_pulse(state, pulse).amplitudes)

def test_light_phase():
    state = apply_light_phase(AtomState.storage(1.0, 1.0), [1.0, 0.5], kick=0.2)
    phase = np.angle(state.amplitudes[Level.F4_M0] / state.amplitudes[Level.F3_M0])
    assert phase == pytest.approx(-0.3)

def test_free_evolution_phase():
    energies = np.zeros(5)
    energies[Level.F4_M0] = 2.0 * math.pi * 100.0
    state = evolve_free(AtomState.storage(1.0, 1.0), energies, 1e-3)
    phase = np.angle(state.amplitudes[Level.F4_M0] / state.amplitudes[Level.F3_M0])
    assert phase == pytest.approx(-0.2 * math.pi)
    with pytest.raises(PulseError):
        evolve_free(state, energies, -1.0)

def test_measure_f3_ideal():
    assert measure_f3(AtomState.in_level(Level.F3_M0)) == pytest.approx(1.0)
    assert measure_f3(AtomState.in_level(Level.F4_M1)) == pytest.approx(0.0)
    assert measure_f3(AtomState.in_level(Level.F3_MM1)) == pytest.approx(1.0)

def test_measure_f3_background_and_t1():
    noise = NoiseParams(background_f3=0.017)
    assert measure_f3(AtomState.in_level(Level.F4_M0), noise, readout=Readout.TRANSFER) == pytest.approx(0.017)
    clean = NoiseParams(leakage_f3=0.0, background_f3=0.0)
    decayed = measure_f3(AtomState.in_level(Level.F3_M0), clean, elapsed=7.4)
    assert decayed == pytest.approx(math.exp(-1.0) + (1.0 - math.exp(-1.0)) / 2.0)

def test_measure_f3_storage_readout_adds_leakage():
    f4 = AtomState.in_level(Level.F4_M0)
    assert measure_f3(f4, NoiseParams(leakage_f3=0.5, background_f3=0.0)) == pytest.approx(0.5)
    assert measure_f3(f4, NoiseParams.noiseless()) == pytest.approx(0.0)
    noise = NoiseParams()
    assert noise.f3_floor() == pytest.approx(0.02)
    assert noise.f3_floor(Readout.TRANSFER) == pytest.approx(0.017)
    # a superposition reads f + (1 − f)·P(F=3)
    state = AtomState.storage(math.sqrt(0.3), math.sqrt(0.7))
    assert measure_f3(state, noise) == pytest.approx(0.02 + 0.98 * 0.3)

def test_measure_f3_lost_and_sampling():
    ensemble = AtomEnsemble.prepared(4)
    ensemble.lost[1] = True
    assert list(measure_f3(ensemble)) == [1.0, 0.0, 1.0, 1.0]
    sampled = measure_f3(AtomEnsemble.prepared(2, Level.F4_M0), NoiseParams(leakage_f3=0.5),
                         repetitions=1000, seed=1)
    assert np.all(np.abs(sampled - 0.5) < 0.1)
    with pytest.raises(MeasurementError):
        measure_f3(ensemble, repetitions=0)

def test_loss_probability_near_ten_percent():
    assert NoiseParams().loss_probability(0.0) == pytest.approx(0.098, abs=0.005)

def test_sample_noise_deterministic_channels_off():
    realization = sample_noise(50, NoiseParams.deterministic(), seed=4)
    assert np.all(realization.vib_level == 0)
    assert np.allclose(realization.detuning, 0.0)
    assert not realization.lost.any()
    assert np.allclose(realization.rabi_scale, 1.0)

def test_excited_vibrational_fraction():
    realization = sample_noise(100_000, NoiseParams(), seed=17)
    assert np.mean(realization.vib_level > 0) == pytest.approx(0.30, abs=0.005)

def test_sample_noise_reproducible_and_core_sigma():
    noise = NoiseParams(p_excited_vib=0.0, core_detuning_sigma_hz=0.0)
    core = np.array([True, False] * 50)
    first = sample_noise(100, noise, seed=11, core_mask=core)
    second = sample_noise(100, noise, seed=11, core_mask=core)
    assert np.array_equal(first.detuning, second.detuning)
    assert np.allclose(first.detuning[core], 0.0)
    assert np.std(first.detuning[~core]) > 0

def test_write_trajectories_sorted(tmp_path):
    ensemble = AtomEnsemble.prepared(3)
    path = write_trajectories_csv(os.path.join(tmp_path, "t.csv"), [(1, 0, 0), (0, 0, 0), (0, 0, 1)],
                                  [1, 0, 0], ensemble)
    with open(path) as f:
        lines = f.read().splitlines()
    assert lines[0] == "i,j,k,shot,p30,p40,p31,p41,p3m1,lost"
    assert [line.split(",")[:4] for line in lines[1:]] == [["0", "0", "0", "0"], ["0", "0", "1", "0"],
                                                          ["1", "0", "0", "1"]]
