import itertools
import math
from dataclasses import replace

import numpy as np
import pytest

from agents.sequencer import (
    Gate,
    GateKind,
    GateProgram,
    SequenceStep,
    SequencerAgent,
    StepKind,
    check_dummy_pairing,
    compile_echo_program,
    compile_gate_program,
    compile_transfer_program,
    reference_program,
    validate_step_order,
)
from utils.atomsim import Channel, NoiseParams
from utils.config import RunConfig
from utils.error_handling import SequenceError
from utils.fidelity import expected_bloch_vector, state_overlap, storage_bloch_vectors
from utils.geometry import AtomClass, beams_for_target

CONFIG = RunConfig()
FAST = replace(CONFIG, shots=3, sequence=replace(CONFIG.sequence, steps_per_pulse=20, calibrate=False))

def _blocks(program: GateProgram):
    return [role for role, _ in itertools.groupby(step.role for step in program.steps)]

def test_two_target_block_order():
    program = compile_gate_program([(1, 1, 1), (3, 3, 1)], "I", CONFIG)
    assert _blocks(program) == ["opening", "real", "dummy", "", "dummy", "real", "closing"]
    assert program.steps[0].kind == StepKind.GLOBAL_HALF_PI
    assert program.closing is program.steps[-1]
    assert program.has_echo
    pointings = [step.pointing for step in program.steps if step.kind == StepKind.POINT_BEAMS]
    assert pointings == [(1, 1, 1), (3, 3, 1), (1, 1, 1), (3, 3, 1)]

def test_single_target_block_order():
    program = compile_gate_program([(2, 2, 2)], "II", CONFIG)
    assert _blocks(program) == ["opening", "real", "", "dummy", "closing"]
    assert program.name == "gate_II"

def test_dummy_blocks_replay_omega1():
    program = compile_gate_program([(2, 2, 2)], "I", CONFIG)
    dummy = [s.pulse for s in program.steps if s.role == "dummy" and s.kind == StepKind.MICROWAVE]
    real = [s.pulse for s in program.steps if s.role == "real" and s.kind == StepKind.MICROWAVE]
    assert [p.channel for p in dummy] == [Channel.DUMMY, Channel.OMEGA2, Channel.DUMMY]
    assert dummy[0].detuning_offset == real[0].detuning_offset
    # ω₂ is pushed off resonance in the dummy block
    assert dummy[1].detuning_offset - real[1].detuning_offset == pytest.approx(2.0 * math.pi * 1.0e6)

def test_detuned_dummy_mode_moves_omega1():
    config = replace(CONFIG, sequence=replace(CONFIG.sequence, dummy_mode="detuned"))
    program = compile_gate_program([(2, 2, 2)], "I", config)
    dummy = [s.pulse for s in program.steps if s.role == "dummy" and s.kind == StepKind.MICROWAVE]
    real = [s.pulse for s in program.steps if s.role == "real" and s.kind == StepKind.MICROWAVE]
    assert dummy[0].detuning_offset - real[0].detuning_offset == pytest.approx(2.0 * math.pi * 1.0e6)

def test_post_echo_axis_is_conjugated():
    program = compile_gate_program([(1, 1, 1), (3, 3, 1)], "II", CONFIG, compensation=[0.0, 0.0])
    omega2 = [s.pulse.phase for s in program.steps
              if s.role == "real" and s.kind == StepKind.MICROWAVE and s.pulse.channel == Channel.OMEGA2]
    assert omega2 == pytest.approx([-math.pi / 4, math.pi / 4])

def test_compile_rejects_bad_targets():
    with pytest.raises(SequenceError, match="one or two"):
        compile_gate_program([], "I", CONFIG)
    with pytest.raises(SequenceError, match="one or two"):
        compile_gate_program([(0, 0, 0), (1, 1, 1), (2, 2, 2)], "I", CONFIG)
    with pytest.raises(SequenceError, match="Coincident"):
        compile_gate_program([(1, 1, 1), (1, 1, 1)], "I", CONFIG)
    with pytest.raises(SequenceError, match="compensation"):
        compile_gate_program([(1, 1, 1)], "I", CONFIG, compensation=[0.0, 1.0])

def test_gate_lookup():
    assert Gate.of("I") == Gate(GateKind.I, 0.0, math.pi)
    assert Gate.of(GateKind.II).axis_phase == pytest.approx(math.pi / 4)
    assert Gate.of("III").angle == pytest.approx(math.pi / 2)
    assert Gate.custom(0.3, 1.0).label == "custom"
    with pytest.raises(SequenceError):
        Gate.of("IV")
    with pytest.raises(SequenceError):
        Gate.of("custom")

def test_unpaired_block_detected():
    program = compile_gate_program([(1, 1, 1), (3, 3, 1)], "I", CONFIG)
    echo = next(i for i, s in enumerate(program.steps) if s.kind == StepKind.ECHO)
    steps = program.steps[:echo + 1] + tuple(s for s in program.steps[echo + 1:] if s.role != "dummy")
    with pytest.raises(SequenceError, match="not paired"):
        check_dummy_pairing(replace(program, steps=steps))

def test_blocks_without_echo_rejected():
    program = compile_gate_program([(2, 2, 2)], "I", CONFIG)
    steps = tuple(s for s in program.steps if s.kind != StepKind.ECHO)
    with pytest.raises(SequenceError, match="echo"):
        check_dummy_pairing(replace(program, steps=steps))

def test_step_order_rules():
    beams = beams_for_target((2, 2, 2), CONFIG.lattice)
    point = SequenceStep(StepKind.POINT_BEAMS, 5e-6, beams=beams)
    on = SequenceStep(StepKind.RAMP_ON, 1e-4)
    off = SequenceStep(StepKind.RAMP_OFF, 1e-4)
    validate_step_order([point, on, off])
    with pytest.raises(SequenceError, match="pointed"):
        validate_step_order([on, off])
    with pytest.raises(SequenceError, match="light is off"):
        validate_step_order([point, on, point, off])
    with pytest.raises(SequenceError, match="ends with"):
        validate_step_order([point, on])
    with pytest.raises(SequenceError, match="already off"):
        validate_step_order([point, off])

def test_global_pulse_needs_light_off():
    beams = beams_for_target((2, 2, 2), CONFIG.lattice)
    echo = compile_echo_program(1e-3, CONFIG).steps[2]
    assert echo.kind == StepKind.ECHO
    steps = [SequenceStep(StepKind.POINT_BEAMS, 5e-6, beams=beams), SequenceStep(StepKind.RAMP_ON, 1e-4),
             echo, SequenceStep(StepKind.RAMP_OFF, 1e-4)]
    with pytest.raises(SequenceError, match="global pulse"):
        validate_step_order(steps)

def test_invalid_steps():
    with pytest.raises(SequenceError):
        SequenceStep("jump", 1e-6)
    with pytest.raises(SequenceError):
        SequenceStep(StepKind.WAIT, -1.0)
    with pytest.raises(SequenceError, match="needs a pulse"):
        SequenceStep(StepKind.MICROWAVE, 1e-4)
    with pytest.raises(SequenceError, match="at least one beam"):
        SequenceStep(StepKind.POINT_BEAMS, 5e-6)

def test_reference_program_keeps_timing():
    program = compile_gate_program([(1, 1, 1), (3, 3, 1)], "I", CONFIG)
    reference = reference_program(program)
    assert reference.reference
    assert reference.name == "gate_I_reference"
    assert reference.duration == pytest.approx(program.duration)
    assert not any(step.is_addressing for step in reference.steps)
    assert reference.has_echo
    assert reference.targets == program.targets

def test_program_json_round_trip():
    program = compile_gate_program([(1, 3, 3), (3, 1, 3)], "III", CONFIG, compensation=[0.25, 1.5])
    assert GateProgram.from_json(program.to_json()) == program

def test_program_json_errors():
    with pytest.raises(SequenceError):
        GateProgram.from_json("{}")
    with pytest.raises(SequenceError):
        GateProgram.from_json("not json")

def test_echo_program_duration():
    seq = CONFIG.sequence
    program = compile_echo_program(0.01, CONFIG)
    assert program.duration == pytest.approx(0.01 + 3 * seq.global_pulse_duration_s)
    ramsey = compile_echo_program(0.01, CONFIG, echo=False)
    assert not ramsey.has_echo
    assert ramsey.name == "ramsey"
    with pytest.raises(SequenceError):
        compile_echo_program(-1.0, CONFIG)

def test_noiseless_fringes():
    agent = SequencerAgent(CONFIG)
    alphas = [0.0, math.pi / 2, math.pi]
    kwargs = dict(shots=1, noise=NoiseParams.noiseless(), alphas=alphas, sites=[(2, 2, 2)], force_occupied=True)
    ramsey = agent.run_program(compile_echo_program(1e-3, CONFIG, echo=False), **kwargs)
    assert ramsey.probabilities[:, 0] == pytest.approx([1.0, 0.5, 0.0], abs=1e-4)
    # the echo pulse inverts the fringe
    echo = agent.run_program(compile_echo_program(1e-3, CONFIG), **kwargs)
    assert echo.probabilities[:, 0] == pytest.approx([0.0, 0.5, 1.0], abs=1e-4)

def test_fixed_seed_is_reproducible():
    agent = SequencerAgent(FAST)
    program = compile_gate_program([(2, 2, 2)], "I", FAST)
    first = agent.run_program(program, seed=5, alphas=[0.0, math.pi])
    second = agent.run_program(program, seed=5, alphas=[0.0, math.pi])
    assert np.array_equal(first.sites, second.sites)
    assert np.array_equal(first.outcomes, second.outcomes)
    assert first.n_experiments == 3
    assert first.probabilities.shape == (2, len(first.sites))

def test_run_result_classes():
    agent = SequencerAgent(FAST)
    program = compile_gate_program([(2, 2, 2)], "I", FAST)
    sites = [(2, 2, 2), (0, 2, 2), (2, 2, 3), (0, 0, 0)]
    result = agent.run_program(program, alphas=[0.0], sites=sites, force_occupied=True)
    assert result.class_counts() == {AtomClass.TARGET: 3, AtomClass.LINE: 3,
                                     AtomClass.NEAREST_NEIGHBOR: 3, AtomClass.SPECTATOR: 3}
    assert result.mask(AtomClass.TARGET).dtype == bool
    assert result.mask("line").sum() == 3

def test_fringe_scan_covers_every_class():
    config = replace(FAST, lattice=replace(FAST.lattice, occupancy_fill=1.0))
    agent = SequencerAgent(config)
    program = compile_gate_program([(2, 2, 2)], "I", config)
    fringes = agent.fringe_scan(program, alphas=[0.0, math.pi], shots=2)
    assert set(fringes) == set(AtomClass)
    for atom_class, data in fringes.items():
        assert data.atom_class == atom_class
        assert data.alpha.size == 2
        assert np.all(np.asarray(data.counts) > 0)
    assert fringes[AtomClass.TARGET].counts[0] == 2

def test_deterministic_phases_cancel_on_non_targets():
    agent = SequencerAgent(CONFIG)
    sites = [(0, 2, 2), (2, 2, 3), (0, 0, 0)]
    program = compile_gate_program([(2, 2, 2)], "II", CONFIG)
    reference = reference_program(program)
    for line_kick, zeeman_kick in ((0.35 * math.pi, 0.1 * math.pi), (1.3, 0.45), (-0.8, 2.2)):
        noise = replace(NoiseParams.deterministic(), line_phase_kick=line_kick, zeeman_phase_kick=zeeman_kick)
        kwargs = dict(shots=1, noise=noise, sites=sites, force_occupied=True)
        gated = agent.run_program(program, **kwargs)
        plain = agent.run_program(reference, **kwargs)
        assert gated.class_counts() == {AtomClass.LINE: 1, AtomClass.NEAREST_NEIGHBOR: 1, AtomClass.SPECTATOR: 1}
        assert np.allclose(storage_bloch_vectors(gated.ensemble.amplitudes),
                           storage_bloch_vectors(plain.ensemble.amplitudes), atol=1e-6)
        overlap = state_overlap(gated.ensemble.amplitudes, expected_bloch_vector(None, echo=True))
        assert np.all(overlap >= 1.0 - 1e-6)

def test_transfer_scan_reads_clearing_background():
    agent = SequencerAgent(FAST)
    noise = replace(NoiseParams.noiseless(), background_f3=0.25, leakage_f3=0.9)
    far = -20.0 * FAST.beams.peak_shift_hz
    scan = agent.frequency_scan([far], [(2, 2, 2)], shots=40, seed=3, noise=noise, fit_peaks=False)
    assert scan.ratios[AtomClass.SPECTATOR][0] == pytest.approx(0.25, abs=0.06)

def test_fringe_scan_needs_closing_pulse():
    agent = SequencerAgent(FAST)
    beams = beams_for_target((2, 2, 2), FAST.lattice)
    with pytest.raises(SequenceError, match="closing"):
        agent.fringe_scan(compile_transfer_program(beams, 0.0, FAST, pointing=(2, 2, 2)))

def test_calibrated_target_reaches_expected_state():
    agent = SequencerAgent(CONFIG)
    target = (2, 2, 2)
    compensation = agent.calibrate_compensation([target], "I")
    assert len(compensation) == 1
    assert 0.0 <= compensation[0] < 2.0 * math.pi
    program = compile_gate_program([target], "I", CONFIG, compensation)
    result = agent.run_program(program, shots=1, noise=NoiseParams.deterministic(), sites=[target],
                               force_occupied=True)
    overlap = state_overlap(result.ensemble.amplitudes, expected_bloch_vector(0.0, math.pi, echo=True))
    assert overlap[0] >= 0.99

def test_scan_arguments_validated():
    agent = SequencerAgent(FAST)
    with pytest.raises(SequenceError):
        agent.frequency_scan([], [(2, 2, 2)])
    with pytest.raises(SequenceError):
        agent.frequency_scan([0.0], [])
    with pytest.raises(SequenceError):
        agent.echo_contrast_curve([0.0, 1.0])
