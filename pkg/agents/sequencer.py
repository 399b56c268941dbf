import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import minimize_scalar

from utils.atomsim import (
    ADDRESSING_CHANNELS,
    AtomEnsemble,
    Channel,
    Envelope,
    Level,
    NoiseParams,
    NoiseRealization,
    PulseSpec,
    Readout,
    apply_light_phase,
    apply_pulse,
    calibrate_pi_pulse,
    evolve_free,
    measure_f3,
    sample_noise,
)
from utils.config import RunConfig, SequenceConfig
from utils.error_handling import AddressingError, FitError, SequenceError
from utils.fidelity import expected_bloch_vector, state_overlap
from utils.fitting import (
    ExponentialFit,
    FringeData,
    PeakFit,
    fit_exponential_contrast,
    fit_gaussian_peak,
    fit_sinusoid,
)
from utils.geometry import (
    AtomClass,
    BeamSpec,
    LatticeConfig,
    ShiftCoefficients,
    SiteIndex,
    Transition,
    beam_intensity_at,
    beams_for_target,
    check_beam_set,
    classify_sites,
    level_energies_at,
    on_beam_line,
    transition_shifts_at,
)
from utils.random_streams import child_seed

# Rows (atom × experiment) integrated together; bounds working memory
_CHUNK_ROWS = 20000
# RunResult.classes holds AtomClass values, not members
CLASS_DTYPE = "<U16"

class StepKind(str, Enum):
    POINT_BEAMS = "point_beams"
    RAMP_ON = "ramp_on"
    RAMP_OFF = "ramp_off"
    MICROWAVE = "microwave"
    WAIT = "wait"
    ECHO = "echo"
    GLOBAL_HALF_PI = "global_half_pi"

_PULSED_KINDS = (StepKind.MICROWAVE, StepKind.ECHO, StepKind.GLOBAL_HALF_PI)

class DummyMode(str, Enum):
    REPLAY = "replay"
    DETUNED = "detuned"

def _beam_to_dict(beam: BeamSpec) -> Dict[str, Any]:
    return {
        "axis": beam.axis.value,
        "line": list(beam.line),
        "waist_w0": beam.waist_w0,
        "rayleigh_zR": beam.rayleigh_zR,
        "peak_shift_hz": beam.peak_shift_hz,
        "coefficients": {
            "storage": beam.coefficients.storage,
            "up_from_40": beam.coefficients.up_from_40,
            "up_from_30": beam.coefficients.up_from_30,
            "down_from_40": beam.coefficients.down_from_40,
        },
        "offset_um": list(beam.offset_um),
        "focus_um": beam.focus_um,
    }

def _beam_from_dict(data: Mapping[str, Any]) -> BeamSpec:
    params = dict(data)
    params["coefficients"] = ShiftCoefficients(**params.get("coefficients", {}))
    params["line"] = tuple(params["line"])
    params["offset_um"] = tuple(params.get("offset_um", (0.0, 0.0)))
    return BeamSpec(**params)

@dataclass(frozen=True)
class SequenceStep:
    """
    One entry of a compiled program.

    ``role`` tags the block a step belongs to: "real" or "dummy" addressing blocks,
    "opening" and "closing" framing pulses, "transfer" pulses and "reference" waits.
    """
    kind: StepKind
    duration: float
    pulse: Optional[PulseSpec] = None
    beams: Tuple[BeamSpec, ...] = ()
    pointing: Optional[SiteIndex] = None
    role: str = ""

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", StepKind(self.kind))
        except ValueError:
            raise SequenceError(f"Unknown step kind '{self.kind}'")
        if not (math.isfinite(self.duration) and self.duration >= 0):
            raise SequenceError(f"Step duration must be finite and non-negative, got {self.duration}")
        if self.kind in _PULSED_KINDS:
            if self.pulse is None:
                raise SequenceError(f"A {self.kind.value} step needs a pulse")
            if abs(self.pulse.duration - self.duration) > 1e-15:
                raise SequenceError(f"{self.kind.value} step duration differs from its pulse duration")
        if self.kind == StepKind.POINT_BEAMS:
            if not self.beams:
                raise SequenceError("PointBeams needs at least one beam")
            check_beam_set(self.beams)
        object.__setattr__(self, "beams", tuple(self.beams))
        if self.pointing is not None:
            object.__setattr__(self, "pointing", SiteIndex(*self.pointing))

    @property
    def is_addressing(self) -> bool:
        """Steps that need the addressing light or beams."""
        if self.kind in (StepKind.POINT_BEAMS, StepKind.RAMP_ON, StepKind.RAMP_OFF):
            return True
        return self.kind == StepKind.MICROWAVE and self.pulse.channel in ADDRESSING_CHANNELS

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {"kind": self.kind.value, "duration": self.duration, "role": self.role}
        if self.pulse is not None:
            data["pulse"] = self.pulse.to_dict()
        if self.beams:
            data["beams"] = [_beam_to_dict(beam) for beam in self.beams]
        if self.pointing is not None:
            data["pointing"] = list(self.pointing)
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SequenceStep":
        return cls(
            kind=StepKind(data["kind"]),
            duration=float(data["duration"]),
            pulse=PulseSpec.from_dict(data["pulse"]) if data.get("pulse") else None,
            beams=tuple(_beam_from_dict(b) for b in data.get("beams", [])),
            pointing=SiteIndex(*data["pointing"]) if data.get("pointing") is not None else None,
            role=data.get("role", ""),
        )

class GateKind(str, Enum):
    I = "I"
    II = "II"
    III = "III"
    CUSTOM = "custom"

# (axis azimuth, rotation angle) of the named gates
_GATE_AXES = {
    GateKind.I: (0.0, math.pi),
    GateKind.II: (math.pi / 4.0, math.pi),
    GateKind.III: (0.0, math.pi / 2.0),
}

@dataclass(frozen=True)
class Gate:
    kind: GateKind
    axis_phase: float
    angle: float

    @classmethod
    def of(cls, gate: Union["Gate", GateKind, str]) -> "Gate":
        if isinstance(gate, Gate):
            return gate
        try:
            kind = GateKind(gate)
        except ValueError:
            raise SequenceError(f"Unknown gate '{gate}' (expected I, II or III)")
        if kind == GateKind.CUSTOM:
            raise SequenceError("Custom gates need an axis phase and angle; use Gate.custom")
        axis_phase, angle = _GATE_AXES[kind]
        return cls(kind, axis_phase, angle)

    @classmethod
    def custom(cls, axis_phase: float, angle: float) -> "Gate":
        return cls(GateKind.CUSTOM, float(axis_phase), float(angle))

    @property
    def label(self) -> str:
        return self.kind.value

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind.value, "axis_phase": self.axis_phase, "angle": self.angle}

@dataclass(frozen=True)
class GateProgram:
    steps: Tuple[SequenceStep, ...]
    targets: Tuple[SiteIndex, ...] = ()
    target_beams: Tuple[Tuple[BeamSpec, ...], ...] = ()
    gate: Optional[Gate] = None
    compensation: Tuple[float, ...] = ()
    name: str = "gate"
    reference: bool = False

    @property
    def duration(self) -> float:
        return float(sum(step.duration for step in self.steps))

    @property
    def closing(self) -> Optional[SequenceStep]:
        if self.steps and self.steps[-1].kind == StepKind.GLOBAL_HALF_PI and self.steps[-1].role == "closing":
            return self.steps[-1]
        return None

    @property
    def has_echo(self) -> bool:
        return any(step.kind == StepKind.ECHO for step in self.steps)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "reference": self.reference,
            "targets": [list(t) for t in self.targets],
            "target_beams": [[_beam_to_dict(b) for b in beams] for beams in self.target_beams],
            "gate": self.gate.to_dict() if self.gate is not None else None,
            "compensation": list(self.compensation),
            "duration": self.duration,
            "steps": [step.to_dict() for step in self.steps],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "GateProgram":
        gate = data.get("gate")
        program = cls(
            steps=tuple(SequenceStep.from_dict(s) for s in data["steps"]),
            targets=tuple(SiteIndex(*t) for t in data.get("targets", [])),
            target_beams=tuple(tuple(_beam_from_dict(b) for b in beams) for beams in data.get("target_beams", [])),
            gate=Gate(GateKind(gate["kind"]), float(gate["axis_phase"]), float(gate["angle"])) if gate else None,
            compensation=tuple(float(c) for c in data.get("compensation", [])),
            name=data.get("name", "gate"),
            reference=bool(data.get("reference", False)),
        )
        validate_step_order(program.steps)
        return program

    @classmethod
    def from_json(cls, text: str) -> "GateProgram":
        try:
            return cls.from_dict(json.loads(text))
        except (KeyError, TypeError, ValueError) as e:
            raise SequenceError(f"Invalid program document: {str(e)}")

def _omega0_pulse(seq: SequenceConfig, rotation: float, phase: float) -> PulseSpec:
    envelope = Envelope(seq.envelope)
    duration = seq.global_pulse_duration_s
    return PulseSpec(Channel.OMEGA0, calibrate_pi_pulse(Channel.OMEGA0, duration, envelope, rotation),
                     duration, phase, 0.0, envelope)

def _opening(seq: SequenceConfig) -> SequenceStep:
    pulse = _omega0_pulse(seq, math.pi / 2.0, 0.0)
    return SequenceStep(StepKind.GLOBAL_HALF_PI, pulse.duration, pulse, role="opening")

def _closing(seq: SequenceConfig, alpha: float = 0.0) -> SequenceStep:
    # the closing axis is at π − α so the fringe reads P₀ = (1 + cos α)/2 with no gate and no echo
    pulse = _omega0_pulse(seq, math.pi / 2.0, math.pi - alpha)
    return SequenceStep(StepKind.GLOBAL_HALF_PI, pulse.duration, pulse, role="closing")

def _echo(seq: SequenceConfig) -> SequenceStep:
    pulse = _omega0_pulse(seq, math.pi, 0.0)
    return SequenceStep(StepKind.ECHO, pulse.duration, pulse)

def _wait(duration: float, role: str = "") -> List[SequenceStep]:
    return [SequenceStep(StepKind.WAIT, duration, role=role)] if duration > 0 else []

def target_tones(target: Sequence[int], beams: Sequence[BeamSpec], lattice: LatticeConfig) -> Tuple[float, float]:
    """ω₁ and ω₂ tone offsets (rad/s) resonant with the target under nominal pointing."""
    shifts = transition_shifts_at(beams, lattice.position(target)[None, :], lattice)
    return float(shifts[Transition.UP_FROM_40][0]), float(shifts[Transition.COMPUTATIONAL][0])

def _addressing_block(target: SiteIndex, beams: Tuple[BeamSpec, ...], seq: SequenceConfig,
                      tones: Tuple[float, float], omega2_rabi: float, omega2_phase: float,
                      dummy: bool) -> List[SequenceStep]:
    envelope = Envelope(seq.envelope)
    duration = seq.addressing_pulse_duration_s
    rabi1 = calibrate_pi_pulse(Channel.OMEGA1, duration, envelope)
    detune = 2.0 * math.pi * seq.dummy_detuning_hz
    tone1, tone2 = tones
    role = "dummy" if dummy else "real"

    if dummy:
        channel1 = Channel.DUMMY
        offset1 = tone1 if DummyMode(seq.dummy_mode) == DummyMode.REPLAY else tone1 + detune
        offset2, phase2 = tone2 + detune, 0.0
    else:
        channel1, offset1, offset2, phase2 = Channel.OMEGA1, tone1, tone2, omega2_phase

    omega1 = PulseSpec(channel1, rabi1, duration, 0.0, offset1, envelope)
    omega2 = PulseSpec(Channel.OMEGA2, omega2_rabi, duration, phase2, offset2, envelope)
    return (
        [SequenceStep(StepKind.POINT_BEAMS, seq.mems_settle_s, beams=beams, pointing=target, role=role),
         SequenceStep(StepKind.RAMP_ON, seq.ramp_duration_s, role=role),
         SequenceStep(StepKind.MICROWAVE, duration, omega1, role=role)]
        + _wait(seq.pulse_gap_s, role)
        + [SequenceStep(StepKind.MICROWAVE, duration, omega2, role=role)]
        + _wait(seq.pulse_gap_s, role)
        + [SequenceStep(StepKind.MICROWAVE, duration, omega1, role=role),
           SequenceStep(StepKind.RAMP_OFF, seq.ramp_duration_s, role=role)]
    )

def compile_gate_program(targets: Sequence[Sequence[int]], gate: Union[Gate, GateKind, str],
                         config: RunConfig, compensation: Optional[Sequence[float]] = None) -> GateProgram:
    """
    Compile the dummy-gate spin-echo program for one or two targets.

    Order: opening → real A → dummy B → echo → dummy A → real B → closing. A single
    target gets open → real A → echo → dummy A → close. Blocks after the echo use the
    echo-conjugated axis so every target ends in the same state.

    Args:
        targets: One or two distinct sites
        gate: Gate I, II, III or a custom Gate
        config: Run configuration supplying lattice, beam template and timings
        compensation: ω₂ phase offset per target (zero if None)

    Returns:
        GateProgram

    Raises:
        SequenceError: For zero, more than two or coincident targets
    """
    lattice, seq = config.lattice, config.sequence
    if not 1 <= len(targets) <= 2:
        raise SequenceError(f"An echo block addresses one or two targets, got {len(targets)}")
    checked = tuple(lattice.check_site(t) for t in targets)
    if len(set(checked)) != len(checked):
        raise SequenceError(f"Coincident targets {checked[0]}")
    gate = Gate.of(gate)
    compensation = tuple(float(c) for c in (compensation if compensation is not None else [0.0] * len(checked)))
    if len(compensation) != len(checked):
        raise SequenceError(f"Need one compensation phase per target, got {len(compensation)}")

    pointings = tuple(beams_for_target(t, lattice, config.beams) for t in checked)
    tones = [target_tones(t, beams, lattice) for t, beams in zip(checked, pointings)]
    omega2_rabi = calibrate_pi_pulse(Channel.OMEGA2, seq.addressing_pulse_duration_s,
                                     Envelope(seq.envelope), gate.angle)

    def block(index: int, dummy: bool, after_echo: bool) -> List[SequenceStep]:
        axis = -gate.axis_phase if after_echo else gate.axis_phase
        return _addressing_block(checked[index], pointings[index], seq, tones[index], omega2_rabi,
                                 compensation[index] - axis, dummy)

    steps = [_opening(seq)] + block(0, False, False)
    if len(checked) == 2:
        steps += block(1, True, False)
    steps += [_echo(seq)] + block(0, True, True)
    if len(checked) == 2:
        steps += block(1, False, True)
    steps.append(_closing(seq))

    program = GateProgram(tuple(steps), checked, pointings, gate, compensation, name=f"gate_{gate.label}")
    validate_step_order(program.steps)
    check_dummy_pairing(program)
    return program

def compile_echo_program(duration: float, config: RunConfig, echo: bool = True) -> GateProgram:
    """π/2 – T/2 – π – T/2 – π/2(α), or the Ramsey π/2 – T – π/2(α) when ``echo`` is False."""
    if not (math.isfinite(duration) and duration >= 0):
        raise SequenceError(f"Free-evolution time must be non-negative, got {duration}")
    seq = config.sequence
    if echo:
        steps = [_opening(seq)] + _wait(duration / 2.0) + [_echo(seq)] + _wait(duration / 2.0) + [_closing(seq)]
    else:
        steps = [_opening(seq)] + _wait(duration) + [_closing(seq)]
    program = GateProgram(tuple(steps), name="echo" if echo else "ramsey")
    validate_step_order(program.steps)
    return program

def compile_transfer_program(beams: Sequence[BeamSpec], tone_offset: float, config: RunConfig,
                             channel: Channel = Channel.OMEGA1_MINUS,
                             pointing: Optional[Sequence[int]] = None) -> GateProgram:
    """Point, ramp on, one π pulse on ``channel`` at ``tone_offset`` (rad/s), ramp off."""
    seq = config.sequence
    envelope = Envelope(seq.envelope)
    duration = seq.addressing_pulse_duration_s
    pulse = PulseSpec(channel, calibrate_pi_pulse(channel, duration, envelope), duration, 0.0, tone_offset, envelope)
    site = config.lattice.check_site(pointing) if pointing is not None else None
    steps = (
        SequenceStep(StepKind.POINT_BEAMS, seq.mems_settle_s, beams=tuple(beams), pointing=site, role="transfer"),
        SequenceStep(StepKind.RAMP_ON, seq.ramp_duration_s, role="transfer"),
        SequenceStep(StepKind.MICROWAVE, duration, pulse, role="transfer"),
        SequenceStep(StepKind.RAMP_OFF, seq.ramp_duration_s, role="transfer"),
    )
    targets = (site,) if site is not None else ()
    target_beams = (tuple(beams),) if site is not None else ()
    program = GateProgram(steps, targets, target_beams, name="transfer")
    validate_step_order(program.steps)
    return program

def reference_program(program: GateProgram) -> GateProgram:
    """The same program with every addressing step replaced by a wait of equal duration."""
    steps = tuple(
        SequenceStep(StepKind.WAIT, step.duration, role="reference") if step.is_addressing else step
        for step in program.steps
    )
    return replace(program, steps=steps, name=f"{program.name}_reference", reference=True)

def validate_step_order(steps: Sequence[SequenceStep]) -> None:
    """
    Check light and pointing ordering rules.

    Raises:
        SequenceError: If ramps do not alternate, beams move with the light on, an
            addressing pulse runs with the light off, a global pulse runs with the light
            on, or the program ends with the light on
    """
    light_on = False
    pointed = False
    for index, step in enumerate(steps):
        where = f"step {index} ({step.kind.value})"
        if step.kind == StepKind.POINT_BEAMS:
            if light_on:
                raise SequenceError(f"{where}: beams can only move while the light is off")
            pointed = True
        elif step.kind == StepKind.RAMP_ON:
            if light_on:
                raise SequenceError(f"{where}: light is already on")
            if not pointed:
                raise SequenceError(f"{where}: light ramped on before the beams were pointed")
            light_on = True
        elif step.kind == StepKind.RAMP_OFF:
            if not light_on:
                raise SequenceError(f"{where}: light is already off")
            light_on = False
        elif step.kind == StepKind.MICROWAVE:
            if step.pulse.channel in ADDRESSING_CHANNELS and not light_on:
                raise SequenceError(f"{where}: {step.pulse.channel.value} pulse needs the addressing light on")
            if step.pulse.channel == Channel.OMEGA0 and light_on:
                raise SequenceError(f"{where}: global pulse while the addressing light is on")
        elif step.kind in (StepKind.ECHO, StepKind.GLOBAL_HALF_PI):
            if light_on:
                raise SequenceError(f"{where}: global pulse while the addressing light is on")
    if light_on:
        raise SequenceError("Program ends with the addressing light on")

def _block_signatures(program: GateProgram) -> Tuple[Counter, Counter]:
    sides: Tuple[Counter, Counter] = (Counter(), Counter())
    echoes = 0
    current: Optional[List[Tuple[Any, ...]]] = None
    for step in program.steps:
        if step.kind == StepKind.ECHO:
            echoes += 1
            if echoes > 1:
                raise SequenceError("Programs carry a single echo pulse")
            continue
        if step.kind == StepKind.POINT_BEAMS:
            current = [tuple((b.axis.value, b.line, b.offset_um) for b in step.beams)]
        if current is None:
            continue
        event: Tuple[Any, ...] = (step.kind.value, round(step.duration, 12))
        if step.pulse is not None:
            # for a non-target atom a dummy ω₁ pulse is indistinguishable from a real one
            channel = Channel.OMEGA1 if step.pulse.channel == Channel.DUMMY else step.pulse.channel
            event += (channel.value, round(step.pulse.area, 9))
        current.append(event)
        if step.kind == StepKind.RAMP_OFF:
            sides[min(echoes, 1)][tuple(current)] += 1
            current = None
    if echoes == 0 and (sides[0] or sides[1]):
        raise SequenceError("Addressing blocks need an echo pulse to pair with")
    return sides

def check_dummy_pairing(program: GateProgram) -> None:
    """
    Static check that every addressing block before the echo has an identical partner after it.

    Raises:
        SequenceError: Naming the first unmatched pointing
    """
    before, after = _block_signatures(program)
    if before != after:
        unmatched = (before - after) + (after - before)
        pointing = next(iter(unmatched))[0]
        raise SequenceError(f"Addressing block at pointing {pointing} is not paired across the echo")

@dataclass
class _Batch:
    sites: np.ndarray
    experiment: np.ndarray
    realization: NoiseRealization
    uniforms: np.ndarray
    jitter: np.ndarray

    @property
    def size(self) -> int:
        return self.sites.shape[0]

def _draw_batch(lattice: LatticeConfig, noise: NoiseParams, seed: Optional[int], keys: Sequence[Tuple[int, ...]],
                duration: float, n_point: int, n_alpha: int, candidates: Optional[np.ndarray],
                force_occupied: bool) -> _Batch:
    """Occupancy, noise, measurement draws and pointing jitter per experiment, in that order."""
    middle = (np.array(lattice.dims) - 1) / 2.0
    sites, experiment, realizations, uniforms, jitter = [], [], [], [], []
    for index, key in enumerate(keys):
        rng = np.random.default_rng(child_seed(seed, *key))
        occupancy = lattice.sample_occupancy(rng)
        if candidates is None:
            occupied = np.argwhere(occupancy)
        elif force_occupied:
            occupied = candidates
        else:
            occupied = candidates[occupancy[tuple(candidates.T)]]
        core = np.all(np.abs(occupied - middle) <= 1.0, axis=1)
        realizations.append(sample_noise(len(occupied), noise, rng, duration, core))
        uniforms.append(rng.random((n_alpha, len(occupied))))
        jitter.append(rng.standard_normal((n_point, 2, 2)) * noise.pointing_jitter_um)
        sites.append(occupied)
        experiment.append(np.full(len(occupied), index))

    realization = NoiseRealization(
        np.concatenate([r.vib_level for r in realizations]).astype(int),
        np.concatenate([r.detuning for r in realizations]),
        np.concatenate([r.lost for r in realizations]).astype(bool),
        np.concatenate([r.rabi_scale for r in realizations]),
    )
    return _Batch(
        np.concatenate(sites).reshape(-1, 3).astype(int),
        np.concatenate(experiment).astype(int),
        realization,
        np.concatenate(uniforms, axis=1),
        np.stack(jitter) if jitter else np.zeros((0, n_point, 2, 2)),
    )

def _execute(program: GateProgram, batch: _Batch, lattice: LatticeConfig, noise: NoiseParams, steps: int,
             initial: Level = Level.F3_M0, tones: Optional[np.ndarray] = None,
             displacements: Optional[np.ndarray] = None) -> Tuple[AtomEnsemble, Optional[np.ndarray]]:
    """
    Run every step before the closing pulse.

    Returns:
        The ensemble before the closing pulse and, when the program has one, the
        phase-zero closing unitary restricted to the storage basis, shape (N, 2, 2)
    """
    positions = lattice.positions(batch.sites)
    ensemble = batch.realization.apply(AtomEnsemble.prepared(batch.size, initial))
    base = batch.realization.level_offsets()
    rabi_scale = batch.realization.rabi_scale
    light = np.zeros_like(base)
    exposure = np.zeros(batch.size)
    light_on = False
    point_index = 0

    closing = program.closing
    body = program.steps[:-1] if closing is not None else program.steps
    for step in body:
        if step.kind == StepKind.POINT_BEAMS:
            offsets = []
            for b in range(len(step.beams)):
                offset = batch.jitter[batch.experiment, point_index, b]
                offsets.append(offset if displacements is None else offset + displacements)
            point_index += 1
            light = level_energies_at(step.beams, positions, lattice, offsets)
            exposure = sum(beam_intensity_at(beam, positions, lattice, offset)
                           for beam, offset in zip(step.beams, offsets))
            ensemble = evolve_free(ensemble, base, step.duration)
        elif step.kind == StepKind.RAMP_ON:
            ensemble = evolve_free(ensemble, base + 0.5 * light, step.duration)
            light_on = True
        elif step.kind == StepKind.RAMP_OFF:
            ensemble = evolve_free(ensemble, base + 0.5 * light, step.duration)
            ensemble = apply_light_phase(ensemble, exposure, kick=noise.line_phase_kick)
            light_on = False
        elif step.kind == StepKind.WAIT:
            ensemble = evolve_free(ensemble, base + light if light_on else base, step.duration)
        else:
            energies = base + light if light_on else base
            offsets = tones if tones is not None and step.pulse.channel in ADDRESSING_CHANNELS else None
            ensemble = apply_pulse(ensemble, step.pulse, energies, noise, steps, rabi_scale, offsets)

    if closing is None:
        return ensemble, None

    zero_phase = replace(closing.pulse, phase=0.0)
    columns = []
    for level in (Level.F3_M0, Level.F4_M0):
        driven = apply_pulse(AtomEnsemble.prepared(batch.size, level), zero_phase, base, None, steps, rabi_scale)
        columns.append(driven.amplitudes[:, :2])
    return ensemble, np.stack(columns, axis=-1)

def _close(ensemble: AtomEnsemble, unitary: np.ndarray, alpha: float) -> AtomEnsemble:
    # a pulse at axis phase φ is diag(1, e^{iφ})·U₀·diag(1, e^{-iφ})
    phase = np.exp(1j * (math.pi - alpha))
    a0 = ensemble.amplitudes[:, 0]
    a1 = ensemble.amplitudes[:, 1]
    amplitudes = ensemble.amplitudes.copy()
    amplitudes[:, 0] = unitary[:, 0, 0] * a0 + unitary[:, 0, 1] * a1 / phase
    amplitudes[:, 1] = unitary[:, 1, 0] * a0 * phase + unitary[:, 1, 1] * a1
    return AtomEnsemble(amplitudes, ensemble.vib_level, ensemble.lost)

@dataclass
class RunResult:
    """
    Outcome of a program over many experiments.

    Rows are (occupied site, experiment) pairs. ``probabilities`` and ``outcomes`` have
    one row per closing phase α (a single row for programs without a closing pulse).
    """
    program: GateProgram
    sites: np.ndarray
    experiment: np.ndarray
    classes: np.ndarray
    ensemble: AtomEnsemble
    alphas: Optional[np.ndarray]
    probabilities: np.ndarray
    outcomes: np.ndarray
    n_experiments: int
    closing_unitary: Optional[np.ndarray] = None

    @property
    def duration(self) -> float:
        return self.program.duration

    def mask(self, atom_class: AtomClass) -> np.ndarray:
        return self.classes == AtomClass(atom_class).value

    def class_counts(self) -> Dict[AtomClass, int]:
        return {c: int(np.sum(self.mask(c))) for c in AtomClass if np.any(self.mask(c))}

    def class_probabilities(self, sample: bool = True) -> Dict[AtomClass, np.ndarray]:
        """Mean detected F=3 probability per class and closing phase."""
        values = self.outcomes if sample else self.probabilities
        return {c: values[:, self.mask(c)].mean(axis=1) for c in self.class_counts()}

    def final_ensemble(self, alpha_index: int = 0) -> AtomEnsemble:
        if self.closing_unitary is None or self.alphas is None:
            return self.ensemble.copy()
        return _close(self.ensemble, self.closing_unitary, float(self.alphas[alpha_index]))

@dataclass
class FrequencyScanResult:
    detunings_hz: np.ndarray
    ratios: Dict[AtomClass, np.ndarray]
    atoms: Dict[AtomClass, np.ndarray]
    expected_centers_hz: Dict[AtomClass, float]
    peaks: Dict[AtomClass, PeakFit] = field(default_factory=dict)
    single_beam_shift_hz: float = 0.0

@dataclass
class ContrastCurve:
    times: np.ndarray
    contrast: np.ndarray
    contrast_core: np.ndarray
    contrast_outer: np.ndarray
    amplitude: np.ndarray
    offset: np.ndarray
    echo: bool = True
    fit: Optional[ExponentialFit] = None

class SequencerAgent:
    def __init__(self, config: Optional[RunConfig] = None):
        """
        Initialize the SequencerAgent.

        Args:
            config: Run configuration (defaults if None)
        """
        self.logger = logging.getLogger(__name__)
        self.config = config or RunConfig()

    def closing_phases(self, alphas: Optional[Sequence[float]] = None) -> np.ndarray:
        """Closing-pulse phases: ``alphas`` as given, or analysis.n_alpha equally spaced over 2π."""
        if alphas is None:
            return np.linspace(0.0, 2.0 * math.pi, self.config.analysis.n_alpha, endpoint=False)
        return np.asarray(alphas, dtype=float)

    def _run(self, program: GateProgram, keys: Sequence[Tuple[int, ...]], seed: Optional[int],
             noise: NoiseParams, alphas: Optional[np.ndarray] = None, steps: Optional[int] = None,
             candidates: Optional[Sequence[Sequence[int]]] = None, force_occupied: bool = False,
             initial: Level = Level.F3_M0, tones: Optional[np.ndarray] = None,
             displacements: Optional[np.ndarray] = None,
             labels: Optional[Mapping[SiteIndex, AtomClass]] = None) -> RunResult:
        lattice = self.config.lattice
        steps = steps or self.config.sequence.steps_per_pulse
        validate_step_order(program.steps)

        if program.closing is not None:
            alphas = np.asarray(alphas if alphas is not None else [0.0], dtype=float)
        else:
            alphas = None
        n_alpha = 1 if alphas is None else alphas.size
        readout = Readout.STORAGE if program.closing is not None else Readout.TRANSFER
        n_point = sum(1 for step in program.steps if step.kind == StepKind.POINT_BEAMS)

        if labels is None:
            labels = classify_sites(program.targets, program.target_beams, lattice)
        class_grid = np.full(lattice.dims, "", dtype=CLASS_DTYPE)
        for site, atom_class in labels.items():
            class_grid[site] = AtomClass(atom_class).value

        candidate_array = None if candidates is None else np.asarray(candidates, dtype=int).reshape(-1, 3)
        per_experiment = len(candidate_array) if candidate_array is not None else lattice.n_sites * max(
            lattice.occupancy_fill, 0.05)
        chunk = max(1, int(_CHUNK_ROWS // max(per_experiment, 1)))

        parts = []
        for start in range(0, len(keys), chunk):
            chunk_keys = keys[start:start + chunk]
            batch = _draw_batch(lattice, noise, seed, chunk_keys, program.duration, n_point, n_alpha,
                                candidate_array, force_occupied)
            rows = batch.experiment + start
            ensemble, unitary = _execute(
                program, batch, lattice, noise, steps, initial,
                tones=None if tones is None else np.asarray(tones)[rows],
                displacements=None if displacements is None else np.asarray(displacements)[rows],
            )
            if unitary is None:
                probabilities = np.atleast_2d(measure_f3(ensemble, noise, program.duration, readout=readout))
            else:
                probabilities = np.stack([measure_f3(_close(ensemble, unitary, a), noise, program.duration,
                                                     readout=readout)
                                          for a in alphas]).reshape(n_alpha, batch.size)
            parts.append((batch.sites, rows, ensemble, unitary, probabilities, batch.uniforms < probabilities))
            self.logger.debug(f"{program.name}: experiments {start}-{start + len(chunk_keys)} ({batch.size} atoms)")

        sites = np.concatenate([p[0] for p in parts]).reshape(-1, 3)
        ensemble = AtomEnsemble(
            np.concatenate([p[2].amplitudes for p in parts]).reshape(-1, 5),
            np.concatenate([p[2].vib_level for p in parts]).astype(int),
            np.concatenate([p[2].lost for p in parts]).astype(bool),
        )
        unitary = None if alphas is None else np.concatenate([p[3] for p in parts]).reshape(-1, 2, 2)
        classes = class_grid[sites[:, 0], sites[:, 1], sites[:, 2]] if len(sites) else np.empty(0, dtype=CLASS_DTYPE)
        return RunResult(
            program=program,
            sites=sites,
            experiment=np.concatenate([p[1] for p in parts]).astype(int),
            classes=classes,
            ensemble=ensemble,
            alphas=alphas,
            probabilities=np.concatenate([p[4] for p in parts], axis=1),
            outcomes=np.concatenate([p[5] for p in parts], axis=1),
            n_experiments=len(keys),
            closing_unitary=unitary,
        )

    def run_program(self, program: GateProgram, shots: Optional[int] = None, seed: Optional[int] = None,
                    noise: Optional[NoiseParams] = None, alphas: Optional[Sequence[float]] = None,
                    sites: Optional[Sequence[Sequence[int]]] = None, force_occupied: bool = False) -> RunResult:
        """
        Execute a program against every occupied site for a number of experiments.

        Args:
            program: Compiled program
            shots: Experiments to run (config default if None)
            seed: Seed (config seed if None); fixed seeds give identical results
            noise: Noise parameters (config noise if None)
            alphas: Closing-pulse phases; each experiment is read out at every α
            sites: Restrict simulation to these sites
            force_occupied: Treat every site in ``sites`` as occupied

        Returns:
            RunResult

        Raises:
            SequenceError: If the step order is invalid
        """
        shots = shots or self.config.shots
        seed = self.config.seed if seed is None else seed
        noise = noise or self.config.noise
        try:
            self.logger.info(f"Running {program.name} for {shots} shots "
                             f"({program.duration * 1e3:.3f} ms per sequence)")
            return self._run(program, [(s,) for s in range(shots)], seed, noise,
                             None if alphas is None else np.asarray(alphas, dtype=float),
                             candidates=sites, force_occupied=force_occupied)
        except AddressingError:
            raise
        except Exception as e:
            self.logger.error(f"Error running {program.name}: {str(e)}")
            raise SequenceError(f"Failed to run {program.name}: {str(e)}")

    def calibrate_compensation(self, targets: Sequence[Sequence[int]], gate: Union[Gate, GateKind, str],
                               noise: Optional[NoiseParams] = None) -> Tuple[float, ...]:
        """
        Find the ω₂ phase offset per target that nulls the residual dummy-block phase.

        The noise-free program (deterministic kicks kept) runs on the targets alone at
        equally spaced offsets. A target's overlap with its expected state is a
        trigonometric polynomial of degree two in the offset, so the samples determine it
        exactly; its maximum is then located numerically.

        Args:
            targets: Target sites
            gate: Gate to calibrate
            noise: Noise whose deterministic kicks are kept (config noise if None)

        Returns:
            One phase offset per target in [0, 2π)
        """
        gate = Gate.of(gate)
        deterministic = NoiseParams.deterministic(noise or self.config.noise)
        n_points = self.config.sequence.calibration_points
        offsets = 2.0 * math.pi * np.arange(n_points) / n_points
        expected = expected_bloch_vector(gate.axis_phase, gate.angle, echo=True)
        checked = [self.config.lattice.check_site(t) for t in targets]

        samples = np.zeros((len(checked), n_points))
        for k, offset in enumerate(offsets):
            program = compile_gate_program(checked, gate, self.config, [offset] * len(checked))
            n_point = sum(1 for step in program.steps if step.kind == StepKind.POINT_BEAMS)
            batch = _draw_batch(self.config.lattice, deterministic, 0, [(0,)], program.duration, n_point, 1,
                                np.asarray(checked, dtype=int), True)
            ensemble, _ = _execute(program, batch, self.config.lattice, deterministic,
                                   self.config.sequence.steps_per_pulse)
            samples[:, k] = state_overlap(ensemble.amplitudes, expected)

        harmonics = np.fft.rfft(samples, axis=1) / n_points
        grid = np.linspace(0.0, 2.0 * math.pi, 4096, endpoint=False)

        def overlap(index: int, c: np.ndarray) -> np.ndarray:
            c = np.atleast_1d(c)
            total = np.full(c.shape, harmonics[index, 0].real)
            for m in (1, 2):
                total += 2.0 * np.real(harmonics[index, m] * np.exp(1j * m * c))
            return total

        result = []
        for index, target in enumerate(checked):
            start = float(grid[np.argmax(overlap(index, grid))])
            step = grid[1]
            refined = minimize_scalar(lambda c: -float(overlap(index, c)[0]),
                                      bounds=(start - step, start + step), method="bounded",
                                      options={"xatol": 1e-10})
            best = math.fmod(float(refined.x) + 2.0 * math.pi, 2.0 * math.pi)
            peak = float(overlap(index, best)[0])
            if peak < 0.99:
                self.logger.warning(f"Compensation for target {target} reaches overlap {peak:.4f} only")
            self.logger.info(f"Gate {gate.label} target {target}: compensation {best:.4f} rad, overlap {peak:.6f}")
            result.append(best)
        return tuple(result)

    def compile_calibrated(self, targets: Sequence[Sequence[int]], gate: Union[Gate, GateKind, str],
                           calibrate: Optional[bool] = None) -> GateProgram:
        """Compile a gate program, calibrating the compensation phases unless disabled."""
        calibrate = self.config.sequence.calibrate if calibrate is None else calibrate
        compensation = self.calibrate_compensation(targets, gate) if calibrate else None
        return compile_gate_program(targets, gate, self.config, compensation)

    def fringe_scan(self, program: GateProgram, alphas: Optional[Sequence[float]] = None,
                    shots: Optional[int] = None, seed: Optional[int] = None,
                    noise: Optional[NoiseParams] = None, sample: bool = True):
        """
        P₀ per class versus the closing phase α.

        Args:
            program: Program ending in the closing π/2 pulse
            alphas: Closing phases (analysis.n_alpha equally spaced if None)
            shots: Experiments per phase
            seed: Seed
            noise: Noise parameters
            sample: Count detections (True) or average detection probabilities

        Returns:
            Dict[AtomClass, FringeData]
        """
        if program.closing is None:
            raise SequenceError(f"{program.name} does not end in the closing π/2 pulse")
        alphas = self.closing_phases(alphas)
        result = self.run_program(program, shots, seed, noise, alphas)
        means = result.class_probabilities(sample)
        counts = result.class_counts()
        return {c: FringeData(alphas, means[c], np.full(alphas.size, counts[c]), c) for c in means}

    def frequency_scan(self, detunings_hz: Sequence[float], targets: Sequence[Sequence[int]],
                       shots: Optional[int] = None, seed: Optional[int] = None,
                       noise: Optional[NoiseParams] = None, fit_peaks: bool = True) -> FrequencyScanResult:
        """
        Transfer ratio |4,0⟩ → |3,−1⟩ per class versus tone detuning.

        Experiment s points the beams at target s mod len(targets); classes are relative
        to that pointing.

        Args:
            detunings_hz: Tone offsets from the unshifted resonance in Hz
            targets: Pointings to cycle through
            shots: Experiments per detuning
            seed: Seed
            noise: Noise parameters
            fit_peaks: Fit a Gaussian to the Target, Line and Spectator peaks

        Returns:
            FrequencyScanResult
        """
        detunings = np.asarray(detunings_hz, dtype=float)
        if detunings.size == 0:
            raise SequenceError("Frequency scan needs at least one detuning")
        if not targets:
            raise SequenceError("Frequency scan needs at least one beam pointing")
        lattice = self.config.lattice
        shots = shots or self.config.shots
        seed = self.config.seed if seed is None else seed
        noise = noise or self.config.noise
        checked = [lattice.check_site(t) for t in targets]

        hits = {c: np.zeros(detunings.size) for c in AtomClass}
        atoms = {c: np.zeros(detunings.size) for c in AtomClass}
        shift_sums = {c: 0.0 for c in AtomClass}
        shift_counts = {c: 0 for c in AtomClass}
        all_sites = lattice.sites()
        positions = lattice.positions(all_sites)

        self.logger.info(f"Frequency scan: {detunings.size} detunings × {shots} shots over {len(checked)} pointing(s)")
        for index, target in enumerate(checked):
            beams = beams_for_target(target, lattice, self.config.beams)
            labels = classify_sites([target], [beams], lattice)
            down = transition_shifts_at(beams, positions, lattice)[Transition.DOWN_FROM_40] / (2.0 * math.pi)
            for site, shift in zip(all_sites, down):
                shift_sums[labels[site]] += float(shift)
                shift_counts[labels[site]] += 1

            keys = [(s, d) for s in range(index, shots, len(checked)) for d in range(detunings.size)]
            if not keys:
                continue
            tones = 2.0 * math.pi * detunings[[k[1] for k in keys]]
            program = compile_transfer_program(beams, 0.0, self.config, pointing=target)
            result = self._run(program, keys, seed, noise, steps=self.config.sequence.scan_steps_per_pulse,
                               initial=Level.F4_M0, tones=tones, labels=labels)
            detuning_index = np.array([k[1] for k in keys], dtype=int)[result.experiment]
            detected = result.outcomes[0].astype(float)
            for atom_class in AtomClass:
                mask = result.mask(atom_class)
                np.add.at(hits[atom_class], detuning_index[mask], detected[mask])
                np.add.at(atoms[atom_class], detuning_index[mask], 1.0)

        present = [c for c in AtomClass if atoms[c].sum() > 0]
        ratios = {c: np.divide(hits[c], atoms[c], out=np.zeros_like(hits[c]), where=atoms[c] > 0) for c in present}
        expected = {c: shift_sums[c] / shift_counts[c] for c in present if shift_counts[c]}
        single_shift = self.config.beams.peak_shift_hz * self.config.beams.coefficients.down_from_40
        scan = FrequencyScanResult(detunings, ratios, {c: atoms[c] for c in present}, expected,
                                   single_beam_shift_hz=single_shift)

        if fit_peaks:
            half_window = 0.5 * abs(single_shift) if single_shift else float(np.ptp(detunings)) / 2.0
            for atom_class in (AtomClass.TARGET, AtomClass.LINE, AtomClass.SPECTATOR):
                if atom_class not in ratios:
                    continue
                center = expected[atom_class]
                try:
                    scan.peaks[atom_class] = fit_gaussian_peak(
                        detunings, ratios[atom_class], window=(center - half_window, center + half_window))
                except FitError as e:
                    self.logger.warning(f"No {atom_class.label} peak fitted: {str(e)}")
        return scan

    def echo_contrast_curve(self, times: Sequence[float], shots: Optional[int] = None,
                            seed: Optional[int] = None, noise: Optional[NoiseParams] = None,
                            echo: bool = True, alphas: Optional[Sequence[float]] = None,
                            sample: bool = True, fit: bool = True) -> ContrastCurve:
        """
        Fringe contrast of the spin-echo (or Ramsey) sequence versus total free-evolution time.

        Contrast is the first-harmonic amplitude over the mean of the atom-averaged
        fringe; core and outer contrasts split atoms by the central 3×3×3 region.

        Raises:
            SequenceError: If any time is not positive
        """
        times = np.asarray(times, dtype=float)
        if times.size == 0 or np.any(times <= 0):
            raise SequenceError("Echo times must be positive")
        alphas = self.closing_phases(alphas)
        shots = shots or self.config.shots
        seed = self.config.seed if seed is None else seed
        noise = noise or self.config.noise
        lattice = self.config.lattice
        middle = (np.array(lattice.dims) - 1) / 2.0

        columns: Dict[str, List[float]] = {k: [] for k in ("all", "core", "outer", "amplitude", "offset")}
        for index, duration in enumerate(times):
            program = compile_echo_program(float(duration), self.config, echo)
            result = self._run(program, [(index, s) for s in range(shots)], seed, noise, alphas)
            values = result.outcomes if sample else result.probabilities
            core = np.all(np.abs(result.sites - middle) <= 1.0, axis=1)
            overall = fit_sinusoid(alphas, values.mean(axis=1))
            columns["all"].append(overall.contrast)
            columns["amplitude"].append(overall.amplitude)
            columns["offset"].append(overall.offset)
            for name, mask in (("core", core), ("outer", ~core)):
                columns[name].append(fit_sinusoid(alphas, values[:, mask].mean(axis=1)).contrast
                                     if np.any(mask) else 0.0)
            self.logger.info(f"{program.name} T={duration:g} s: contrast {overall.contrast:.4f}")

        curve = ContrastCurve(times, np.array(columns["all"]), np.array(columns["core"]),
                              np.array(columns["outer"]), np.array(columns["amplitude"]),
                              np.array(columns["offset"]), echo)
        if fit and echo and times.size >= 3:
            try:
                curve.fit = fit_exponential_contrast(times, curve.contrast)
            except FitError as e:
                self.logger.warning(f"Contrast decay not fitted: {str(e)}")
        return curve

    def alignment_tone(self, beam: BeamSpec, margin: Optional[float] = None) -> float:
        """Tone offset (rad/s) just above the largest single-beam |4,0⟩ → |3,−1⟩ shift on the beam line."""
        margin = self.config.stabilization.alignment_tone_margin if margin is None else margin
        lattice = self.config.lattice
        nominal = beam.displaced((0.0, 0.0))
        line = [s for s in lattice.sites() if on_beam_line(nominal, s)]
        shifts = transition_shifts_at([nominal], lattice.positions(line), lattice)[Transition.DOWN_FROM_40]
        return float(np.max(shifts)) * (1.0 + margin)

    def single_beam_transfer(self, beam: BeamSpec, displacements: Sequence[Sequence[float]],
                             shots: Optional[int] = None, seed: Optional[int] = None,
                             noise: Optional[NoiseParams] = None, tone: Optional[float] = None,
                             sample: bool = True, force_occupied: bool = False) -> np.ndarray:
        """
        Fraction of beam-line atoms transferred to F=3 for each commanded beam displacement.

        Args:
            beam: Beam as actually mounted (its offset is the misalignment)
            displacements: Commanded transverse displacements, shape (M, 2) in μm
            shots: Experiments per displacement
            seed: Seed
            noise: Noise parameters
            tone: Tone offset in rad/s (``alignment_tone`` if None)
            sample: Count detections or average probabilities
            force_occupied: Fill every line site

        Returns:
            Array of shape (M,)
        """
        displacements = np.atleast_2d(np.asarray(displacements, dtype=float))
        lattice = self.config.lattice
        shots = shots or self.config.shots
        seed = self.config.seed if seed is None else seed
        noise = noise or self.config.noise
        tone = self.alignment_tone(beam) if tone is None else tone
        line = [s for s in lattice.sites() if on_beam_line(beam, s)]

        program = compile_transfer_program((beam,), tone, self.config)
        keys = [(m, s) for m in range(len(displacements)) for s in range(shots)]
        moved = displacements[[k[0] for k in keys]]
        result = self._run(program, keys, seed, noise, steps=self.config.sequence.scan_steps_per_pulse,
                           candidates=line, force_occupied=force_occupied, initial=Level.F4_M0,
                           displacements=moved)
        values = (result.outcomes[0] if sample else result.probabilities[0]).astype(float)
        point = np.array([k[0] for k in keys], dtype=int)[result.experiment]
        totals = np.bincount(point, weights=values, minlength=len(displacements))
        counts = np.bincount(point, minlength=len(displacements))
        return np.divide(totals, counts, out=np.zeros(len(displacements)), where=counts > 0)
