import csv
import logging
import math
from dataclasses import dataclass, fields, replace
from enum import Enum, IntEnum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from utils.error_handling import AddressingError, IntegrationError, MeasurementError, PulseError
from utils.geometry import Transition, level_energies
from utils.random_streams import SeedLike, make_rng
from utils.validation import check_positive, check_probability, check_range

logger = logging.getLogger(__name__)

class Level(IntEnum):
    F3_M0 = 0
    F4_M0 = 1
    F3_M1 = 2
    F4_M1 = 3
    F3_MM1 = 4

    @property
    def label(self) -> str:
        return ("|3,0>", "|4,0>", "|3,1>", "|4,1>", "|3,-1>")[self.value]

N_LEVELS = len(Level)
STORAGE_BASIS = (Level.F3_M0, Level.F4_M0)
COMPUTATIONAL_BASIS = (Level.F3_M1, Level.F4_M1)
F3_LEVELS = (Level.F3_M0, Level.F3_M1, Level.F3_MM1)
F4_LEVELS = (Level.F4_M0, Level.F4_M1)

_F4_MASK = np.array([level in F4_LEVELS for level in Level])
_F3_MASK = ~_F4_MASK

class Channel(str, Enum):
    OMEGA0 = "omega0"
    OMEGA1 = "omega1"
    OMEGA2 = "omega2"
    OMEGA1_MINUS = "omega1_minus"
    DUMMY = "dummy"

# (lower, upper) level pairs driven by each channel
CHANNEL_COUPLINGS: Dict[Channel, Tuple[Tuple[Level, Level], ...]] = {
    Channel.OMEGA0: ((Level.F3_M0, Level.F4_M0),),
    Channel.OMEGA1: ((Level.F3_M1, Level.F4_M0), (Level.F3_M0, Level.F4_M1)),
    Channel.OMEGA2: ((Level.F3_M1, Level.F4_M1),),
    Channel.OMEGA1_MINUS: ((Level.F3_MM1, Level.F4_M0),),
    Channel.DUMMY: ((Level.F3_M1, Level.F4_M0), (Level.F3_M0, Level.F4_M1)),
}

# Channels whose tones are set against a Stark-shifted resonance
ADDRESSING_CHANNELS = frozenset({Channel.OMEGA1, Channel.OMEGA2, Channel.OMEGA1_MINUS, Channel.DUMMY})

# Shifted transition each channel is tuned to
CHANNEL_TRANSITION: Dict[Channel, Transition] = {
    Channel.OMEGA0: Transition.STORAGE,
    Channel.OMEGA1: Transition.UP_FROM_40,
    Channel.OMEGA2: Transition.COMPUTATIONAL,
    Channel.OMEGA1_MINUS: Transition.DOWN_FROM_40,
    Channel.DUMMY: Transition.UP_FROM_40,
}

def coerce_channel(channel: Union[str, Channel]) -> Channel:
    try:
        return Channel(channel)
    except ValueError:
        raise PulseError(f"Unknown microwave channel '{channel}'")

class Readout(str, Enum):
    """
    What an F=3 detection reads out.

    STORAGE follows a coherent sequence on the clock qubit and carries the leakage
    floor (imperfect clearing plus lattice-light scattering). TRANSFER follows a
    single |4,0⟩ transfer pulse and carries only the clearing background.
    """
    STORAGE = "storage"
    TRANSFER = "transfer"

class Envelope(str, Enum):
    BLACKMAN = "blackman"
    SQUARE = "square"

    @property
    def area_fraction(self) -> float:
        """Pulse area of a unit-peak envelope divided by its duration."""
        return 0.42 if self == Envelope.BLACKMAN else 1.0

def blackman_envelope(t: Union[float, np.ndarray], T: float) -> Union[float, np.ndarray]:
    """
    Blackman window 0.42 − 0.5·cos(2πt/T) + 0.08·cos(4πt/T).

    Args:
        t: Time(s) within the pulse in seconds
        T: Pulse duration in seconds

    Returns:
        Envelope amplitude in [0, 1]

    Raises:
        PulseError: If T <= 0 or any t lies outside [0, T]
    """
    if not T > 0:
        raise PulseError(f"Pulse duration must be positive, got {T}")
    times = np.asarray(t, dtype=float)
    tolerance = 1e-12 * T
    if np.any(times < -tolerance) or np.any(times > T + tolerance):
        raise PulseError(f"Envelope time outside [0, {T}]")
    x = 2.0 * math.pi * times / T
    value = np.clip(0.42 - 0.5 * np.cos(x) + 0.08 * np.cos(2.0 * x), 0.0, 1.0)
    return float(value) if np.ndim(value) == 0 else value

def envelope_shape(envelope: Envelope, t: np.ndarray, T: float) -> np.ndarray:
    if envelope == Envelope.BLACKMAN:
        return np.asarray(blackman_envelope(t, T))
    return np.ones_like(np.asarray(t, dtype=float))

def calibrate_pi_pulse(channel: Union[str, Channel], duration: float,
                       envelope: Envelope = Envelope.BLACKMAN, rotation: float = math.pi) -> float:
    """
    Peak Rabi frequency giving a pulse of area ``rotation`` (π by default).

    Every channel shares the same calibration; the ω₁ pair rates are equalized.

    Args:
        channel: Microwave channel
        duration: Pulse duration in seconds
        envelope: Pulse envelope
        rotation: Target pulse area in radians

    Returns:
        rabi_peak in rad/s
    """
    coerce_channel(channel)
    if not duration > 0:
        raise PulseError(f"Pulse duration must be positive, got {duration}")
    return rotation / (Envelope(envelope).area_fraction * duration)

@dataclass(frozen=True)
class PulseSpec:
    channel: Channel
    rabi_peak: float
    duration: float
    phase: float = 0.0
    detuning_offset: float = 0.0
    envelope: Envelope = Envelope.BLACKMAN

    def __post_init__(self):
        object.__setattr__(self, "channel", coerce_channel(self.channel))
        try:
            object.__setattr__(self, "envelope", Envelope(self.envelope))
        except ValueError:
            raise PulseError(f"Unknown pulse envelope '{self.envelope}'")
        if not (math.isfinite(self.duration) and self.duration > 0):
            raise PulseError(f"Pulse duration must be positive and finite, got {self.duration}")
        if not (math.isfinite(self.rabi_peak) and self.rabi_peak >= 0):
            raise PulseError(f"Rabi frequency must be non-negative and finite, got {self.rabi_peak}")
        if not (math.isfinite(self.phase) and math.isfinite(self.detuning_offset)):
            raise PulseError("Pulse phase and detuning offset must be finite")

    @property
    def area(self) -> float:
        return self.rabi_peak * self.duration * self.envelope.area_fraction

    def to_dict(self) -> Dict[str, object]:
        return {
            "channel": self.channel.value,
            "rabi_peak": self.rabi_peak,
            "duration": self.duration,
            "phase": self.phase,
            "detuning_offset": self.detuning_offset,
            "envelope": self.envelope.value,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, object]) -> "PulseSpec":
        return cls(**data)  # type: ignore[arg-type]

@dataclass(frozen=True)
class NoiseParams:
    """
    Noise and imperfection channels of the simulated apparatus.

    Detunings are per atom and static for the duration of one shot; the core sigma
    applies inside the central 3×3×3 sites, the shot sigma elsewhere.
    """
    t1_s: float = 7.4
    vib_shift_per_level_hz: float = 130.0
    p_excited_vib: float = 0.30
    shot_detuning_sigma_hz: float = 20.0
    core_detuning_sigma_hz: float = 8.0
    line_phase_kick: float = 0.35 * math.pi
    zeeman_phase_kick: float = 0.1 * math.pi
    loss_transfer: float = 0.03
    loss_collision_tau_s: float = 10.0
    cycle_time_s: float = 0.73
    leakage_f3: float = 0.02
    background_f3: float = 0.017
    pointing_jitter_um: float = 0.07
    rabi_amplitude_sigma: float = 0.01
    resonance_window: float = 3.0

    def __post_init__(self):
        check_positive("noise.t1_s", self.t1_s)
        check_range("noise.vib_shift_per_level_hz", self.vib_shift_per_level_hz)
        check_range("noise.p_excited_vib", self.p_excited_vib, 0.0, 1.0, high_inclusive=False)
        check_range("noise.shot_detuning_sigma_hz", self.shot_detuning_sigma_hz, low=0.0)
        check_range("noise.core_detuning_sigma_hz", self.core_detuning_sigma_hz, low=0.0)
        check_range("noise.line_phase_kick", self.line_phase_kick)
        check_range("noise.zeeman_phase_kick", self.zeeman_phase_kick)
        check_probability("noise.loss_transfer", self.loss_transfer)
        check_positive("noise.loss_collision_tau_s", self.loss_collision_tau_s)
        check_range("noise.cycle_time_s", self.cycle_time_s, low=0.0)
        check_probability("noise.leakage_f3", self.leakage_f3)
        check_probability("noise.background_f3", self.background_f3)
        check_range("noise.pointing_jitter_um", self.pointing_jitter_um, low=0.0)
        check_range("noise.rabi_amplitude_sigma", self.rabi_amplitude_sigma, low=0.0)
        check_positive("noise.resonance_window", self.resonance_window)

    @classmethod
    def deterministic(cls, base: Optional["NoiseParams"] = None) -> "NoiseParams":
        """Stochastic channels off, deterministic phase kicks kept."""
        base = base or cls()
        return replace(
            base,
            t1_s=math.inf,
            p_excited_vib=0.0,
            shot_detuning_sigma_hz=0.0,
            core_detuning_sigma_hz=0.0,
            loss_transfer=0.0,
            loss_collision_tau_s=math.inf,
            leakage_f3=0.0,
            background_f3=0.0,
            pointing_jitter_um=0.0,
            rabi_amplitude_sigma=0.0,
        )

    @classmethod
    def noiseless(cls) -> "NoiseParams":
        return replace(cls.deterministic(), line_phase_kick=0.0, zeeman_phase_kick=0.0)

    def loss_probability(self, sequence_duration: float) -> float:
        """Transfer loss plus background collisions over one experimental cycle."""
        survive = (1.0 - self.loss_transfer) * math.exp(
            -(self.cycle_time_s + sequence_duration) / self.loss_collision_tau_s
        )
        return 1.0 - survive

    def f3_floor(self, readout: Readout = Readout.STORAGE) -> float:
        """Share of F=4 population that is detected as F=3."""
        return self.leakage_f3 if Readout(readout) == Readout.STORAGE else self.background_f3

    def contrast_factor(self, elapsed: float) -> float:
        """Spontaneous-emission contrast multiplier exp(−T/T1)."""
        return math.exp(-elapsed / self.t1_s)

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in fields(cls)]

@dataclass
class AtomState:
    amplitudes: np.ndarray
    vib_level: int = 0
    occupied: bool = True
    lost: bool = False

    def __post_init__(self):
        amplitudes = np.asarray(self.amplitudes, dtype=complex).reshape(-1)
        if amplitudes.shape != (N_LEVELS,):
            raise AddressingError(f"An atom state has {N_LEVELS} amplitudes, got {amplitudes.size}")
        if not self.occupied and np.any(amplitudes != 0):
            raise AddressingError("Unoccupied sites carry zero amplitudes")
        self.amplitudes = amplitudes

    @classmethod
    def in_level(cls, level: Level, vib_level: int = 0) -> "AtomState":
        amplitudes = np.zeros(N_LEVELS, dtype=complex)
        amplitudes[level] = 1.0
        return cls(amplitudes, vib_level=vib_level)

    @classmethod
    def storage(cls, c0: complex, c1: complex) -> "AtomState":
        """Normalized c0|3,0⟩ + c1|4,0⟩."""
        norm = math.sqrt(abs(c0) ** 2 + abs(c1) ** 2)
        amplitudes = np.zeros(N_LEVELS, dtype=complex)
        amplitudes[Level.F3_M0] = c0 / norm
        amplitudes[Level.F4_M0] = c1 / norm
        return cls(amplitudes)

    @classmethod
    def empty(cls) -> "AtomState":
        return cls(np.zeros(N_LEVELS, dtype=complex), occupied=False)

    def populations(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    def norm(self) -> float:
        return float(self.populations().sum())

@dataclass
class AtomEnsemble:
    """Many independent atoms, one row of amplitudes per (site, shot)."""
    amplitudes: np.ndarray
    vib_level: np.ndarray
    lost: np.ndarray

    @classmethod
    def prepared(cls, n_atoms: int, initial: Union[Level, np.ndarray] = Level.F3_M0) -> "AtomEnsemble":
        amplitudes = np.zeros((n_atoms, N_LEVELS), dtype=complex)
        if isinstance(initial, (Level, int)):
            amplitudes[:, int(initial)] = 1.0
        else:
            amplitudes[:] = np.asarray(initial, dtype=complex)
        return cls(amplitudes, np.zeros(n_atoms, dtype=int), np.zeros(n_atoms, dtype=bool))

    @classmethod
    def from_states(cls, states: Sequence[AtomState]) -> "AtomEnsemble":
        if any(not s.occupied for s in states):
            raise AddressingError("Ensembles hold occupied sites only")
        return cls(
            np.array([s.amplitudes for s in states], dtype=complex).reshape(-1, N_LEVELS),
            np.array([s.vib_level for s in states], dtype=int),
            np.array([s.lost for s in states], dtype=bool),
        )

    def to_states(self) -> List[AtomState]:
        return [AtomState(a.copy(), int(v), True, bool(l))
                for a, v, l in zip(self.amplitudes, self.vib_level, self.lost)]

    @property
    def size(self) -> int:
        return self.amplitudes.shape[0]

    def populations(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    def copy(self) -> "AtomEnsemble":
        return AtomEnsemble(self.amplitudes.copy(), self.vib_level.copy(), self.lost.copy())

    def with_amplitudes(self, amplitudes: np.ndarray) -> "AtomEnsemble":
        return AtomEnsemble(amplitudes, self.vib_level, self.lost)

StateLike = Union[AtomState, AtomEnsemble]
ShiftsLike = Union[None, np.ndarray, Mapping[Transition, float]]

def _unpack(target: StateLike) -> Tuple[np.ndarray, bool]:
    if isinstance(target, AtomState):
        if not target.occupied or target.lost:
            raise AddressingError("Cannot evolve an unoccupied or lost atom")
        return target.amplitudes[None, :].copy(), True
    return target.amplitudes.copy(), False

def _pack(target: StateLike, amplitudes: np.ndarray, single: bool) -> StateLike:
    if single:
        assert isinstance(target, AtomState)
        return replace(target, amplitudes=amplitudes[0])
    assert isinstance(target, AtomEnsemble)
    return target.with_amplitudes(amplitudes)

def _energies(local_shifts: ShiftsLike, n_atoms: int) -> np.ndarray:
    if local_shifts is None:
        return np.zeros((n_atoms, N_LEVELS))
    if isinstance(local_shifts, Mapping):
        full = {t: float(local_shifts.get(t, 0.0)) for t in Transition}
        return np.broadcast_to(level_energies(full), (n_atoms, N_LEVELS)).astype(float)
    energies = np.asarray(local_shifts, dtype=float)
    return np.broadcast_to(energies, (n_atoms, N_LEVELS)).astype(float)

_GL_OFFSET = math.sqrt(3.0) / 6.0

def _propagate(amplitudes: np.ndarray, energies: np.ndarray, pulse: PulseSpec, steps: int,
               rabi_scale: Optional[np.ndarray], offsets: Optional[np.ndarray]) -> np.ndarray:
    """Fourth-order Magnus integration of every coupled pair, closed form per 2×2 block."""
    n_atoms = amplitudes.shape[0]
    T = pulse.duration
    h = T / steps
    offset = np.full(n_atoms, pulse.detuning_offset) if offsets is None else np.asarray(offsets, dtype=float)

    # pulse frame: F=4 levels rotate with the microwave tone
    frame = energies.copy()
    frame[:, _F4_MASK] -= offset[:, None]

    starts = h * np.arange(steps)
    env1 = envelope_shape(pulse.envelope, starts + h * (0.5 - _GL_OFFSET), T)
    env2 = envelope_shape(pulse.envelope, starts + h * (0.5 + _GL_OFFSET), T)
    peak = pulse.rabi_peak * (np.ones(n_atoms) if rabi_scale is None else np.asarray(rabi_scale, dtype=float))
    cos_phi, sin_phi = math.cos(pulse.phase), math.sin(pulse.phase)
    k_comm = _GL_OFFSET * h * h

    out = amplitudes.astype(complex, copy=True)
    coupled = set()
    for lower, upper in CHANNEL_COUPLINGS[pulse.channel]:
        coupled.update((lower, upper))
        hz = 0.5 * (frame[:, lower] - frame[:, upper])
        center = 0.5 * (frame[:, lower] + frame[:, upper])
        vz = h * hz
        a_l = out[:, lower].copy()
        a_u = out[:, upper].copy()
        for s in range(steps):
            w1 = 0.5 * peak * env1[s]
            w2 = 0.5 * peak * env2[s]
            transverse = 0.5 * h * (w1 + w2)
            commutator = k_comm * (w2 - w1) * hz
            vx = transverse * cos_phi + commutator * sin_phi
            vy = transverse * sin_phi - commutator * cos_phi
            angle = np.sqrt(vx * vx + vy * vy + vz * vz)
            cos_v = np.cos(angle)
            sinc = np.sinc(angle / math.pi)
            m_ll = cos_v - 1j * sinc * vz
            m_uu = cos_v + 1j * sinc * vz
            m_lu = -1j * sinc * (vx - 1j * vy)
            m_ul = -1j * sinc * (vx + 1j * vy)
            a_l, a_u = m_ll * a_l + m_lu * a_u, m_ul * a_l + m_uu * a_u
        global_phase = np.exp(-1j * center * T)
        out[:, lower] = a_l * global_phase
        out[:, upper] = a_u * global_phase

    for level in Level:
        if level not in coupled:
            out[:, level] *= np.exp(-1j * frame[:, level] * T)

    # back to the frame of the unshifted hyperfine splitting
    out[:, _F4_MASK] *= np.exp(-1j * offset * T)[:, None]

    if not np.all(np.isfinite(out)):
        raise IntegrationError(f"Non-finite amplitudes after {pulse.channel.value} pulse with {steps} steps")
    return out

def pulse_detunings(pulse: PulseSpec, energies: np.ndarray,
                    offsets: Optional[np.ndarray] = None) -> np.ndarray:
    """Pulse-frame detuning of every coupled pair, shape (N, n_pairs)."""
    energies = np.atleast_2d(energies)
    offset = pulse.detuning_offset if offsets is None else np.asarray(offsets, dtype=float)
    return np.stack([energies[:, u] - energies[:, l] - offset
                     for l, u in CHANNEL_COUPLINGS[pulse.channel]], axis=-1)

def apply_pulse(state: StateLike, pulse: PulseSpec, local_shifts: ShiftsLike = None,
                noise: Optional[NoiseParams] = None, steps: int = 200,
                rabi_scale: Optional[np.ndarray] = None,
                detuning_offsets: Optional[np.ndarray] = None) -> StateLike:
    """
    Evolve atoms through one microwave pulse in the rotating frame.

    Args:
        state: An AtomState or an AtomEnsemble
        pulse: Pulse to apply
        local_shifts: Transition shifts of one site, or level energies of shape (5,) or (N, 5)
        noise: Source of the off-resonant ac-Zeeman kick (no kick if None)
        steps: Integration steps
        rabi_scale: Optional per-atom multiplier on the Rabi frequency
        detuning_offsets: Optional per-atom tone offsets replacing ``pulse.detuning_offset``

    Returns:
        A new state of the same type

    Raises:
        PulseError: For an unknown channel or non-positive step count
        IntegrationError: If integration produced non-finite amplitudes
    """
    if steps < 1:
        raise PulseError(f"Integration needs at least one step, got {steps}")
    coerce_channel(pulse.channel)
    amplitudes, single = _unpack(state)
    energies = _energies(local_shifts, amplitudes.shape[0])
    out = _propagate(amplitudes, energies, pulse, steps, rabi_scale, detuning_offsets)

    if (noise is not None and noise.zeeman_phase_kick != 0.0
            and pulse.channel in ADDRESSING_CHANNELS and pulse.rabi_peak > 0):
        detunings = pulse_detunings(pulse, energies, detuning_offsets)
        off_resonant = np.all(np.abs(detunings) > noise.resonance_window * pulse.rabi_peak, axis=1)
        kick = noise.zeeman_phase_kick * (pulse.area / math.pi) ** 2
        out[off_resonant, Level.F4_M0] *= np.exp(-1j * kick)

    return _pack(state, out, single)

def evolve_free(state: StateLike, local_shifts: ShiftsLike, duration: float) -> StateLike:
    """Free evolution under static level energies for ``duration`` seconds."""
    if duration < 0:
        raise PulseError(f"Negative free-evolution time {duration}")
    amplitudes, single = _unpack(state)
    energies = _energies(local_shifts, amplitudes.shape[0])
    return _pack(state, amplitudes * np.exp(-1j * energies * duration), single)

def apply_light_phase(state: StateLike, exposure: Union[float, Sequence[float], np.ndarray],
                      noise: Optional[NoiseParams] = None, kick: Optional[float] = None) -> StateLike:
    """
    Imprint the addressing-light phase on the storage qubit.

    Args:
        state: An AtomState or AtomEnsemble
        exposure: Summed relative beam intensity, per atom for an ensemble or a list of
            per-beam intensities for a single atom
        noise: Supplies ``line_phase_kick`` when ``kick`` is None
        kick: Phase per unit intensity in radians

    Returns:
        A new state with |4,0⟩ rotated by −kick·exposure
    """
    if kick is None:
        kick = (noise or NoiseParams()).line_phase_kick
    amplitudes, single = _unpack(state)
    total = np.asarray(exposure, dtype=float)
    if single:
        total = np.atleast_1d(total.sum())
    amplitudes[:, Level.F4_M0] *= np.exp(-1j * kick * total)
    return _pack(state, amplitudes, single)

@dataclass
class NoiseRealization:
    """One draw of every per-atom stochastic quantity for a shot."""
    vib_level: np.ndarray
    detuning: np.ndarray
    lost: np.ndarray
    rabi_scale: np.ndarray

    def level_offsets(self) -> np.ndarray:
        """Energy offsets (N, 5) in rad/s: the detuning shifts the F=4 levels."""
        offsets = np.zeros((len(self.detuning), N_LEVELS))
        offsets[:, _F4_MASK] = self.detuning[:, None]
        return offsets

    def apply(self, ensemble: AtomEnsemble) -> AtomEnsemble:
        return AtomEnsemble(ensemble.amplitudes, self.vib_level.copy(), self.lost.copy())

def sample_noise(atoms: Union[int, StateLike], noise: NoiseParams, seed: SeedLike,
                 sequence_duration: float = 0.0, core_mask: Optional[np.ndarray] = None) -> NoiseRealization:
    """
    Draw vibrational levels, static detunings, loss flags and Rabi scale per atom.

    Args:
        atoms: Atom count, or the state/ensemble to draw for
        noise: Noise parameters
        seed: Seed or Generator
        sequence_duration: Sequence time added to the cycle time for collision loss
        core_mask: Per-atom flag selecting the core detuning sigma

    Returns:
        NoiseRealization
    """
    if isinstance(atoms, AtomEnsemble):
        n_atoms = atoms.size
    elif isinstance(atoms, AtomState):
        n_atoms = 1
    else:
        n_atoms = int(atoms)
    rng = make_rng(seed)

    vib_level = rng.geometric(1.0 - noise.p_excited_vib, n_atoms) - 1
    sigma = np.full(n_atoms, noise.shot_detuning_sigma_hz)
    if core_mask is not None:
        sigma = np.where(np.asarray(core_mask, dtype=bool), noise.core_detuning_sigma_hz, sigma)
    detuning_hz = noise.vib_shift_per_level_hz * vib_level + sigma * rng.standard_normal(n_atoms)
    lost = rng.random(n_atoms) < noise.loss_probability(sequence_duration)
    rabi_scale = 1.0 + noise.rabi_amplitude_sigma * rng.standard_normal(n_atoms)

    return NoiseRealization(vib_level.astype(int), 2.0 * math.pi * detuning_hz, lost, rabi_scale)

def measure_f3(state: StateLike, noise: Optional[NoiseParams] = None, elapsed: float = 0.0,
               repetitions: Optional[int] = None, seed: SeedLike = None,
               readout: Readout = Readout.STORAGE) -> Union[float, np.ndarray]:
    """
    Probability that an atom is detected in F = 3.

    A share f of the F=4 population reads as F=3, with f = leakage_f3 for storage
    readouts and background_f3 for transfer readouts, so a surviving atom reads
    f + (1 − f)·P(F=3).

    Args:
        state: An AtomState or AtomEnsemble
        noise: Detection imperfections and T1 (ideal detection if None)
        elapsed: Time since the first coherent pulse, for the T1 contrast factor
        repetitions: If given, return binomially sampled frequencies over this many repetitions
        seed: Seed or Generator for sampling
        readout: Which detection floor applies

    Returns:
        Float for one atom, array for an ensemble

    Raises:
        MeasurementError: If sampling is requested with a non-positive repetition count
    """
    noise = noise or NoiseParams.noiseless()
    if repetitions is not None and repetitions <= 0:
        raise MeasurementError(f"Sampling needs a positive repetition count, got {repetitions}")
    if isinstance(state, AtomState):
        if not state.occupied or state.lost:
            return 0.0
        populations = state.populations()[None, :]
        lost = np.array([False])
    else:
        populations = state.populations()
        lost = state.lost

    p3 = populations[:, _F3_MASK].sum(axis=1)
    total = populations.sum(axis=1)
    contrast = noise.contrast_factor(elapsed)
    p3 = contrast * p3 + (1.0 - contrast) * total / 2.0
    detected = p3 + noise.f3_floor(readout) * (total - p3)
    detected = np.where(lost, 0.0, np.clip(detected, 0.0, 1.0))

    if repetitions is not None:
        detected = make_rng(seed).binomial(repetitions, detected) / repetitions

    return float(detected[0]) if isinstance(state, AtomState) else detected

def write_trajectories_csv(path: str, sites: Sequence[Sequence[int]], shots: Sequence[int],
                           ensemble: AtomEnsemble) -> str:
    """Dump final level populations, one row per (site, shot)."""
    populations = ensemble.populations()
    order = sorted(range(ensemble.size), key=lambda n: (int(shots[n]), tuple(sites[n])))
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["i", "j", "k", "shot", "p30", "p40", "p31", "p41", "p3m1", "lost"])
        for n in order:
            i, j, k = sites[n]
            writer.writerow([i, j, k, int(shots[n])] + [f"{p:.10g}" for p in populations[n]]
                            + [int(ensemble.lost[n])])
    logger.info(f"Wrote {ensemble.size} trajectories to {path}")
    return path
