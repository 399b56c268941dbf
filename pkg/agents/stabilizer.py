import csv
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import least_squares

from agents.sequencer import SequencerAgent
from utils.atomsim import NoiseParams
from utils.config import RunConfig
from utils.control import BrewsterActuator, DriftState, PidGains, PidState, pid_step
from utils.error_handling import AddressingError, StabilizationError
from utils.geometry import BeamSpec
from utils.imaging import PositionEstimate, PsfParams, estimate_position, isolated_atoms, synthesize_image_stack
from utils.random_streams import child_seed

@dataclass
class FeedbackLog:
    iteration: np.ndarray
    true: np.ndarray
    estimate: np.ndarray
    command: np.ndarray
    residual: np.ndarray
    saturated: np.ndarray

    @property
    def rms_residual(self) -> np.ndarray:
        return np.sqrt(np.mean(self.residual ** 2, axis=0))

    @property
    def max_abs_residual(self) -> np.ndarray:
        return np.max(np.abs(self.residual), axis=0)

    def write_csv(self, path: str) -> str:
        axes = ("x", "y", "z")
        header = ["iteration"] + [f"{name}_{a}" for name in ("true", "est", "cmd", "res") for a in axes]
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            for n in range(len(self.iteration)):
                values = np.concatenate([self.true[n], self.estimate[n], self.command[n], self.residual[n]])
                writer.writerow([int(self.iteration[n])] + [f"{v:.10g}" for v in values])
        return path

@dataclass
class AlignmentScan:
    axis: int
    displacements: np.ndarray
    signal: np.ndarray
    peak_um: float

@dataclass
class AlignmentResult:
    """``misalignment_um`` is the estimated transverse beam offset from its line."""
    misalignment_um: np.ndarray
    scans: List[AlignmentScan] = field(default_factory=list)

class StabilizerAgent:
    def __init__(self, config: Optional[RunConfig] = None, sequencer: Optional[SequencerAgent] = None):
        """
        Initialize the StabilizerAgent.

        Args:
            config: Run configuration (defaults if None)
            sequencer: Sequencer used for alignment scans (built from ``config`` if None)
        """
        self.logger = logging.getLogger(__name__)
        self.config = config or RunConfig()
        self.sequencer = sequencer or SequencerAgent(self.config)
        self._references: Dict[Tuple, CubicSpline] = {}

    def psf_params(self) -> PsfParams:
        stab = self.config.stabilization
        return PsfParams(stab.psf_sigma_um, stab.pixel_um, stab.image_size_px, stab.defocus_plane_um,
                         stab.photons_per_atom, stab.background_per_pixel)

    def load_disturbance_csv(self, path: str, iterations: Optional[int] = None) -> np.ndarray:
        """
        Load a disturbance profile with columns iteration, dx, dy, dz (μm per iteration).

        Returns:
            Array of shape (iterations, 3); iterations absent from the file get zero disturbance
        """
        if not os.path.exists(path):
            raise StabilizationError(f"Disturbance file not found: {path}")
        rows = []
        try:
            with open(path, newline="") as f:
                for row in csv.DictReader(f):
                    rows.append((int(row["iteration"]), float(row["dx"]), float(row["dy"]), float(row["dz"])))
        except (KeyError, ValueError) as e:
            self.logger.error(f"Error reading disturbance profile {path}: {str(e)}")
            raise StabilizationError(f"Invalid disturbance profile {path}: {str(e)}")
        size = iterations if iterations is not None else (max(r[0] for r in rows) + 1 if rows else 0)
        profile = np.zeros((size, 3))
        for iteration, dx, dy, dz in rows:
            if iteration < 0:
                raise StabilizationError(f"Negative iteration {iteration} in {path}")
            if iteration < size:
                profile[iteration] = (dx, dy, dz)
        self.logger.info(f"Loaded {len(rows)} disturbance rows from {path}")
        return profile

    def _measure(self, position: np.ndarray, rng: np.random.Generator, mode: str) -> PositionEstimate:
        stab = self.config.stabilization
        if mode == "image":
            occupancy = self.config.lattice.sample_occupancy(rng)
            stack = synthesize_image_stack(position, isolated_atoms(occupancy), self.psf_params(), rng)
            return estimate_position(stack, stab.strain_gauge_floor_um)
        sigma = np.array(stab.measurement_sigma_um)
        sigma[2] = float(np.hypot(sigma[2], stab.strain_gauge_floor_um))
        measured = position + sigma * rng.standard_normal(3)
        return PositionEstimate(*measured, *sigma)

    def run_feedback_loop(self, iterations: Optional[int] = None, seed: Optional[int] = None,
                          disturbance: Optional[np.ndarray] = None, measurement: Optional[str] = None,
                          initial_offset: Optional[Sequence[float]] = None) -> FeedbackLog:
        """
        Closed-loop lattice stabilization: measure, correct, then let the lattice drift.

        Args:
            iterations: Control iterations (config default if None)
            seed: Seed (config seed if None)
            disturbance: Extra per-iteration displacement, shape (iterations, 3)
            measurement: "direct" (Gaussian position noise) or "image" (synthetic stacks)
            initial_offset: Lattice offset at the start in μm

        Returns:
            FeedbackLog with one row per iteration
        """
        stab = self.config.stabilization
        iterations = iterations or stab.iterations
        mode = measurement or stab.measurement
        seed = self.config.seed if seed is None else seed
        rng = np.random.default_rng(child_seed(seed, 1))
        if disturbance is not None and len(disturbance) < iterations:
            raise StabilizationError(f"Disturbance profile covers {len(disturbance)} of {iterations} iterations")

        drift = DriftState(np.zeros(3) if initial_offset is None else initial_offset,
                           stab.drift_rate_um_per_hour, stab.random_walk_um)
        actuator = BrewsterActuator(max_tilt_mrad=stab.max_tilt_mrad)
        pid = PidState(PidGains(stab.kp, stab.ki, stab.kd, stab.tau_s, stab.integrator_limit_um))
        columns = {k: np.zeros((iterations, 3)) for k in ("true", "estimate", "command", "residual")}
        saturated = np.zeros(iterations, dtype=bool)

        self.logger.info(f"Running {iterations} feedback iterations (dt={stab.dt_s} s, {mode} measurement)")
        try:
            for n in range(iterations):
                position = drift.offset + actuator.translation_um
                estimate = self._measure(position, rng, mode)
                pid, command = pid_step(pid, estimate, stab.dt_s)
                actuator, saturated[n] = actuator.step(command)
                if saturated[n] and not saturated[:n].any():
                    self.logger.warning(f"Brewster actuator saturated at iteration {n} "
                                        f"(tilt {actuator.tilt_mrad} mrad)")
                columns["true"][n] = position
                columns["estimate"][n] = estimate.vector
                columns["command"][n] = command
                columns["residual"][n] = drift.offset + actuator.translation_um
                drift = drift.advance(stab.dt_s, rng, None if disturbance is None else disturbance[n])
        except AddressingError:
            raise
        except Exception as e:
            self.logger.error(f"Error in feedback loop: {str(e)}")
            raise StabilizationError(f"Feedback loop failed: {str(e)}")

        log = FeedbackLog(np.arange(iterations), columns["true"], columns["estimate"], columns["command"],
                          columns["residual"], saturated)
        self.logger.info(f"Feedback residual RMS (μm): {np.round(log.rms_residual, 4).tolist()}")
        return log

    def _reference(self, beam: BeamSpec, axis: int, half_range: float, tone: float) -> CubicSpline:
        """Noise-free transfer versus displacement for an aligned beam, as a spline."""
        key = (beam.axis, beam.line, axis, round(half_range, 9), round(tone, 3))
        if key not in self._references:
            grid = np.linspace(-3.0 * half_range, 3.0 * half_range, 301)
            displacements = np.zeros((grid.size, 2))
            displacements[:, axis] = grid
            response = self.sequencer.single_beam_transfer(
                beam.displaced((0.0, 0.0)), displacements, shots=1, seed=0, noise=NoiseParams.noiseless(),
                tone=tone, sample=False, force_occupied=True)
            self._references[key] = CubicSpline(grid, response)
        return self._references[key]

    def _fit_peak(self, displacements: np.ndarray, signal: np.ndarray, reference: CubicSpline) -> float:
        low, high = float(displacements.min()), float(displacements.max())
        template_range = float(np.ptp(reference(reference.x)))
        if template_range <= 0:
            raise StabilizationError("Single-beam transfer does not depend on the beam position")
        amplitude0 = max(float(np.ptp(signal)), 1e-6) / template_range
        start = [float(displacements[np.argmax(signal)]), amplitude0, float(signal.min())]

        def residual(params: np.ndarray) -> np.ndarray:
            return params[1] * reference(displacements - params[0]) + params[2] - signal

        start[0] = min(max(start[0], low + 1e-6), high - 1e-6)
        result = least_squares(residual, start, bounds=([low, 0.0, -1.0], [high, np.inf, 1.0]),
                               xtol=1e-12, ftol=1e-12)
        peak = float(result.x[0])
        tolerance = 1e-3 * (high - low)
        if not result.success or peak <= low + tolerance or peak >= high - tolerance:
            raise StabilizationError(f"Transfer peak at {peak:.3f} μm is outside the scan [{low:.3f}, {high:.3f}] μm")
        return peak

    def alignment_scan(self, beam: BeamSpec, scan_positions: Optional[Sequence[float]] = None,
                       tone: Optional[float] = None, shots: Optional[int] = None, seed: Optional[int] = None,
                       noise: Optional[NoiseParams] = None, sample: bool = True,
                       iterations: Optional[int] = None, force_occupied: bool = False) -> AlignmentResult:
        """
        Find a beam's transverse misalignment from single-beam transfer scans.

        Each transverse axis is scanned in turn around the current best displacement; the
        transferred fraction peaks when the beam sits on its line. The peak is located by
        fitting the noise-free response with free amplitude and offset.

        Args:
            beam: Beam as mounted; ``beam.offset_um`` is the (unknown) misalignment
            scan_positions: Displacements scanned around the current estimate in μm
            tone: Microwave tone offset in rad/s (just above the maximal single-beam shift if None)
            shots: Experiments per scan point
            seed: Seed
            noise: Noise parameters
            sample: Count detections or average probabilities
            iterations: Passes over both axes
            force_occupied: Fill every line site

        Returns:
            AlignmentResult

        Raises:
            StabilizationError: If a fitted peak lies at the edge of or outside the scan
        """
        stab = self.config.stabilization
        offsets = (np.linspace(-stab.alignment_half_range_um, stab.alignment_half_range_um, stab.alignment_points)
                   if scan_positions is None else np.asarray(scan_positions, dtype=float))
        if offsets.size < 5:
            raise StabilizationError(f"Alignment scan needs at least 5 positions, got {offsets.size}")
        half_range = float(np.max(np.abs(offsets)))
        tone = self.sequencer.alignment_tone(beam) if tone is None else tone
        shots = shots or stab.alignment_shots
        seed = self.config.seed if seed is None else seed
        iterations = iterations or stab.alignment_iterations

        current = np.zeros(2)
        scans: List[AlignmentScan] = []
        for iteration in range(iterations):
            for axis in (0, 1):
                displacements = np.tile(current, (offsets.size, 1))
                displacements[:, axis] = current[axis] + offsets
                signal = self.sequencer.single_beam_transfer(
                    beam, displacements, shots, int(child_seed(seed, iteration, axis).generate_state(1)[0]),
                    noise, tone, sample, force_occupied)
                peak = self._fit_peak(displacements[:, axis], signal, self._reference(beam, axis, half_range, tone))
                current[axis] = peak
                scans.append(AlignmentScan(axis, displacements[:, axis].copy(), signal, peak))
                self.logger.debug(f"Beam {beam.axis.value}{beam.line} axis {axis} pass {iteration}: peak {peak:.4f} μm")

        result = AlignmentResult(-current, scans)
        self.logger.info(f"Beam {beam.axis.value} on line {beam.line}: misalignment estimate "
                         f"{np.round(result.misalignment_um, 4).tolist()} μm")
        return result
