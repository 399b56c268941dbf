import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import jsonschema
import numpy as np

from agents.analyst import AnalysisAgent, FidelityReport
from agents.sequencer import Gate, GateKind, GateProgram, SequencerAgent, reference_program
from agents.stabilizer import StabilizerAgent
from utils.atomsim import NoiseParams, write_trajectories_csv
from utils.config import RunConfig, config_to_dict
from utils.error_handling import AddressingError, RecipeError, StabilizationError
from utils.fidelity import expected_bloch_state, expected_bloch_vector, state_overlap
from utils.fitting import FringeData, fit_sinusoid
from utils.geometry import (
    TABLE_ORDER,
    AtomClass,
    beam_intensity,
    beams_for_target,
    stark_shift_map,
    write_shift_map_csv,
)
from utils.random_streams import child_seed

SUMMARY_SCHEMA_VERSION = 1
SCHEMA_PATH = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "schemas",
                           "summary.schema.json")

# Two targets in each of two planes, one echo block per plane
PLANE_TARGETS = (((1, 1, 1), (3, 3, 1)), ((1, 3, 3), (3, 1, 3)))
SCAN_TARGETS = tuple(t for plane in PLANE_TARGETS for t in plane)

ECHO_TIMES_S = (0.002, 0.005, 0.01, 0.02, 0.5, 1.0, 2.0, 4.0, 6.0, 8.0, 10.0)
RAMSEY_CHECK_TIME_S = 0.01

class RecipeId(str, Enum):
    FIG2_SPECTRUM = "fig2_spectrum"
    FIG3_ECHO = "fig3_echo"
    FIG4_GATE = "fig4_gate"
    TABLE1_FIDELITIES = "table1_fidelities"
    FEEDBACK_DEMO = "feedback_demo"
    ALIGNMENT_DEMO = "alignment_demo"
    CROSSTALK_REPORT = "crosstalk_report"
    TRAJECTORIES = "trajectories"

@dataclass
class Check:
    name: str
    passed: bool
    value: Optional[float]
    threshold: str

    def to_dict(self) -> Dict[str, Any]:
        value = None if self.value is None or not math.isfinite(self.value) else float(self.value)
        return {"name": self.name, "passed": bool(self.passed), "value": value, "threshold": self.threshold}

@dataclass
class Table:
    filename: str
    header: List[str]
    rows: List[List[Any]]

@dataclass
class RecipeResult:
    recipe: RecipeId
    label: str
    results: Dict[str, Any] = field(default_factory=dict)
    checks: List[Check] = field(default_factory=list)
    tables: List[Table] = field(default_factory=list)
    text: str = ""
    files: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

def _plain(value: Any) -> Any:
    """Convert numpy values and non-finite floats into JSON-ready values."""
    if isinstance(value, Mapping):
        return {str(k.value if isinstance(k, Enum) else k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, np.ndarray)):
        return [_plain(v) for v in value]
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer, int)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        return float(value) if math.isfinite(value) else str(float(value))
    return value

def _format(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.10g}"
    if isinstance(value, Enum):
        return value.value
    return str(value)

def _wrap_phase(value: float) -> float:
    return math.remainder(value, 2.0 * math.pi)

def merge_fringes(parts: Sequence[Mapping[AtomClass, FringeData]]) -> Dict[AtomClass, FringeData]:
    """Count-weighted average of class fringes taken at the same phases."""
    merged: Dict[AtomClass, FringeData] = {}
    for atom_class in AtomClass:
        present = [p[atom_class] for p in parts if atom_class in p]
        if not present:
            continue
        counts = np.sum([d.counts for d in present], axis=0)
        p0 = np.sum([d.p0 * d.counts for d in present], axis=0) / counts
        merged[atom_class] = FringeData(present[0].alpha, p0, counts, atom_class)
    return merged

class RecipeAgent:
    def __init__(self, config: Optional[RunConfig] = None):
        """
        Initialize the RecipeAgent.

        Args:
            config: Run configuration shared by every stage (defaults if None)
        """
        self.logger = logging.getLogger(__name__)
        self.config = config or RunConfig()
        self.sequencer = SequencerAgent(self.config)
        self.analyst = AnalysisAgent(self.config)
        self.stabilizer = StabilizerAgent(self.config, self.sequencer)

    def run_recipe(self, recipe: Union[RecipeId, str], gate: Optional[Union[GateKind, str]] = None,
                   targets: Optional[Sequence[Sequence[int]]] = None,
                   disturbance_path: Optional[str] = None) -> RecipeResult:
        """
        Run one recipe and write its data files, summary and report.

        Args:
            recipe: Recipe to run
            gate: Gate for fig4_gate and trajectories (I if None)
            targets: Targets for trajectories (the first plane pair if None)
            disturbance_path: Disturbance CSV for feedback_demo

        Returns:
            RecipeResult with the written file paths

        Raises:
            RecipeError: On recipe/config mismatch, unwritable output or unexpected failure
        """
        try:
            recipe = RecipeId(recipe)
        except ValueError:
            raise RecipeError(f"Unknown recipe '{recipe}'")
        self.logger.info(f"Running recipe {recipe.value} (seed {self.config.seed}, {self.config.shots} shots)")
        try:
            if recipe == RecipeId.FIG2_SPECTRUM:
                result = self.fig2_spectrum()
            elif recipe == RecipeId.FIG3_ECHO:
                result = self.fig3_echo()
            elif recipe == RecipeId.FIG4_GATE:
                result = self.fig4_gate(gate or GateKind.I)
            elif recipe == RecipeId.TABLE1_FIDELITIES:
                result = self.table1_fidelities()
            elif recipe == RecipeId.FEEDBACK_DEMO:
                result = self.feedback_demo(disturbance_path)
            elif recipe == RecipeId.ALIGNMENT_DEMO:
                result = self.alignment_demo()
            elif recipe == RecipeId.CROSSTALK_REPORT:
                result = self.crosstalk_report()
            else:
                result = self.trajectories(gate or GateKind.I, targets)
        except AddressingError:
            raise
        except Exception as e:
            self.logger.error(f"Error running recipe {recipe.value}: {str(e)}")
            raise RecipeError(f"Recipe {recipe.value} failed: {str(e)}")

        self.emit_plotdata(result)
        for check in result.checks:
            level = logging.INFO if check.passed else logging.WARNING
            self.logger.log(level, f"{'PASS' if check.passed else 'FAIL'} {check.name}: {check.value} ({check.threshold})")
        return result

    def _output_dir(self, label: str) -> str:
        path = os.path.join(self.config.output_dir, label)
        try:
            os.makedirs(path, exist_ok=True)
        except OSError as e:
            raise RecipeError(f"Cannot create output directory {path}: {str(e)}")
        if not os.access(path, os.W_OK):
            raise RecipeError(f"Output directory {path} is not writable")
        return path

    def summary(self, result: RecipeResult) -> Dict[str, Any]:
        summary = {
            "schema_version": SUMMARY_SCHEMA_VERSION,
            "recipe": result.label,
            "seed": int(self.config.seed),
            "results": _plain(result.results),
            "checks": [c.to_dict() for c in result.checks],
            "passed": result.passed,
        }
        with open(SCHEMA_PATH) as f:
            schema = json.load(f)
        try:
            jsonschema.validate(summary, schema)
        except jsonschema.ValidationError as e:
            self.logger.error(f"Summary for {result.label} violates its schema: {e.message}")
            raise RecipeError(f"Invalid summary for {result.label}: {e.message}")
        return summary

    def emit_plotdata(self, result: RecipeResult, output_dir: Optional[str] = None) -> List[str]:
        """
        Write the recipe's CSV panels, summary.json and report.txt.

        Returns:
            Paths of the written files
        """
        directory = output_dir or self._output_dir(result.label)
        files = []
        try:
            for table in result.tables:
                path = os.path.join(directory, table.filename)
                with open(path, "w", newline="") as f:
                    writer = csv.writer(f, lineterminator="\n")
                    writer.writerow(table.header)
                    for row in table.rows:
                        writer.writerow([_format(v) for v in row])
                files.append(path)

            summary_path = os.path.join(directory, "summary.json")
            with open(summary_path, "w") as f:
                json.dump(self.summary(result), f, indent=2, sort_keys=True)
                f.write("\n")
            files.append(summary_path)

            report_path = os.path.join(directory, "report.txt")
            with open(report_path, "w") as f:
                f.write(f"{result.label}: {'PASSED' if result.passed else 'FAILED'}\n")
                for check in result.checks:
                    value = "n/a" if check.value is None else f"{check.value:.6g}"
                    f.write(f"{'PASS' if check.passed else 'FAIL'}  {check.name} = {value}  ({check.threshold})\n")
                if result.text:
                    f.write("\n" + result.text)
            files.append(report_path)
        except OSError as e:
            self.logger.error(f"Error writing outputs to {directory}: {str(e)}")
            raise RecipeError(f"Cannot write outputs to {directory}: {str(e)}")

        result.files.extend(files)
        self.logger.info(f"Wrote {len(files)} files to {directory}")
        return files

    def fig2_spectrum(self) -> RecipeResult:
        delta = self.config.beams.peak_shift_hz
        if not delta > 0:
            raise RecipeError("fig2_spectrum needs addressing beams with a positive peak shift")
        detunings = np.linspace(-0.3 * delta, 2.3 * delta, 61)
        scan = self.sequencer.frequency_scan(detunings, SCAN_TARGETS)

        result = RecipeResult(RecipeId.FIG2_SPECTRUM, RecipeId.FIG2_SPECTRUM.value)
        for atom_class in (AtomClass.SPECTATOR, AtomClass.LINE, AtomClass.TARGET):
            expected = scan.expected_centers_hz.get(atom_class, math.nan)
            peak = scan.peaks.get(atom_class)
            center = peak.center if peak is not None else math.nan
            error = abs(center - expected) / delta
            result.results[f"{atom_class.value}_center_hz"] = center
            result.results[f"{atom_class.value}_expected_hz"] = expected
            result.checks.append(Check(f"{atom_class.value}_peak_center", bool(error <= 0.02), error,
                                       "|center - expected| / delta <= 0.02"))

        spectator = scan.ratios[AtomClass.SPECTATOR]
        far = (detunings >= 0.4 * delta) & (detunings <= 0.6 * delta)
        background = float(np.mean(spectator[far]))
        result.results["background_ratio"] = background
        result.results["delta_hz"] = delta
        result.checks.append(Check("far_detuned_background", bool(abs(background - 0.017) <= 0.005),
                                   background, "0.017 +/- 0.005"))

        rows = []
        for n, detuning in enumerate(detunings):
            for atom_class in TABLE_ORDER:
                if atom_class in scan.ratios:
                    rows.append([detuning, atom_class.value, scan.ratios[atom_class][n], int(scan.atoms[atom_class][n])])
        result.tables.append(Table("fig2_spectrum.csv", ["detuning_hz", "class", "ratio", "atoms"], rows))
        return result

    def fig3_echo(self) -> RecipeResult:
        echo = self.sequencer.echo_contrast_curve(ECHO_TIMES_S, echo=True)
        ramsey = self.sequencer.echo_contrast_curve(ECHO_TIMES_S, echo=False, fit=False)
        result = RecipeResult(RecipeId.FIG3_ECHO, RecipeId.FIG3_ECHO.value)

        t1 = self.config.noise.t1_s
        tau = echo.fit.tau if echo.fit is not None else math.nan
        result.results.update({"tau_s": tau, "tau_error_s": echo.fit.tau_error if echo.fit else math.nan,
                               "t1_s": t1})
        relative = abs(tau - t1) / t1 if math.isfinite(t1) else math.nan
        result.checks.append(Check("echo_time_constant", bool(relative <= 0.05), relative, "|tau - T1| / T1 <= 0.05"))

        index = int(np.argmin(np.abs(np.asarray(ECHO_TIMES_S) - RAMSEY_CHECK_TIME_S)))
        core, overall = float(ramsey.contrast_core[index]), float(ramsey.contrast[index])
        result.results.update({"ramsey_core_contrast_10ms": core, "ramsey_overall_contrast_10ms": overall})
        result.checks.append(Check("core_outlives_overall", bool(core > overall), core - overall,
                                   "Ramsey core contrast > overall contrast at T = 10 ms"))

        rows = [[t, echo.contrast[n], echo.contrast_core[n], echo.contrast_outer[n],
                 ramsey.contrast_core[n], ramsey.contrast[n]] for n, t in enumerate(echo.times)]
        result.tables.append(Table("fig3_echo.csv", ["t_s", "contrast", "contrast_core", "contrast_outer",
                                                     "ramsey_core", "ramsey_overall"], rows))
        return result

    def _gate_programs(self, gate: Gate) -> List[GateProgram]:
        return [self.sequencer.compile_calibrated(plane, gate) for plane in PLANE_TARGETS]

    def _gate_fringes(self, programs: Sequence[GateProgram], alphas: np.ndarray,
                      noise: Optional[NoiseParams] = None) -> Dict[AtomClass, FringeData]:
        return merge_fringes([self.sequencer.fringe_scan(p, alphas, noise=noise) for p in programs])

    def _echo_cancellation(self, programs: Sequence[GateProgram]) -> float:
        """Worst non-target state fidelity with deterministic kicks on and stochastic noise off."""
        noise = NoiseParams.deterministic(self.config.noise)
        expected = expected_bloch_vector(None, 0.0, echo=True)
        worst = 1.0
        for program in programs:
            run = self.sequencer.run_program(program, shots=1, noise=noise, sites=self.config.lattice.sites(),
                                             force_occupied=True)
            mask = run.classes != AtomClass.TARGET.value
            if np.any(mask):
                overlap = state_overlap(run.ensemble.amplitudes[mask], expected)
                worst = min(worst, float(np.sqrt(np.clip(overlap, 0.0, 1.0)).min()))
        return worst

    def fig4_gate(self, gate: Union[GateKind, str]) -> RecipeResult:
        gate = Gate.of(gate)
        label = f"{RecipeId.FIG4_GATE.value}_{gate.label}"
        alphas = self.sequencer.closing_phases()
        programs = self._gate_programs(gate)
        fringes = self._gate_fringes(programs, alphas)
        result = RecipeResult(RecipeId.FIG4_GATE, label)
        result.results["gate"] = gate.label
        result.results["compensation"] = [list(p.compensation) for p in programs]
        result.results["duration_s"] = programs[0].duration

        normalized = {c: self.analyst.normalize_fringe(d) for c, d in fringes.items()}
        if AtomClass.TARGET not in normalized or AtomClass.SPECTATOR not in normalized:
            raise RecipeError("Gate run produced no target or spectator atoms; raise the shot count")
        target = fit_sinusoid(alphas, normalized[AtomClass.TARGET].p0)
        spectator = fit_sinusoid(alphas, normalized[AtomClass.SPECTATOR].p0)
        theta_t, phi_t = expected_bloch_state(gate.axis_phase, gate.angle, echo=True)
        _, phi_n = expected_bloch_state(None, 0.0, echo=True)

        if abs(math.sin(theta_t)) < 1e-6:
            ratio = target.amplitude / max(spectator.amplitude, 1e-12)
            result.checks.append(Check("flat_fringe", bool(ratio <= 0.15), ratio,
                                       "target/spectator fringe amplitude <= 0.15"))
        else:
            shift = _wrap_phase(target.phase - spectator.phase)
            expected_shift = _wrap_phase(phi_t - phi_n)
            name = "pi_shifted_fringe" if abs(abs(expected_shift) - math.pi) < 1e-6 else (
                "half_pi_shifted_fringe" if abs(abs(expected_shift) - math.pi / 2) < 1e-6 else "fringe_shift")
            error = abs(_wrap_phase(shift - expected_shift))
            result.results["fringe_shift_rad"] = shift
            result.results["expected_shift_rad"] = expected_shift
            result.checks.append(Check(name, bool(error <= 0.35), error, "|shift - expected| <= 0.35 rad"))

        worst = self._echo_cancellation(programs)
        result.results["echo_cancellation_min_fidelity"] = worst
        result.checks.append(Check("echo_cancellation", bool(worst >= 0.999), worst,
                                   "non-target fidelity >= 0.999 with deterministic kicks only"))

        rows = []
        for n, alpha in enumerate(alphas):
            for atom_class in TABLE_ORDER:
                if atom_class in fringes:
                    rows.append([alpha, atom_class.value, fringes[atom_class].p0[n], normalized[atom_class].p0[n],
                                 int(fringes[atom_class].counts[n])])
        result.tables.append(Table(f"fig4_gate_{gate.label}.csv",
                                   ["alpha_rad", "class", "p0_raw", "p0_normalized", "atoms"], rows))
        return result

    def table1_fidelities(self) -> RecipeResult:
        alphas = self.sequencer.closing_phases()
        reports: List[FidelityReport] = []
        for kind in (GateKind.I, GateKind.II, GateKind.III):
            gate = Gate.of(kind)
            programs = self._gate_programs(gate)
            on = self._gate_fringes(programs, alphas)
            off = self._gate_fringes([reference_program(p) for p in programs], alphas)
            reports.append(self.analyst.gate_fidelity_report(on, gate, reference=off, seed=self.config.seed))

        result = RecipeResult(RecipeId.TABLE1_FIDELITIES, RecipeId.TABLE1_FIDELITIES.value)
        result.results["reports"] = [r.to_dict() for r in reports]
        bands = {"I": (0.90, 0.99), "II": (0.85, 0.99), "III": (0.85, 0.99)}
        target_f = {}
        rows = []
        for report in reports:
            label = report.gate.label
            if AtomClass.TARGET in report.classes:
                value = report[AtomClass.TARGET].fidelity
                target_f[label] = value
                low, high = bands[label]
                result.checks.append(Check(f"gate_{label}_target_fidelity", bool(low <= value <= high), value,
                                           f"{low} <= F <= {high}"))
            for atom_class in (AtomClass.LINE, AtomClass.NEAREST_NEIGHBOR):
                if atom_class in report.classes and report[atom_class].delta_fidelity is not None:
                    row = report[atom_class]
                    bound = 0.003 + 2.0 * row.delta_error
                    result.checks.append(Check(f"gate_{label}_{atom_class.value}_differential",
                                               bool(abs(row.delta_fidelity) <= bound), row.delta_fidelity,
                                               f"|dF| <= 0.003 + 2 sigma = {bound:.4g}"))
            for row in report.rows():
                rows.append([label, row.atom_class.value, row.fidelity, row.error,
                             math.nan if row.delta_fidelity is None else row.delta_fidelity,
                             math.nan if row.delta_error is None else row.delta_error])
        if "I" in target_f and "II" in target_f:
            result.checks.append(Check("gate_I_beats_gate_II", bool(target_f["I"] >= target_f["II"]),
                                       target_f["I"] - target_f["II"], "F_I >= F_II"))

        result.text = self.analyst.render_table(reports)
        result.tables.append(Table("table1_fidelities.csv",
                                   ["gate", "class", "fidelity", "error", "delta_fidelity", "delta_error"], rows))
        return result

    def feedback_demo(self, disturbance_path: Optional[str] = None) -> RecipeResult:
        stab = self.config.stabilization
        disturbance = None
        if disturbance_path:
            disturbance = self.stabilizer.load_disturbance_csv(disturbance_path, stab.iterations)
        log = self.stabilizer.run_feedback_loop(disturbance=disturbance)

        result = RecipeResult(RecipeId.FEEDBACK_DEMO, RecipeId.FEEDBACK_DEMO.value)
        rms = log.rms_residual
        result.results.update({"rms_residual_um": rms, "max_abs_residual_um": log.max_abs_residual,
                               "saturated_iterations": int(log.saturated.sum())})
        in_plane = float(max(rms[0], rms[1]))
        result.checks.append(Check("in_plane_rms", bool(in_plane <= 0.1), in_plane, "<= 0.1 um"))
        result.checks.append(Check("axial_rms", bool(rms[2] <= 0.23), float(rms[2]), "<= 0.23 um"))
        bounded = bool(np.all(np.isfinite(log.residual)) and not log.saturated.any())
        result.checks.append(Check("loop_bounded", bounded, float(np.max(log.max_abs_residual)),
                                   "finite residual, no actuator saturation"))

        rows = [[int(log.iteration[n]), *log.true[n], *log.estimate[n], *log.command[n], *log.residual[n]]
                for n in range(len(log.iteration))]
        header = ["iteration"] + [f"{name}_{a}" for name in ("true", "est", "cmd", "res") for a in "xyz"]
        result.tables.append(Table("feedback_demo.csv", header, rows))
        return result

    def alignment_demo(self) -> RecipeResult:
        stab = self.config.stabilization
        rng = np.random.default_rng(child_seed(self.config.seed, 2))
        beams = beams_for_target(SCAN_TARGETS[0], self.config.lattice, self.config.beams)
        rows = []
        errors = []
        for trial in range(stab.alignment_trials):
            for beam in beams:
                misalignment = stab.misalignment_sigma_um * rng.standard_normal(2)
                mounted = beam.displaced(tuple(misalignment))
                try:
                    fitted = self.stabilizer.alignment_scan(
                        mounted, seed=int(child_seed(self.config.seed, 3, trial).generate_state(1)[0])
                    ).misalignment_um
                except StabilizationError as e:
                    self.logger.warning(f"Alignment trial {trial} beam {beam.axis.value}: {str(e)}")
                    fitted = np.full(2, math.nan)
                error = fitted - misalignment
                errors.append(float(np.max(np.abs(error))) if np.all(np.isfinite(error)) else math.inf)
                for axis in (0, 1):
                    rows.append([trial, beam.axis.value, axis, misalignment[axis], fitted[axis], error[axis]])

        errors_array = np.array(errors)
        success = float(np.mean(errors_array <= 0.1))
        finite = errors_array[np.isfinite(errors_array)]
        result = RecipeResult(RecipeId.ALIGNMENT_DEMO, RecipeId.ALIGNMENT_DEMO.value)
        result.results.update({"success_fraction": success,
                               "median_error_um": float(np.median(finite)) if finite.size else math.nan,
                               "scans": len(errors)})
        result.checks.append(Check("alignment_precision", bool(success >= 0.95), success,
                                   "fraction of beams within 0.1 um >= 0.95"))
        result.tables.append(Table("alignment_demo.csv", ["trial", "beam", "axis", "true_center_um",
                                                          "fitted_center_um", "error_um"], rows))
        return result

    def crosstalk_report(self) -> RecipeResult:
        lattice = self.config.lattice
        middle = tuple(d // 2 for d in lattice.dims)
        beam_x, beam_y = beams_for_target(middle, lattice, self.config.beams)
        if lattice.dims[1] < 2 or lattice.dims[0] < 2:
            raise RecipeError("crosstalk_report needs at least two sites along x and y")
        adjacent = (middle[0], middle[1] + 1 if middle[1] + 1 < lattice.dims[1] else middle[1] - 1, middle[2])
        along = (middle[0] + 1 if middle[0] + 1 < lattice.dims[0] else middle[0] - 1, middle[1], middle[2])
        adjacent_ratio = beam_intensity(beam_x, adjacent, lattice)
        axial_ratio = beam_intensity(beam_x, along, lattice)

        result = RecipeResult(RecipeId.CROSSTALK_REPORT, RecipeId.CROSSTALK_REPORT.value)
        result.results.update({"adjacent_line_intensity": adjacent_ratio, "axial_falloff_one_site": axial_ratio,
                               "target": list(middle)})
        result.checks.append(Check("adjacent_line_intensity", bool(abs(adjacent_ratio - 1.376e-3) <= 1e-5),
                                   adjacent_ratio, "1.376e-3 +/- 1e-5"))
        result.checks.append(Check("axial_falloff", bool(abs(axial_ratio - 0.9657) <= 1e-4), axial_ratio,
                                   "0.9657 +/- 1e-4"))

        directory = self._output_dir(result.label)
        path = write_shift_map_csv(stark_shift_map([beam_x, beam_y], lattice),
                                   os.path.join(directory, "crosstalk_report.csv"))
        result.files.append(path)
        return result

    def trajectories(self, gate: Union[GateKind, str], targets: Optional[Sequence[Sequence[int]]] = None
                     ) -> RecipeResult:
        gate = Gate.of(gate)
        targets = targets or PLANE_TARGETS[0]
        program = self.sequencer.compile_calibrated(targets, gate)
        run = self.sequencer.run_program(program)
        final = run.final_ensemble(0)

        result = RecipeResult(RecipeId.TRAJECTORIES, RecipeId.TRAJECTORIES.value)
        norms = np.sum(final.populations(), axis=1)
        deviation = float(np.max(np.abs(norms - 1.0))) if norms.size else 0.0
        result.results.update({"gate": gate.label, "targets": [list(t) for t in program.targets],
                               "atoms": int(run.sites.shape[0]), "duration_s": program.duration,
                               "class_counts": run.class_counts()})
        result.checks.append(Check("norm_preserved", bool(deviation <= 1e-9), deviation, "max |norm - 1| <= 1e-9"))

        directory = self._output_dir(result.label)
        result.files.append(write_trajectories_csv(os.path.join(directory, "trajectories.csv"), run.sites,
                                                   run.experiment, final))
        with open(os.path.join(directory, "program.json"), "w") as f:
            f.write(program.to_json() + "\n")
        with open(os.path.join(directory, "config.json"), "w") as f:
            json.dump(config_to_dict(self.config), f, indent=2, sort_keys=True)
            f.write("\n")
        result.files.extend([os.path.join(directory, "program.json"), os.path.join(directory, "config.json")])
        return result
