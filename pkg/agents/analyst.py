import csv
import logging
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from agents.sequencer import Gate, GateKind
from utils.config import AnalysisConfig, RunConfig
from utils.error_handling import AddressingError, FidelityError, FitError
from utils.fidelity import bloch_to_density, expected_bloch_state, fidelity_with_error, target_density, uhlmann_fidelity
from utils.fitting import BlochEstimate, FringeData, fit_fringe, fringe_model
from utils.geometry import TABLE_ORDER, AtomClass
from utils.random_streams import make_rng

@dataclass
class ClassFidelity:
    atom_class: AtomClass
    fidelity: float
    error: float
    estimate: BlochEstimate
    rho: np.ndarray
    sigma: np.ndarray
    expected: Tuple[float, float]
    delta_fidelity: Optional[float] = None
    delta_error: Optional[float] = None
    bootstrap_error: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "class": self.atom_class.value,
            "fidelity": self.fidelity,
            "error": self.error,
            "n": self.estimate.n,
            "theta": self.estimate.theta,
            "phi": self.estimate.phi,
            "phi_indeterminate": self.estimate.phi_indeterminate,
            "expected_theta": self.expected[0],
            "expected_phi": self.expected[1],
            "delta_fidelity": self.delta_fidelity,
            "delta_error": self.delta_error,
            "bootstrap_error": self.bootstrap_error,
        }

@dataclass
class FidelityReport:
    """Per-class fidelities of one gate, rows in the published table order."""
    gate: Gate
    classes: Dict[AtomClass, ClassFidelity] = field(default_factory=dict)

    def __getitem__(self, atom_class: Union[AtomClass, str]) -> ClassFidelity:
        return self.classes[AtomClass(atom_class)]

    def rows(self) -> List[ClassFidelity]:
        return [self.classes[c] for c in TABLE_ORDER if c in self.classes]

    def to_dict(self) -> Dict[str, Any]:
        return {"gate": self.gate.label, "classes": [row.to_dict() for row in self.rows()]}

class AnalysisAgent:
    def __init__(self, config: Optional[RunConfig] = None):
        """
        Initialize the AnalysisAgent.

        Args:
            config: Run configuration supplying the analysis section (defaults if None)
        """
        self.logger = logging.getLogger(__name__)
        self.config = config or RunConfig()

    @property
    def settings(self) -> AnalysisConfig:
        return self.config.analysis

    def normalize_fringe(self, raw: FringeData, loss: Optional[float] = None,
                         leakage: Optional[float] = None) -> FringeData:
        """
        Correct a raw fringe for atom loss and the F=3 detection floor.

        The raw probability is divided by the surviving fraction 1 − loss, then the
        leakage floor is subtracted and the remaining range rescaled:
        P = (P_raw/(1 − loss) − leakage)/(1 − leakage).

        Args:
            raw: Raw fringe
            loss: Lost fraction (analysis.loss if None)
            leakage: F=3 floor (analysis.leakage if None)

        Returns:
            Normalized FringeData, ``flagged`` when any value leaves the plausible range
        """
        loss = self.settings.loss if loss is None else loss
        leakage = self.settings.leakage if leakage is None else leakage
        if not np.all(np.isfinite(raw.p0)):
            raise FitError("Cannot normalize a fringe with non-finite probabilities")
        if not (0.0 <= loss < 1.0 and 0.0 <= leakage < 1.0):
            raise FitError(f"Loss {loss} and leakage {leakage} must lie in [0, 1)")

        p0 = (raw.p0 / (1.0 - loss) - leakage) / (1.0 - leakage)
        flagged = bool(np.any(p0 < self.settings.flag_low) or np.any(p0 > self.settings.flag_high))
        if flagged:
            label = raw.atom_class.label if raw.atom_class is not None else "fringe"
            self.logger.warning(f"{label}: normalized values span [{p0.min():.3f}, {p0.max():.3f}], "
                                f"inconsistent with loss {loss} and leakage {leakage}")
        return replace(raw, p0=p0, flagged=flagged or raw.flagged)

    def expected_state(self, atom_class: AtomClass, gate: Union[Gate, GateKind, str],
                       echo: bool = True) -> Tuple[float, float]:
        """(θ, φ) a class should reach: the gate's rotated state for targets, the untouched superposition otherwise."""
        gate = Gate.of(gate)
        if AtomClass(atom_class) == AtomClass.TARGET:
            return expected_bloch_state(gate.axis_phase, gate.angle, echo)
        return expected_bloch_state(None, 0.0, echo)

    def _bootstrap(self, data: FringeData, estimate: BlochEstimate, sigma: np.ndarray,
                   theta_hint: float, rng: np.random.Generator) -> float:
        model = np.clip(fringe_model(data.alpha, estimate.n, estimate.theta, estimate.phi), 0.0, 1.0)
        samples = []
        for _ in range(self.settings.bootstrap_samples):
            if data.counts is not None and np.all(data.counts > 0):
                counts = data.counts.astype(int)
                p0 = rng.binomial(counts, model) / counts
            else:
                p0 = model + estimate.residual_rms * rng.standard_normal(model.size)
            try:
                refit = fit_fringe(FringeData(data.alpha, p0), theta_hint)
            except FitError:
                continue
            samples.append(uhlmann_fidelity(bloch_to_density(refit), sigma))
        if len(samples) < 2:
            raise FidelityError("Bootstrap produced too few successful refits")
        return float(np.std(samples, ddof=1))

    def class_fidelity(self, data: FringeData, expected: Tuple[float, float],
                       rng: Optional[np.random.Generator] = None) -> ClassFidelity:
        """Fit one class fringe and compare it with the expected pure state."""
        if data.atom_class is None:
            raise FidelityError("Fringe data carry no atom class")
        theta, phi = expected
        estimate = fit_fringe(data, theta_hint=theta)
        sigma = target_density(theta, phi)
        fidelity, error = fidelity_with_error(estimate, sigma)
        if fidelity > 1.0 or fidelity < 0.0:
            self.logger.debug(f"{data.atom_class.label}: clipping fidelity {fidelity:.6f} into [0, 1]")
        row = ClassFidelity(data.atom_class, float(min(max(fidelity, 0.0), 1.0)), error, estimate,
                            bloch_to_density(estimate), sigma, (theta, phi))
        if self.settings.bootstrap:
            row.bootstrap_error = self._bootstrap(data, estimate, sigma, theta, rng or make_rng(None))
        return row

    def gate_fidelity_report(self, fringes: Mapping[AtomClass, FringeData], gate: Union[Gate, GateKind, str],
                             reference: Optional[Mapping[AtomClass, FringeData]] = None,
                             normalize: bool = True, echo: bool = True,
                             seed: Optional[int] = None) -> FidelityReport:
        """
        Per-class gate fidelities.

        Args:
            fringes: Raw fringe per atom class with addressing on
            gate: Gate the program applied to its targets
            reference: Fringes of the same program with addressing replaced by waits; gives
                the differential fidelity of the non-target classes
            normalize: Apply loss and leakage normalization first
            echo: Whether the program carried the echo pulse
            seed: Seed for bootstrap resampling

        Returns:
            FidelityReport

        Raises:
            FidelityError: If no class data is present or the reference misses a class
        """
        gate = Gate.of(gate)
        if not fringes:
            raise FidelityError("No class fringes to analyze")
        rng = make_rng(seed)
        report = FidelityReport(gate)
        try:
            for atom_class in TABLE_ORDER:
                if atom_class not in fringes:
                    continue
                data = fringes[atom_class]
                if data.atom_class is None:
                    data = replace(data, atom_class=atom_class)
                if normalize:
                    data = self.normalize_fringe(data)
                row = self.class_fidelity(data, self.expected_state(atom_class, gate, echo), rng)

                if reference is not None and atom_class != AtomClass.TARGET:
                    if atom_class not in reference:
                        raise FidelityError(f"Reference run has no {atom_class.label} atoms")
                    off = reference[atom_class]
                    if off.atom_class is None:
                        off = replace(off, atom_class=atom_class)
                    if normalize:
                        off = self.normalize_fringe(off)
                    baseline = self.class_fidelity(off, self.expected_state(atom_class, gate, echo), rng)
                    row.delta_fidelity = row.fidelity - baseline.fidelity
                    row.delta_error = math.hypot(row.error, baseline.error)

                report.classes[atom_class] = row
                self.logger.info(f"Gate {gate.label} {atom_class.label}: F = {row.fidelity:.4f} ± {row.error:.4f}")
        except AddressingError:
            raise
        except Exception as e:
            self.logger.error(f"Error building fidelity report for gate {gate.label}: {str(e)}")
            raise FidelityError(f"Failed to build fidelity report: {str(e)}")
        return report

    def load_fringe_csv(self, path: str) -> Dict[AtomClass, FringeData]:
        """
        Read fringes from CSV with columns class, alpha_rad, p0, shots.

        Rows are grouped by class and sorted by α.
        """
        if not os.path.exists(path):
            raise FidelityError(f"Fringe file not found: {path}")
        grouped: Dict[AtomClass, List[Tuple[float, float, float]]] = defaultdict(list)
        try:
            with open(path, newline="") as f:
                for row in csv.DictReader(f):
                    atom_class = _parse_class(row["class"])
                    shots = row.get("shots")
                    grouped[atom_class].append((float(row["alpha_rad"]), float(row["p0"]),
                                                float(shots) if shots not in (None, "") else math.nan))
        except (KeyError, ValueError) as e:
            self.logger.error(f"Error reading fringe file {path}: {str(e)}")
            raise FidelityError(f"Invalid fringe file {path}: {str(e)}")

        fringes = {}
        for atom_class, rows in grouped.items():
            rows.sort()
            alpha, p0, shots = (np.array(column) for column in zip(*rows))
            fringes[atom_class] = FringeData(alpha, p0, None if np.any(np.isnan(shots)) else shots, atom_class)
        self.logger.info(f"Loaded fringes for {len(fringes)} classes from {path}")
        return fringes

    def write_fringe_csv(self, fringes: Mapping[AtomClass, FringeData], path: str) -> str:
        """Write fringes in the format read by ``load_fringe_csv``."""
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["class", "alpha_rad", "p0", "shots"])
            for atom_class in TABLE_ORDER:
                if atom_class not in fringes:
                    continue
                data = fringes[atom_class]
                for n in np.argsort(data.alpha, kind="stable"):
                    shots = "" if data.counts is None else f"{data.counts[n]:.10g}"
                    writer.writerow([atom_class.value, f"{data.alpha[n]:.10g}", f"{data.p0[n]:.10g}", shots])
        return path

    def render_table(self, reports: List[FidelityReport]) -> str:
        """Text table of fidelities: one row per class, one column per gate."""
        gates = [r.gate.label for r in reports]
        width = 20
        lines = [f"{'Class':<{width}}" + "".join(f"{'Gate ' + g:>{width}}" for g in gates)]
        for atom_class in TABLE_ORDER:
            cells = []
            for report in reports:
                if atom_class in report.classes:
                    row = report.classes[atom_class]
                    cells.append(f"{row.fidelity:.3f} ± {row.error:.3f}")
                else:
                    cells.append("-")
            if any(c != "-" for c in cells):
                lines.append(f"{atom_class.label:<{width}}" + "".join(f"{c:>{width}}" for c in cells))

        deltas = [(r.gate.label, row) for r in reports for row in r.rows() if row.delta_fidelity is not None]
        if deltas:
            lines.append("")
            lines.append("Differential fidelity (addressing on - off)")
            for label, row in deltas:
                lines.append(f"  Gate {label} {row.atom_class.label:<{width}}"
                             f"{row.delta_fidelity:+.4f} ± {row.delta_error:.4f}")
        return "\n".join(lines) + "\n"

def _parse_class(text: str) -> AtomClass:
    value = text.strip()
    for atom_class in AtomClass:
        if value.lower() in (atom_class.value, atom_class.label.lower()):
            return atom_class
    raise FidelityError(f"Unknown atom class '{text}'")
