import math
import os
from dataclasses import replace

import numpy as np
import pytest

from agents.analyst import AnalysisAgent
from agents.sequencer import SequencerAgent, compile_echo_program
from utils.atomsim import AtomEnsemble, AtomState, NoiseParams, measure_f3
from utils.config import RunConfig
from utils.error_handling import FidelityError, FitError
from utils.fitting import FringeData, fringe_model
from utils.geometry import AtomClass

ALPHAS = np.linspace(0.0, 2.0 * math.pi, 16, endpoint=False)

def _fringe(agent: AnalysisAgent, atom_class: AtomClass, n: float, gate: str = "I", counts=None) -> FringeData:
    theta, phi = agent.expected_state(atom_class, gate)
    return FringeData(ALPHAS, fringe_model(ALPHAS, n, theta, phi), counts, atom_class)

def test_normalization_removes_loss():
    agent = AnalysisAgent()
    raw = FringeData(ALPHAS, np.full(ALPHAS.size, 0.45))
    assert np.allclose(agent.normalize_fringe(raw, loss=0.1, leakage=0.0).p0, 0.5)

def test_normalization_with_default_leakage():
    agent = AnalysisAgent()
    raw = FringeData(ALPHAS, np.full(ALPHAS.size, (0.5 * 0.98 + 0.02) * 0.9))
    normalized = agent.normalize_fringe(raw)
    assert np.allclose(normalized.p0, 0.5)
    assert not normalized.flagged

def test_normalization_inverts_detection_model():
    noise = NoiseParams(t1_s=math.inf)
    raw, clean = [], []
    for alpha in ALPHAS:
        ensemble = AtomEnsemble.from_states([AtomState.storage(math.cos(alpha / 2), math.sin(alpha / 2))] * 10)
        ensemble.lost[0] = True
        raw.append(float(np.mean(measure_f3(ensemble, noise))))
        clean.append(math.cos(alpha / 2) ** 2)
    normalized = AnalysisAgent().normalize_fringe(FringeData(ALPHAS, np.array(raw)), loss=0.1)
    assert np.allclose(normalized.p0, clean, atol=1e-12)
    assert not normalized.flagged

def test_normalization_of_simulated_ramsey_fringe():
    config = RunConfig()
    noise = replace(NoiseParams.noiseless(), leakage_f3=config.analysis.leakage)
    alphas = [0.0, math.pi / 2, math.pi]
    result = SequencerAgent(config).run_program(compile_echo_program(1e-3, config, echo=False), shots=1,
                                                noise=noise, alphas=alphas, sites=[(2, 2, 2)],
                                                force_occupied=True)
    raw = FringeData(np.array(alphas), result.probabilities[:, 0])
    assert raw.p0[-1] == pytest.approx(config.analysis.leakage, abs=1e-4)
    normalized = AnalysisAgent(config).normalize_fringe(raw, loss=0.0)
    assert normalized.p0 == pytest.approx([1.0, 0.5, 0.0], abs=1e-4)

def test_normalization_flags_implausible_values():
    agent = AnalysisAgent()
    raw = FringeData(ALPHAS, np.full(ALPHAS.size, 0.99), atom_class=AtomClass.LINE)
    assert agent.normalize_fringe(raw, loss=0.1, leakage=0.0).flagged

def test_normalization_rejects_bad_input():
    agent = AnalysisAgent()
    raw = FringeData(ALPHAS, np.full(ALPHAS.size, 0.5))
    with pytest.raises(FitError):
        agent.normalize_fringe(raw, loss=1.0)
    with pytest.raises(FitError):
        agent.normalize_fringe(replace(raw, p0=np.full(ALPHAS.size, np.nan)))

def test_expected_states():
    agent = AnalysisAgent()
    theta, phi = agent.expected_state(AtomClass.SPECTATOR, "I")
    assert theta == pytest.approx(math.pi / 2)
    assert abs(math.remainder(phi - math.pi, 2.0 * math.pi)) < 1e-9
    # every non-target class expects the same state whatever the gate
    assert agent.expected_state(AtomClass.LINE, "II") == pytest.approx(agent.expected_state(AtomClass.LINE, "III"))
    theta, phi = agent.expected_state(AtomClass.TARGET, "I")
    assert abs(math.remainder(phi, 2.0 * math.pi)) < 1e-9

def test_report_recovers_shrinkage():
    agent = AnalysisAgent()
    fringes = {AtomClass.TARGET: _fringe(agent, AtomClass.TARGET, 0.97),
               AtomClass.SPECTATOR: _fringe(agent, AtomClass.SPECTATOR, 0.99),
               AtomClass.LINE: _fringe(agent, AtomClass.LINE, 0.98)}
    report = agent.gate_fidelity_report(fringes, "I", normalize=False)
    assert report[AtomClass.TARGET].fidelity == pytest.approx(0.97, abs=1e-6)
    assert report["spectator"].fidelity == pytest.approx(0.99, abs=1e-6)
    assert [row.atom_class for row in report.rows()] == [AtomClass.SPECTATOR, AtomClass.LINE, AtomClass.TARGET]
    assert report.to_dict()["gate"] == "I"

def test_report_differential_against_reference():
    agent = AnalysisAgent()
    fringes = {AtomClass.TARGET: _fringe(agent, AtomClass.TARGET, 0.97),
               AtomClass.LINE: _fringe(agent, AtomClass.LINE, 0.985)}
    reference = {AtomClass.LINE: _fringe(agent, AtomClass.LINE, 0.995)}
    report = agent.gate_fidelity_report(fringes, "I", reference=reference, normalize=False)
    assert report[AtomClass.LINE].delta_fidelity == pytest.approx(-0.01, abs=1e-6)
    assert report[AtomClass.TARGET].delta_fidelity is None

def test_report_needs_reference_for_every_class():
    agent = AnalysisAgent()
    fringes = {AtomClass.LINE: _fringe(agent, AtomClass.LINE, 0.98),
               AtomClass.SPECTATOR: _fringe(agent, AtomClass.SPECTATOR, 0.98)}
    reference = {AtomClass.LINE: _fringe(agent, AtomClass.LINE, 0.99)}
    with pytest.raises(FidelityError, match="Spectator"):
        agent.gate_fidelity_report(fringes, "I", reference=reference, normalize=False)

def test_report_needs_data():
    agent = AnalysisAgent()
    with pytest.raises(FidelityError):
        agent.gate_fidelity_report({}, "I")
    with pytest.raises(FidelityError):
        agent.class_fidelity(FringeData(ALPHAS, np.full(ALPHAS.size, 0.5)), (1.0, 0.0))

def test_report_fills_missing_class_label():
    agent = AnalysisAgent()
    data = replace(_fringe(agent, AtomClass.SPECTATOR, 0.99), atom_class=None)
    report = agent.gate_fidelity_report({AtomClass.SPECTATOR: data}, "II", normalize=False)
    assert report[AtomClass.SPECTATOR].estimate.n == pytest.approx(0.99, abs=1e-6)

def test_bootstrap_error():
    config = RunConfig()
    config = replace(config, analysis=replace(config.analysis, bootstrap=True, bootstrap_samples=30))
    agent = AnalysisAgent(config)
    data = _fringe(agent, AtomClass.SPECTATOR, 0.95, counts=np.full(ALPHAS.size, 500))
    report = agent.gate_fidelity_report({AtomClass.SPECTATOR: data}, "I", normalize=False, seed=3)
    error = report[AtomClass.SPECTATOR].bootstrap_error
    assert error is not None
    assert 0.0 < error < 0.05

def test_fringe_csv(tmp_path):
    agent = AnalysisAgent()
    fringes = {AtomClass.TARGET: _fringe(agent, AtomClass.TARGET, 0.97, counts=np.full(ALPHAS.size, 40)),
               AtomClass.NEAREST_NEIGHBOR: _fringe(agent, AtomClass.NEAREST_NEIGHBOR, 0.99)}
    path = agent.write_fringe_csv(fringes, os.path.join(tmp_path, "fringes.csv"))
    with open(path) as f:
        assert f.readline().strip() == "class,alpha_rad,p0,shots"
    loaded = agent.load_fringe_csv(path)
    assert set(loaded) == {AtomClass.TARGET, AtomClass.NEAREST_NEIGHBOR}
    assert np.allclose(loaded[AtomClass.TARGET].p0, fringes[AtomClass.TARGET].p0)
    assert np.allclose(loaded[AtomClass.TARGET].counts, 40)
    assert loaded[AtomClass.NEAREST_NEIGHBOR].counts is None

def test_fringe_csv_accepts_labels_and_sorts(tmp_path):
    path = os.path.join(tmp_path, "fringes.csv")
    with open(path, "w") as f:
        f.write("class,alpha_rad,p0,shots\nNearest Neighbors,3.0,0.2,\nnearest_neighbor,1.0,0.8,\n")
    loaded = AnalysisAgent().load_fringe_csv(path)
    assert list(loaded[AtomClass.NEAREST_NEIGHBOR].alpha) == [1.0, 3.0]

def test_fringe_csv_errors(tmp_path):
    agent = AnalysisAgent()
    with pytest.raises(FidelityError, match="not found"):
        agent.load_fringe_csv(os.path.join(tmp_path, "missing.csv"))
    path = os.path.join(tmp_path, "bad.csv")
    with open(path, "w") as f:
        f.write("class,alpha_rad,p0\nghost,0.0,0.5\n")
    with pytest.raises(FidelityError, match="ghost"):
        agent.load_fringe_csv(path)

def test_render_table():
    agent = AnalysisAgent()
    fringes = {AtomClass.TARGET: _fringe(agent, AtomClass.TARGET, 0.97),
               AtomClass.LINE: _fringe(agent, AtomClass.LINE, 0.985)}
    reference = {AtomClass.LINE: _fringe(agent, AtomClass.LINE, 0.995)}
    reports = [agent.gate_fidelity_report(fringes, "I", reference=reference, normalize=False),
               agent.gate_fidelity_report({AtomClass.LINE: fringes[AtomClass.LINE]}, "II", normalize=False)]
    text = agent.render_table(reports)
    lines = text.splitlines()
    assert "Gate I" in lines[0] and "Gate II" in lines[0]
    assert lines[1].startswith("Line")
    assert "0.985" in lines[1]
    assert lines[2].startswith("Target") and lines[2].rstrip().endswith("-")
    assert "Differential fidelity" in text
    assert "-0.0100" in text
