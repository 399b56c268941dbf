import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Mapping, Optional, Tuple

from dotenv import load_dotenv

from utils.atomsim import Envelope, NoiseParams
from utils.error_handling import ConfigError
from utils.geometry import BeamSpec, LatticeConfig, ShiftCoefficients
from utils.validation import (
    check_positive,
    check_range,
    parse_angle,
    reject_unknown_keys,
)

logger = logging.getLogger(__name__)

load_dotenv()

# Paths and logging
CONFIG_PATH = os.environ.get("ADDRESSING_CONFIG")
OUTPUT_DIR = os.environ.get("ADDRESSING_OUTPUT_DIR", "data/runs")
LOG_LEVEL = os.environ.get("ADDRESSING_LOG_LEVEL", "INFO")
LOG_FILE = os.environ.get("ADDRESSING_LOG_FILE", "addressing.log")

# Processing config
CONFIG_SCHEMA_VERSION = 1
DEFAULT_SEED = int(os.environ.get("ADDRESSING_SEED", "20240611"))
DEFAULT_SHOTS = int(os.environ.get("ADDRESSING_SHOTS", "200"))
FIT_MAX_ATTEMPTS = 3

DUMMY_MODES = ("replay", "detuned")
MEASUREMENT_MODES = ("direct", "image")

@dataclass(frozen=True)
class SequenceConfig:
    global_pulse_duration_s: float = 100e-6
    addressing_pulse_duration_s: float = 120e-6
    pulse_gap_s: float = 10e-6
    ramp_duration_s: float = 290e-6
    mems_settle_s: float = 5e-6
    dummy_detuning_hz: float = 1.0e6
    dummy_mode: str = "replay"
    steps_per_pulse: int = 200
    scan_steps_per_pulse: int = 100
    envelope: str = "blackman"
    calibrate: bool = True
    calibration_points: int = 8

    def __post_init__(self):
        for name in ("global_pulse_duration_s", "addressing_pulse_duration_s", "ramp_duration_s"):
            check_positive(f"sequence.{name}", getattr(self, name))
        check_range("sequence.pulse_gap_s", self.pulse_gap_s, low=0.0)
        check_range("sequence.mems_settle_s", self.mems_settle_s, low=0.0)
        check_range("sequence.dummy_detuning_hz", self.dummy_detuning_hz)
        if self.dummy_mode not in DUMMY_MODES:
            raise ConfigError(f"sequence.dummy_mode={self.dummy_mode!r} must be one of {', '.join(DUMMY_MODES)}")
        check_range("sequence.steps_per_pulse", self.steps_per_pulse, low=1)
        check_range("sequence.scan_steps_per_pulse", self.scan_steps_per_pulse, low=1)
        check_range("sequence.calibration_points", self.calibration_points, low=5)
        try:
            Envelope(self.envelope)
        except ValueError:
            raise ConfigError(f"sequence.envelope={self.envelope!r} must be 'blackman' or 'square'")

@dataclass(frozen=True)
class AnalysisConfig:
    loss: float = 0.10
    leakage: float = 0.02
    n_alpha: int = 16
    bootstrap: bool = False
    bootstrap_samples: int = 200
    flag_low: float = -0.05
    flag_high: float = 1.05

    def __post_init__(self):
        check_range("analysis.loss", self.loss, 0.0, 1.0, high_inclusive=False)
        check_range("analysis.leakage", self.leakage, 0.0, 1.0, high_inclusive=False)
        check_range("analysis.n_alpha", self.n_alpha, low=4)
        check_range("analysis.bootstrap_samples", self.bootstrap_samples, low=2)
        check_range("analysis.flag_high", self.flag_high, low=self.flag_low, low_inclusive=False)

@dataclass(frozen=True)
class StabilizationConfig:
    dt_s: float = 10.0
    iterations: int = 10000
    drift_rate_um_per_hour: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    random_walk_um: float = 0.002
    measurement: str = "direct"
    measurement_sigma_um: Tuple[float, float, float] = (0.1, 0.1, 0.23)
    psf_sigma_um: float = 0.6
    pixel_um: float = 0.5
    image_size_px: int = 24
    defocus_plane_um: float = 4.9
    photons_per_atom: float = 400.0
    background_per_pixel: float = 2.0
    kp: float = 1.0
    ki: float = 0.1
    kd: float = 0.0
    tau_s: float = 120.0
    integrator_limit_um: float = 5.0
    max_tilt_mrad: float = 80.0
    strain_gauge_floor_um: float = 0.01
    alignment_half_range_um: float = 1.5
    alignment_points: int = 21
    alignment_tone_margin: float = 0.02
    alignment_shots: int = 200
    alignment_iterations: int = 2
    alignment_trials: int = 100
    misalignment_sigma_um: float = 0.4

    def __post_init__(self):
        object.__setattr__(self, "drift_rate_um_per_hour", tuple(float(v) for v in self.drift_rate_um_per_hour))
        object.__setattr__(self, "measurement_sigma_um", tuple(float(v) for v in self.measurement_sigma_um))
        if len(self.drift_rate_um_per_hour) != 3 or len(self.measurement_sigma_um) != 3:
            raise ConfigError("stabilization drift and measurement sigma need three entries (x, y, z)")
        for name in ("dt_s", "psf_sigma_um", "pixel_um", "defocus_plane_um", "photons_per_atom",
                     "tau_s", "integrator_limit_um", "max_tilt_mrad", "alignment_half_range_um",
                     "alignment_tone_margin"):
            check_positive(f"stabilization.{name}", getattr(self, name))
        for value in self.measurement_sigma_um:
            check_positive("stabilization.measurement_sigma_um", value)
        for name in ("random_walk_um", "background_per_pixel", "kp", "ki", "kd",
                     "strain_gauge_floor_um", "misalignment_sigma_um"):
            check_range(f"stabilization.{name}", getattr(self, name), low=0.0)
        for name in ("iterations", "alignment_shots", "alignment_iterations", "alignment_trials"):
            check_range(f"stabilization.{name}", getattr(self, name), low=1)
        check_range("stabilization.image_size_px", self.image_size_px, low=8)
        check_range("stabilization.alignment_points", self.alignment_points, low=5)
        if self.measurement not in MEASUREMENT_MODES:
            raise ConfigError(f"stabilization.measurement={self.measurement!r} must be one of {', '.join(MEASUREMENT_MODES)}")

@dataclass(frozen=True)
class RunConfig:
    lattice: LatticeConfig = field(default_factory=LatticeConfig)
    beams: BeamSpec = field(default_factory=BeamSpec)
    noise: NoiseParams = field(default_factory=NoiseParams)
    sequence: SequenceConfig = field(default_factory=SequenceConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    stabilization: StabilizationConfig = field(default_factory=StabilizationConfig)
    seed: int = DEFAULT_SEED
    shots: int = DEFAULT_SHOTS
    output_dir: str = OUTPUT_DIR
    strict: bool = True
    version: int = CONFIG_SCHEMA_VERSION

_ANGLE_KEYS = {"noise": ("line_phase_kick", "zeeman_phase_kick")}
_TUPLE_KEYS = {"lattice": ("dims", "spacing"), "stabilization": ("drift_rate_um_per_hour", "measurement_sigma_um")}
_BEAM_KEYS = ("waist_w0", "rayleigh_zR", "peak_shift_hz", "focus_um", "coefficients")
_TOP_LEVEL = ("version", "lattice", "beams", "noise", "sequence", "analysis", "stabilization",
              "seed", "shots", "output_dir", "strict")

def _section_dict(name: str, raw: Mapping[str, Any]) -> Dict[str, Any]:
    value = raw.get(name, {})
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"Section '{name}' must be an object, got {type(value).__name__}")
    return dict(value)

def _build(name: str, cls: type, params: Dict[str, Any], strict: bool) -> Any:
    allowed = [f.name for f in dataclasses.fields(cls)]
    if strict:
        reject_unknown_keys(name, params, allowed)
    else:
        params = {k: v for k, v in params.items() if k in allowed}
    for key in _ANGLE_KEYS.get(name, ()):
        if key in params:
            params[key] = parse_angle(f"{name}.{key}", params[key])
    for key in _TUPLE_KEYS.get(name, ()):
        if key in params:
            if not isinstance(params[key], (list, tuple)):
                raise ConfigError(f"{name}.{key} must be a list")
            params[key] = tuple(params[key])
    for f in dataclasses.fields(cls):
        if f.name in params and f.type in (int, "int") and isinstance(params[f.name], float):
            if not params[f.name].is_integer():
                raise ConfigError(f"{name}.{f.name}={params[f.name]} must be an integer")
            params[f.name] = int(params[f.name])
    try:
        return cls(**params)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid section '{name}': {str(e)}")

def _build_beams(params: Dict[str, Any], strict: bool) -> BeamSpec:
    if strict:
        reject_unknown_keys("beams", params, _BEAM_KEYS)
    coefficients = params.pop("coefficients", None) or {}
    if not isinstance(coefficients, dict):
        raise ConfigError("beams.coefficients must be an object")
    params = {k: v for k, v in params.items() if k in _BEAM_KEYS}
    params["coefficients"] = _build("beams.coefficients", ShiftCoefficients, dict(coefficients), strict)
    if "peak_shift_hz" in params:
        check_range("beams.peak_shift_hz", params["peak_shift_hz"])
    try:
        return BeamSpec(**params)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid section 'beams': {str(e)}")

def parse_override(text: str) -> Tuple[str, Any]:
    """Parse ``section.key=value``; the value is JSON when it parses, else a string."""
    if "=" not in text:
        raise ConfigError(f"Override '{text}' must look like section.key=value")
    key, value = text.split("=", 1)
    try:
        return key.strip(), json.loads(value)
    except json.JSONDecodeError:
        return key.strip(), value

def apply_overrides(raw: Dict[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    merged = json.loads(json.dumps(raw))
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = merged
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"Override '{dotted}' descends into a non-object")
        node[parts[-1]] = value
    return merged

def config_from_dict(raw: Mapping[str, Any], strict: Optional[bool] = None) -> RunConfig:
    """
    Validate a parsed config document and fill defaults.

    Args:
        raw: Parsed JSON object
        strict: Reject unknown keys; defaults to the document's ``strict`` key (True)

    Returns:
        RunConfig

    Raises:
        ConfigError: Naming the offending key and constraint
    """
    if not isinstance(raw, dict):
        raise ConfigError(f"Config root must be an object, got {type(raw).__name__}")
    strict = bool(raw.get("strict", True)) if strict is None else strict
    if strict:
        reject_unknown_keys("", raw, _TOP_LEVEL)

    version = raw.get("version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"version={version!r} is not supported (expected {CONFIG_SCHEMA_VERSION})")

    seed = raw.get("seed", DEFAULT_SEED)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed={seed!r} must be a non-negative integer")
    shots = raw.get("shots", DEFAULT_SHOTS)
    if isinstance(shots, bool) or not isinstance(shots, int) or shots < 1:
        raise ConfigError(f"shots={shots!r} must be a positive integer")
    output_dir = raw.get("output_dir", OUTPUT_DIR)
    if not isinstance(output_dir, str) or not output_dir:
        raise ConfigError(f"output_dir={output_dir!r} must be a non-empty path")

    return RunConfig(
        lattice=_build("lattice", LatticeConfig, _section_dict("lattice", raw), strict),
        beams=_build_beams(_section_dict("beams", raw), strict),
        noise=_build("noise", NoiseParams, _section_dict("noise", raw), strict),
        sequence=_build("sequence", SequenceConfig, _section_dict("sequence", raw), strict),
        analysis=_build("analysis", AnalysisConfig, _section_dict("analysis", raw), strict),
        stabilization=_build("stabilization", StabilizationConfig, _section_dict("stabilization", raw), strict),
        seed=seed,
        shots=shots,
        output_dir=output_dir,
        strict=strict,
    )

def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """
    Load and validate a JSON run configuration.

    Args:
        path: Config file; falls back to ADDRESSING_CONFIG, then to built-in defaults
        overrides: Dotted-key overrides applied before validation

    Returns:
        RunConfig with every default filled

    Raises:
        ConfigError: On a missing or unparsable file or an invalid value
    """
    path = path or CONFIG_PATH
    raw: Dict[str, Any] = {}
    if path:
        if not os.path.isfile(path):
            raise ConfigError(f"Config file not found: {path}")
        with open(path) as f:
            text = f.read()
        if text.strip():
            try:
                raw = json.loads(text)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}")
        logger.info(f"Loaded configuration from {path}")
    else:
        logger.info("No configuration file given; using defaults")

    if overrides:
        if not isinstance(raw, dict):
            raise ConfigError("Config root must be an object")
        raw = apply_overrides(raw, overrides)
    return config_from_dict(raw)

def _jsonable(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value

def config_to_dict(config: RunConfig) -> Dict[str, Any]:
    """Echo a config as plain JSON values (infinite times become "inf")."""
    data = dataclasses.asdict(config)
    for key in ("axis", "line", "offset_um"):
        data["beams"].pop(key, None)
    return _jsonable(data)
