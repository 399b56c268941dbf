import csv
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from utils.error_handling import GeometryError
from utils.validation import check_positive, check_probability

logger = logging.getLogger(__name__)

class Axis(str, Enum):
    X = "x"
    Y = "y"
    Z = "z"

    @property
    def index(self) -> int:
        return "xyz".index(self.value)

class Transition(str, Enum):
    """Microwave transitions whose frequency the addressing light shifts."""
    STORAGE = "storage"              # |3,0> <-> |4,0>
    UP_FROM_40 = "up_from_40"        # |4,0> <-> |3,1>
    UP_FROM_30 = "up_from_30"        # |3,0> <-> |4,1>
    COMPUTATIONAL = "computational"  # |3,1> <-> |4,1>
    DOWN_FROM_40 = "down_from_40"    # |4,0> <-> |3,-1>

class AtomClass(str, Enum):
    TARGET = "target"
    LINE = "line"
    NEAREST_NEIGHBOR = "nearest_neighbor"
    SPECTATOR = "spectator"

    @property
    def label(self) -> str:
        return {
            AtomClass.TARGET: "Target",
            AtomClass.LINE: "Line",
            AtomClass.NEAREST_NEIGHBOR: "Nearest Neighbors",
            AtomClass.SPECTATOR: "Spectator",
        }[self]

# Row order of the published fidelity table
TABLE_ORDER = (AtomClass.SPECTATOR, AtomClass.LINE, AtomClass.TARGET, AtomClass.NEAREST_NEIGHBOR)

class SiteIndex(NamedTuple):
    i: int
    j: int
    k: int

    def __str__(self) -> str:
        return f"({self.i},{self.j},{self.k})"

    @classmethod
    def parse(cls, text: str) -> "SiteIndex":
        """Parse ``"1,1,1"`` or ``"(1,1,1)"``."""
        parts = [p for p in text.strip().strip("()").split(",") if p.strip()]
        if len(parts) != 3:
            raise GeometryError(f"Site '{text}' must have three comma-separated indices")
        try:
            return cls(*(int(p) for p in parts))
        except ValueError:
            raise GeometryError(f"Site '{text}' has non-integer indices")

@dataclass(frozen=True)
class LatticeConfig:
    dims: Tuple[int, int, int] = (5, 5, 5)
    spacing: Tuple[float, float, float] = (4.9, 4.9, 4.9)
    occupancy_fill: float = 0.40

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or len(spacing) != 3:
            raise GeometryError("Lattice dims and spacing need exactly three entries")
        for axis, d in zip("ijk", dims):
            if d < 1:
                raise GeometryError(f"lattice.dims[{axis}]={d} must be >= 1")
        for axis, s in zip("xyz", spacing):
            check_positive(f"lattice.spacing[{axis}]", s)
        check_probability("lattice.occupancy_fill", self.occupancy_fill)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def n_sites(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def center(self) -> np.ndarray:
        """Geometric center of the site grid in μm."""
        return (np.array(self.dims) - 1) / 2.0 * np.array(self.spacing)

    def contains(self, site: Sequence[int]) -> bool:
        return len(site) == 3 and all(0 <= int(s) < d for s, d in zip(site, self.dims))

    def check_site(self, site: Sequence[int]) -> SiteIndex:
        if not self.contains(site):
            raise GeometryError(f"Site {tuple(site)} is outside lattice dims {self.dims}")
        return SiteIndex(*(int(s) for s in site))

    def sites(self) -> List[SiteIndex]:
        di, dj, dk = self.dims
        return [SiteIndex(i, j, k) for i in range(di) for j in range(dj) for k in range(dk)]

    def position(self, site: Sequence[int]) -> np.ndarray:
        return np.asarray(site, dtype=float) * np.array(self.spacing)

    def positions(self, sites: Sequence[Sequence[int]]) -> np.ndarray:
        if len(sites) == 0:
            return np.zeros((0, 3))
        return np.asarray(sites, dtype=float) * np.array(self.spacing)

    def neighbors(self, site: SiteIndex) -> List[SiteIndex]:
        """The face-adjacent sites that lie inside the lattice."""
        result = []
        for axis in range(3):
            for step in (-1, 1):
                candidate = list(site)
                candidate[axis] += step
                if self.contains(candidate):
                    result.append(SiteIndex(*candidate))
        return result

    def in_core(self, site: Sequence[int]) -> bool:
        """True for sites within one spacing of the grid center on every axis (the 3×3×3 core)."""
        middle = (np.array(self.dims) - 1) / 2.0
        return bool(np.all(np.abs(np.asarray(site, dtype=float) - middle) <= 1.0))

    def sample_occupancy(self, rng: np.random.Generator) -> np.ndarray:
        """Boolean occupancy map of shape ``dims`` at the configured fill."""
        return rng.random(self.dims) < self.occupancy_fill

@dataclass(frozen=True)
class ShiftCoefficients:
    """
    Per-transition Stark shift in units of a beam's peak shift.

    The storage coefficient defaults to zero because the addressing light sits at the
    tune-out wavelength of the clock states. The computational transition is derived so
    that the five level energies stay consistent.
    """
    storage: float = 0.0
    up_from_40: float = 1.0
    up_from_30: float = 1.0
    down_from_40: float = 1.0

    @property
    def computational(self) -> float:
        return self.up_from_30 + self.up_from_40 - self.storage

    def for_transition(self, transition: Transition) -> float:
        return {
            Transition.STORAGE: self.storage,
            Transition.UP_FROM_40: self.up_from_40,
            Transition.UP_FROM_30: self.up_from_30,
            Transition.COMPUTATIONAL: self.computational,
            Transition.DOWN_FROM_40: self.down_from_40,
        }[transition]

@dataclass(frozen=True)
class BeamSpec:
    """
    A focused addressing beam propagating along a horizontal lattice axis.

    ``line`` holds the beam's transverse site coordinates: (j, k) for a beam along x and
    (i, k) for a beam along y. ``offset_um`` displaces the beam from that line in the same
    transverse order and ``focus_um`` is the axial focus position (lattice center if None).
    """
    axis: Axis = Axis.X
    line: Tuple[int, int] = (0, 0)
    waist_w0: float = 2.7
    rayleigh_zR: float = 26.0
    peak_shift_hz: float = 124.0e3
    coefficients: ShiftCoefficients = field(default_factory=ShiftCoefficients)
    offset_um: Tuple[float, float] = (0.0, 0.0)
    focus_um: Optional[float] = None

    def __post_init__(self):
        try:
            axis = Axis(self.axis)
        except ValueError:
            raise GeometryError(f"Unknown beam axis '{self.axis}'")
        if axis == Axis.Z:
            raise GeometryError("Addressing beams propagate along a horizontal axis (x or y)")
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "line", tuple(int(v) for v in self.line))
        object.__setattr__(self, "offset_um", tuple(float(v) for v in self.offset_um))
        check_positive("beams.waist_w0", self.waist_w0)
        check_positive("beams.rayleigh_zR", self.rayleigh_zR)

    @property
    def peak_shift_2pi(self) -> float:
        """Single-beam peak shift Δ in rad/s."""
        return 2.0 * math.pi * self.peak_shift_hz

    @property
    def transverse_axes(self) -> Tuple[int, int]:
        return (1, 2) if self.axis == Axis.X else (0, 2)

    def pointed_at(self, line: Tuple[int, int]) -> "BeamSpec":
        return replace(self, line=tuple(line))

    def displaced(self, offset_um: Tuple[float, float]) -> "BeamSpec":
        return replace(self, offset_um=tuple(offset_um))

def beam_intensity_at(beam: BeamSpec, positions: np.ndarray, lattice: LatticeConfig,
                      extra_offset: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Relative Gaussian-beam intensity at arbitrary positions.

    Args:
        beam: Beam to evaluate
        positions: Array of shape (N, 3) in μm
        lattice: Lattice providing the site spacing and center
        extra_offset: Optional (N, 2) per-position transverse beam displacement in μm

    Returns:
        Array of shape (N,) with values in [0, 1]
    """
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    axial = beam.axis.index
    t0, t1 = beam.transverse_axes
    spacing = np.array(lattice.spacing)

    center0 = beam.line[0] * spacing[t0] + beam.offset_um[0]
    center1 = beam.line[1] * spacing[t1] + beam.offset_um[1]
    if extra_offset is not None:
        center0 = center0 + extra_offset[:, 0]
        center1 = center1 + extra_offset[:, 1]

    focus = lattice.center[axial] if beam.focus_um is None else beam.focus_um
    z = positions[:, axial] - focus
    r2 = (positions[:, t0] - center0) ** 2 + (positions[:, t1] - center1) ** 2
    wz2 = beam.waist_w0 ** 2 * (1.0 + (z / beam.rayleigh_zR) ** 2)
    return (beam.waist_w0 ** 2 / wz2) * np.exp(-2.0 * r2 / wz2)

def beam_intensity(beam: BeamSpec, site: Sequence[int], lattice: LatticeConfig) -> float:
    """
    Relative intensity (w0/w(z))²·exp(−2r²/w(z)²) of a beam at a lattice site.

    Args:
        beam: Beam to evaluate
        site: Lattice site
        lattice: Lattice configuration

    Returns:
        Relative intensity in [0, 1]
    """
    site = lattice.check_site(site)
    return float(beam_intensity_at(beam, lattice.position(site)[None, :], lattice)[0])

def check_beam_set(beams: Sequence[BeamSpec]) -> None:
    if len(beams) > 2:
        raise GeometryError(f"At most two addressing beams can be active, got {len(beams)}")
    if len(beams) == 2 and beams[0].axis == beams[1].axis:
        raise GeometryError(f"Addressing beams must have orthogonal axes, both are along {beams[0].axis.value}")

def level_energies(shifts: Mapping[Transition, np.ndarray]) -> np.ndarray:
    """
    Level energies (rad/s) from transition shifts.

    Columns follow the level order |3,0⟩, |4,0⟩, |3,1⟩, |4,1⟩, |3,−1⟩ with |3,0⟩ as the
    reference; F=4 energies are measured from the unshifted hyperfine splitting.
    """
    storage = np.asarray(shifts[Transition.STORAGE], dtype=float)
    e40 = storage
    e31 = e40 - np.asarray(shifts[Transition.UP_FROM_40], dtype=float)
    e41 = np.asarray(shifts[Transition.UP_FROM_30], dtype=float)
    e3m1 = e40 - np.asarray(shifts[Transition.DOWN_FROM_40], dtype=float)
    return np.stack([np.zeros_like(storage), e40, e31, e41, e3m1], axis=-1)

def transition_shifts_at(beams: Sequence[BeamSpec], positions: np.ndarray, lattice: LatticeConfig,
                         extra_offsets: Optional[Sequence[Optional[np.ndarray]]] = None
                         ) -> Dict[Transition, np.ndarray]:
    """Per-transition shifts (rad/s) at arbitrary positions, summed over beams."""
    check_beam_set(beams)
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    shifts = {t: np.zeros(len(positions)) for t in Transition}
    for index, beam in enumerate(beams):
        offset = None if extra_offsets is None else extra_offsets[index]
        intensity = beam_intensity_at(beam, positions, lattice, offset)
        for transition in Transition:
            coefficient = beam.coefficients.for_transition(transition)
            if coefficient:
                shifts[transition] += beam.peak_shift_2pi * coefficient * intensity
    return shifts

def level_energies_at(beams: Sequence[BeamSpec], positions: np.ndarray, lattice: LatticeConfig,
                      extra_offsets: Optional[Sequence[Optional[np.ndarray]]] = None) -> np.ndarray:
    return level_energies(transition_shifts_at(beams, positions, lattice, extra_offsets))

@dataclass(frozen=True, eq=False)
class StarkShiftMap:
    """Per-site shifts in rad/s for every transition in ``Transition``."""
    sites: Tuple[SiteIndex, ...]
    shifts: Dict[Transition, np.ndarray]
    _index: Dict[SiteIndex, int] = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {site: n for n, site in enumerate(self.sites)})

    def at(self, site: Sequence[int]) -> Dict[Transition, float]:
        try:
            n = self._index[SiteIndex(*site)]
        except KeyError:
            raise GeometryError(f"Site {tuple(site)} is not in the shift map")
        return {t: float(values[n]) for t, values in self.shifts.items()}

    def shift(self, site: Sequence[int], transition: Transition) -> float:
        return self.at(site)[transition]

    def level_energies(self) -> np.ndarray:
        return level_energies(self.shifts)

    def __add__(self, other: "StarkShiftMap") -> "StarkShiftMap":
        if self.sites != other.sites:
            raise GeometryError("Shift maps cover different sites")
        return StarkShiftMap(self.sites, {t: self.shifts[t] + other.shifts[t] for t in Transition})

def stark_shift_map(beams: Sequence[BeamSpec], lattice: LatticeConfig) -> StarkShiftMap:
    """
    Evaluate the ac Stark shift of every transition at every lattice site.

    Args:
        beams: Zero, one or two active beams; two beams must be orthogonal
        lattice: Lattice configuration

    Returns:
        StarkShiftMap over all sites

    Raises:
        GeometryError: If more than two beams or two parallel beams are given
    """
    check_beam_set(beams)
    sites = tuple(lattice.sites())
    shifts = transition_shifts_at(beams, lattice.positions(sites), lattice)
    logger.debug(f"Computed Stark map for {len(beams)} beam(s) over {len(sites)} sites")
    return StarkShiftMap(sites, shifts)

def beams_for_target(target: Sequence[int], lattice: LatticeConfig,
                     template: Optional[BeamSpec] = None) -> Tuple[BeamSpec, BeamSpec]:
    """Point an x beam and a y beam so that they cross at ``target``."""
    target = lattice.check_site(target)
    template = template or BeamSpec()
    beam_x = replace(template, axis=Axis.X, line=(target.j, target.k))
    beam_y = replace(template, axis=Axis.Y, line=(target.i, target.k))
    return beam_x, beam_y

def on_beam_line(beam: BeamSpec, site: Sequence[int]) -> bool:
    t0, t1 = beam.transverse_axes
    return (site[t0], site[t1]) == tuple(beam.line)

def classify_sites(targets: Sequence[Sequence[int]], beams_per_target: Sequence[Sequence[BeamSpec]],
                   lattice: LatticeConfig, sites: Optional[Iterable[Sequence[int]]] = None
                   ) -> Dict[SiteIndex, AtomClass]:
    """
    Label sites as Target, Line, NearestNeighbor or Spectator.

    Args:
        targets: Distinct target sites
        beams_per_target: Beam pointings used for each target during the sequence
        lattice: Lattice configuration
        sites: Sites to label (all lattice sites if None)

    Returns:
        Mapping from site to its class, precedence Target > Line > NearestNeighbor > Spectator

    Raises:
        GeometryError: On duplicate or out-of-range targets
    """
    checked = [lattice.check_site(t) for t in targets]
    if len(set(checked)) != len(checked):
        raise GeometryError(f"Duplicate targets in {[str(t) for t in checked]}")
    if len(beams_per_target) != len(checked):
        raise GeometryError("Need one beam pointing per target")

    target_set = set(checked)
    all_beams = [beam for pointing in beams_per_target for beam in pointing]
    neighbor_set = {n for t in checked for n in lattice.neighbors(t)}

    labels: Dict[SiteIndex, AtomClass] = {}
    for site in (lattice.sites() if sites is None else [lattice.check_site(s) for s in sites]):
        if site in target_set:
            labels[site] = AtomClass.TARGET
        elif any(on_beam_line(beam, site) for beam in all_beams):
            labels[site] = AtomClass.LINE
        elif site in neighbor_set:
            labels[site] = AtomClass.NEAREST_NEIGHBOR
        else:
            labels[site] = AtomClass.SPECTATOR
    return labels

def write_shift_map_csv(shift_map: StarkShiftMap, path: str) -> str:
    """Write the shift map with one column per transition, in Hz."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["i", "j", "k"] + [f"shift_{t.value}_hz" for t in Transition])
        for n, site in enumerate(shift_map.sites):
            row = [site.i, site.j, site.k]
            row += [f"{shift_map.shifts[t][n] / (2.0 * math.pi):.10g}" for t in Transition]
            writer.writerow(row)
    logger.info(f"Wrote Stark shift map for {len(shift_map.sites)} sites to {path}")
    return path
