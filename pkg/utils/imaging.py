import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import curve_fit, least_squares

from utils.config import FIT_MAX_ATTEMPTS
from utils.error_handling import FitError, StabilizationError, with_refit
from utils.geometry import LatticeConfig, SiteIndex
from utils.random_streams import SeedLike, make_rng
from utils.validation import check_positive, check_range

# Configure logging
logger = logging.getLogger(__name__)

# Spot radius doubles one plane out of focus: σ(dz)² = σ₀²(1 + 3(dz/a)²)
DEFOCUS_GROWTH = 3.0

@dataclass(frozen=True)
class PsfParams:
    """
    Gaussian point-spread function of the imaging system and the camera sampling.

    ``plane_um`` is the spacing a between the in-focus plane and the two defocused
    planes used for the axial fit.
    """
    sigma_um: float = 0.6
    pixel_um: float = 0.5
    size_px: int = 24
    plane_um: float = 4.9
    photons_per_atom: float = 400.0
    background_per_pixel: float = 2.0

    def __post_init__(self):
        check_positive("psf.sigma_um", self.sigma_um)
        check_positive("psf.pixel_um", self.pixel_um)
        check_range("psf.size_px", self.size_px, low=8)
        check_positive("psf.plane_um", self.plane_um)
        check_positive("psf.photons_per_atom", self.photons_per_atom)
        check_range("psf.background_per_pixel", self.background_per_pixel, low=0.0)

    @property
    def focal_planes(self) -> np.ndarray:
        """Focus positions of the in-focus, near and far images in μm."""
        return np.array([0.0, -self.plane_um, self.plane_um])

    def width(self, defocus: float) -> float:
        return self.sigma_um * math.sqrt(1.0 + DEFOCUS_GROWTH * (defocus / self.plane_um) ** 2)

    def axial_response(self, z: float) -> np.ndarray:
        """Relative peak amplitude of the three planes for an atom at axial offset ``z``."""
        return 1.0 / (1.0 + DEFOCUS_GROWTH * ((z - self.focal_planes) / self.plane_um) ** 2)

    def grid(self) -> Tuple[np.ndarray, np.ndarray]:
        axis = (np.arange(self.size_px) - (self.size_px - 1) / 2.0) * self.pixel_um
        return np.meshgrid(axis, axis, indexing="xy")

@dataclass
class ImageStack:
    images: np.ndarray
    psf: PsfParams
    n_atoms: int

    @property
    def in_focus(self) -> np.ndarray:
        return self.images[0]

@dataclass
class PositionEstimate:
    x: float
    y: float
    z: float
    sigma_x: float = 0.1
    sigma_y: float = 0.1
    sigma_z: float = 0.23
    low_signal: bool = False

    def __post_init__(self):
        for name in ("sigma_x", "sigma_y", "sigma_z"):
            if not getattr(self, name) > 0:
                raise StabilizationError(f"Position uncertainty {name} must be positive")

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def sigmas(self) -> np.ndarray:
        return np.array([self.sigma_x, self.sigma_y, self.sigma_z])

def gaussian_spot(coords: Tuple[np.ndarray, np.ndarray], amplitude: float, x0: float, y0: float,
                  sigma: float, background: float) -> np.ndarray:
    x, y = coords
    return amplitude * np.exp(-((x - x0) ** 2 + (y - y0) ** 2) / (2.0 * sigma ** 2)) + background

def expected_stack(offset: Sequence[float], n_atoms: int, psf: PsfParams) -> np.ndarray:
    """Mean photon counts of the three stacked images, shape (3, size, size)."""
    x, y = psf.grid()
    images = []
    for focus in psf.focal_planes:
        sigma = psf.width(offset[2] - focus)
        peak = n_atoms * psf.photons_per_atom * psf.pixel_um ** 2 / (2.0 * math.pi * sigma ** 2)
        images.append(gaussian_spot((x, y), peak, offset[0], offset[1], sigma, n_atoms * psf.background_per_pixel))
    return np.stack(images)

def synthesize_image_stack(offset: Sequence[float], atoms: Sequence[SiteIndex], psf: Optional[PsfParams] = None,
                           seed: SeedLike = None, noise: bool = True) -> ImageStack:
    """
    Stacked images of isolated atoms displaced by the lattice offset.

    Each atom's crop is centered on its nominal site, so the stack is the single-atom
    image scaled by the atom count; shot noise is Poisson.

    Args:
        offset: True lattice offset (x, y, z) in μm
        atoms: Isolated atoms contributing to the stack
        psf: PSF and camera parameters
        seed: Seed or Generator for shot noise
        noise: Add Poisson shot noise

    Returns:
        ImageStack with in-focus, near and far images

    Raises:
        StabilizationError: If no isolated atom is available
    """
    if len(atoms) == 0:
        raise StabilizationError("Image stacking needs at least one isolated atom")
    psf = psf or PsfParams()
    mean = expected_stack(offset, len(atoms), psf)
    images = make_rng(seed).poisson(mean).astype(float) if noise else mean
    return ImageStack(images, psf, len(atoms))

def _fit_spot(image: np.ndarray, psf: PsfParams, max_attempts: int) -> Tuple[np.ndarray, np.ndarray]:
    x, y = psf.grid()
    background0 = float(np.median(image))
    signal = np.clip(image - background0, 0.0, None)
    total = float(signal.sum())
    if total > 0:
        x0, y0 = float((signal * x).sum() / total), float((signal * y).sum() / total)
    else:
        x0 = y0 = 0.0
    amplitude0 = float(image.max() - background0)

    def attempt(number: int) -> Tuple[np.ndarray, np.ndarray]:
        start = [amplitude0, x0, y0, psf.sigma_um * number, background0]
        try:
            popt, pcov = curve_fit(gaussian_spot, (x.ravel(), y.ravel()), image.ravel(), p0=start, maxfev=5000)
        except (RuntimeError, ValueError) as e:
            raise FitError(f"Spot fit failed: {str(e)}")
        if not np.all(np.isfinite(popt)):
            raise FitError("Spot fit returned non-finite parameters")
        return popt, pcov

    return with_refit(attempt, max_attempts)

def estimate_position(stack: ImageStack, strain_floor_um: float = 0.01,
                      max_attempts: int = FIT_MAX_ATTEMPTS) -> PositionEstimate:
    """
    Lattice offset from an image stack.

    x and y come from a 2D Gaussian fit to the in-focus image. The fitted peak
    amplitudes of the three planes are then fit against the axial response to give z.

    Args:
        stack: Synthesized or measured image stack
        strain_floor_um: Axial uncertainty floor of the imaging-lens stage, added in quadrature
        max_attempts: Fit attempts per image

    Returns:
        PositionEstimate

    Raises:
        FitError: If a spot or axial fit does not converge
    """
    psf = stack.psf
    fits = [_fit_spot(image, psf, max_attempts) for image in stack.images]
    popt, pcov = fits[0]
    amplitudes = np.array([abs(f[0][0]) for f in fits])
    amplitude_errors = np.array([math.sqrt(max(f[1][0, 0], 0.0)) if np.isfinite(f[1][0, 0]) else 0.0 for f in fits])

    def residual(params: np.ndarray) -> np.ndarray:
        return params[0] * psf.axial_response(params[1]) - amplitudes

    best = None
    for z0 in (-0.5 * psf.plane_um, 0.0, 0.5 * psf.plane_um):
        result = least_squares(residual, [amplitudes.max(), z0], method="lm", xtol=1e-14, ftol=1e-14)
        if best is None or result.cost < best.cost:
            best = result
    if best is None or not best.success:
        raise FitError("Axial amplitude fit did not converge")

    # propagate amplitude errors through the 2-parameter fit
    jac = best.jac
    weights = np.diag(1.0 / np.maximum(amplitude_errors, 1e-12) ** 2)
    try:
        covariance = np.linalg.inv(jac.T @ weights @ jac)
        z_error = math.sqrt(max(covariance[1, 1], 0.0))
    except np.linalg.LinAlgError:
        z_error = psf.plane_um
    if not math.isfinite(z_error) or z_error > psf.plane_um:
        z_error = psf.plane_um

    errors = np.sqrt(np.clip(np.diag(pcov), 0.0, None)) if np.all(np.isfinite(pcov)) else np.full(5, 0.1)
    background = max(popt[4], 0.0)
    low_signal = popt[0] < 5.0 * math.sqrt(background + 1.0)
    if low_signal:
        logger.warning(f"Weak stacked spot: amplitude {popt[0]:.1f} over background {background:.1f}")
    return PositionEstimate(
        float(popt[1]), float(popt[2]), float(best.x[1]),
        max(float(errors[1]), 1e-9), max(float(errors[2]), 1e-9),
        math.hypot(z_error, strain_floor_um) or 1e-9,
        low_signal,
    )

def isolated_atoms(occupancy: np.ndarray, lattice: Optional[LatticeConfig] = None) -> List[SiteIndex]:
    """Occupied sites with no occupied neighbour along the imaging (z) axis."""
    occupancy = np.asarray(occupancy, dtype=bool)
    if lattice is not None and occupancy.shape != tuple(lattice.dims):
        raise StabilizationError(f"Occupancy shape {occupancy.shape} does not match lattice dims {lattice.dims}")
    above = np.zeros_like(occupancy)
    below = np.zeros_like(occupancy)
    above[:, :, :-1] = occupancy[:, :, 1:]
    below[:, :, 1:] = occupancy[:, :, :-1]
    isolated = occupancy & ~above & ~below
    return [SiteIndex(*(int(v) for v in site)) for site in np.argwhere(isolated)]
