#!/usr/bin/env python3
"""
Diffractive Lens Optics
Wavelength- and distance-dependent point spread functions for a photon sieve,
modelled as a thin diffractive lens with focal length f(λ) = D·Δr/λ.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from errors import InvalidArgumentError

logger = logging.getLogger(__name__)

# Share of PSF energy allowed outside the cropped kernel before the Psf is flagged
ENERGY_WARNING_FRACTION = 0.05


@dataclass(frozen=True)
class SieveParams:
    """
    Lens geometry.

    Args:
        diameter: Lens diameter D (m)
        smallest_zone_width: Outermost zone width Δr (m)
        pupil_samples: Side length of the square pupil sampling grid
    """
    diameter: float = 10e-3
    smallest_zone_width: float = 5e-6
    pupil_samples: int = 256

    def __post_init__(self):
        if not self.diameter > 0:
            raise InvalidArgumentError(f"diameter must be > 0, got {self.diameter}")
        if not self.smallest_zone_width > 0:
            raise InvalidArgumentError(
                f"smallest_zone_width must be > 0, got {self.smallest_zone_width}")
        if not self.smallest_zone_width < self.diameter / 10:
            raise InvalidArgumentError(
                f"smallest_zone_width ({self.smallest_zone_width}) must be below diameter/10")
        if int(self.pupil_samples) != self.pupil_samples or self.pupil_samples < 64 \
                or self.pupil_samples % 2:
            raise InvalidArgumentError(
                f"pupil_samples must be an even integer >= 64, got {self.pupil_samples}")


@dataclass(frozen=True)
class SpectralSetup:
    """The S source wavelengths (m), strictly increasing."""
    wavelengths: Tuple[float, ...]

    def __post_init__(self):
        wavelengths = tuple(float(w) for w in self.wavelengths)
        object.__setattr__(self, 'wavelengths', wavelengths)
        if len(wavelengths) < 1:
            raise InvalidArgumentError("at least one wavelength is required")
        if any(w <= 0 for w in wavelengths):
            raise InvalidArgumentError(f"wavelengths must be positive, got {wavelengths}")
        if any(b <= a for a, b in zip(wavelengths, wavelengths[1:])):
            raise InvalidArgumentError(f"wavelengths must be strictly increasing, got {wavelengths}")

    @property
    def count(self) -> int:
        return len(self.wavelengths)


@dataclass(frozen=True, eq=False)
class Psf:
    """
    Centre-origin, unit-sum blur kernel for one (plane, wavelength) pair.

    `energy_outside` is the share of the full-field PSF energy that fell outside
    the P×P crop; `warning` flags crops that lost more than 5%.
    """
    grid: np.ndarray
    pixel_pitch: float
    plane_distance: float
    wavelength: float
    energy_outside: float = 0.0

    @property
    def warning(self) -> bool:
        return self.energy_outside > ENERGY_WARNING_FRACTION

    @property
    def size(self) -> int:
        return self.grid.shape[0]


def _check_wavelength(wavelength: float) -> None:
    if not wavelength > 0:
        raise InvalidArgumentError(f"wavelength must be > 0, got {wavelength}")


def focal_length(sieve: SieveParams, wavelength: float) -> float:
    """First-order focal length f(λ) = D·Δr/λ."""
    _check_wavelength(wavelength)
    return sieve.diameter * sieve.smallest_zone_width / wavelength


def depth_of_focus(sieve: SieveParams, wavelength: float) -> float:
    """Full-width depth of focus 2·Δr²/λ."""
    _check_wavelength(wavelength)
    return 2 * sieve.smallest_zone_width ** 2 / wavelength


def default_pixel_pitch(sieve: SieveParams) -> float:
    """Pitch giving an in-focus main lobe (2.44·Δr wide) of about six pixels."""
    return 0.4 * sieve.smallest_zone_width


def defocus_coefficient(sieve: SieveParams, wavelength: float, plane_distance: float) -> float:
    """Quadratic pupil phase coefficient (π/λ)·(1/d − 1/f(λ)) in rad/m²."""
    f = focal_length(sieve, wavelength)
    return (math.pi / wavelength) * (1.0 / plane_distance - 1.0 / f)


def _pupil(sieve: SieveParams, wavelength: float, plane_distance: float,
           pixel_pitch: float) -> np.ndarray:
    """Sampled generalized pupil, centre at index pupil_samples // 2."""
    q = sieve.pupil_samples
    # Pupil-plane field of view that maps the DFT grid onto pixel_pitch at the detector
    extent = wavelength * plane_distance / pixel_pitch
    if extent <= sieve.diameter:
        raise InvalidArgumentError(
            f"pixel_pitch {pixel_pitch:.3e} m too coarse for λ={wavelength:.4e} m at "
            f"d={plane_distance:.6f} m: the aperture does not fit the pupil grid")
    spacing = extent / q
    coords = (np.arange(q) - q // 2) * spacing
    r2 = coords[None, :] ** 2 + coords[:, None] ** 2
    aperture = r2 <= (sieve.diameter / 2) ** 2
    alpha = defocus_coefficient(sieve, wavelength, plane_distance)
    return np.where(aperture, np.exp(1j * alpha * r2), 0.0)


def _check_psf_args(sieve: SieveParams, plane_distance: float, kernel_size: int,
                    pixel_pitch: float) -> None:
    if not plane_distance > 0:
        raise InvalidArgumentError(f"plane_distance must be > 0, got {plane_distance}")
    if not pixel_pitch > 0:
        raise InvalidArgumentError(f"pixel_pitch must be > 0, got {pixel_pitch}")
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise InvalidArgumentError(f"kernel_size must be odd, got {kernel_size}")
    if kernel_size > sieve.pupil_samples:
        raise InvalidArgumentError(
            f"kernel_size {kernel_size} exceeds pupil_samples {sieve.pupil_samples}")


def generate_psf(sieve: SieveParams, wavelength: float, plane_distance: float,
                 kernel_size: int, pixel_pitch: float) -> Psf:
    """
    Incoherent defocused-pupil PSF.

    The squared magnitude of the 2D DFT of P(r)·exp(i·(π/λ)(1/d − 1/f)·r²),
    centre-cropped to kernel_size² and normalized to unit sum.

    Args:
        sieve: Lens geometry
        wavelength: Source wavelength (m)
        plane_distance: Detector distance from the lens (m)
        kernel_size: Odd side length P of the returned kernel
        pixel_pitch: Detector pixel pitch (m)

    Returns:
        Psf with the energy lost to the crop recorded
    """
    _check_wavelength(wavelength)
    _check_psf_args(sieve, plane_distance, kernel_size, pixel_pitch)

    pupil = _pupil(sieve, wavelength, plane_distance, pixel_pitch)
    field_ = np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(pupil)))
    intensity = np.abs(field_) ** 2

    centre = sieve.pupil_samples // 2
    half = kernel_size // 2
    crop = intensity[centre - half:centre + half + 1, centre - half:centre + half + 1]
    inside = crop.sum()
    energy_outside = float(1.0 - inside / intensity.sum())

    psf = Psf(grid=crop / inside, pixel_pitch=pixel_pitch, plane_distance=plane_distance,
              wavelength=wavelength, energy_outside=max(energy_outside, 0.0))
    if psf.warning:
        logger.warning(f"⚠️  PSF at d={plane_distance:.6f} m, λ={wavelength:.4e} m loses "
                       f"{energy_outside:.1%} of its energy outside the {kernel_size}x{kernel_size} crop")
    return psf


def brute_force_psf(sieve: SieveParams, wavelength: float, plane_distance: float,
                    kernel_size: int, pixel_pitch: float) -> np.ndarray:
    """
    Reference PSF by direct summation of the pupil integral over the crop.

    Evaluates Σ_n P(x_n)·exp(−2πi·u·x_n/(λd)) at every output pixel with explicit
    exponential matrices instead of an FFT; used to cross-check generate_psf.
    """
    _check_wavelength(wavelength)
    _check_psf_args(sieve, plane_distance, kernel_size, pixel_pitch)
    q = sieve.pupil_samples
    pupil = _pupil(sieve, wavelength, plane_distance, pixel_pitch)
    n = np.arange(q) - q // 2
    k = np.arange(kernel_size) - kernel_size // 2
    kernel = np.exp(-2j * np.pi * np.outer(k, n) / q)
    field_ = kernel @ pupil @ kernel.T
    intensity = np.abs(field_) ** 2
    return intensity / intensity.sum()


def generate_psf_stack(sieve: SieveParams, setup: SpectralSetup,
                       plane_distances: Sequence[float], kernel_size: int,
                       pixel_pitch: float) -> List[List[Psf]]:
    """PSFs for every (candidate plane, wavelength) pair, indexed [c][s]."""
    stack = []
    flagged = 0
    for distance in plane_distances:
        row = [generate_psf(sieve, wl, distance, kernel_size, pixel_pitch)
               for wl in setup.wavelengths]
        flagged += sum(psf.warning for psf in row)
        stack.append(row)
    logger.info(f"Generated {len(stack) * setup.count} PSFs "
                f"({len(stack)} planes x {setup.count} wavelengths, {flagged} flagged)")
    return stack


def wavelengths_for_separation(sieve: SieveParams, base_wavelength: float, count: int,
                               separation_dof: float) -> SpectralSetup:
    """
    Place `count` wavelengths so adjacent focal planes sit `separation_dof` DOFs apart.

    DOF is measured at the base (shortest) wavelength; longer wavelengths focus closer.
    """
    if count < 1:
        raise InvalidArgumentError(f"count must be >= 1, got {count}")
    if not separation_dof > 0:
        raise InvalidArgumentError(f"separation_dof must be > 0, got {separation_dof}")
    f1 = focal_length(sieve, base_wavelength)
    step = separation_dof * depth_of_focus(sieve, base_wavelength)
    focals = [f1 - i * step for i in range(count)]
    if focals[-1] <= 0:
        raise InvalidArgumentError(
            f"{count} components separated by {separation_dof} DOF do not fit in front of the lens")
    wavelengths = [base_wavelength] + [sieve.diameter * sieve.smallest_zone_width / f
                                       for f in focals[1:]]
    return SpectralSetup(tuple(wavelengths))
