"""
Unit tests for optics.py
"""

import pytest
import sys
import os

import numpy as np

# Add parent directory to path to import the project modules
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from errors import InvalidArgumentError
from optics import (Psf, SieveParams, SpectralSetup, brute_force_psf, default_pixel_pitch,
                    depth_of_focus, focal_length, generate_psf, generate_psf_stack,
                    wavelengths_for_separation)

SIEVE = SieveParams()
WAVELENGTH = 33.4e-9
PITCH = 2e-6


class TestLensGeometry:
    """Focal length, depth of focus and defaults."""

    def test_focal_length(self):
        """f = D·Δr/λ."""
        assert focal_length(SIEVE, WAVELENGTH) == pytest.approx(10e-3 * 5e-6 / 33.4e-9, rel=1e-12)

    def test_focal_length_decreases_with_wavelength(self):
        """Longer wavelengths focus closer to the lens."""
        assert focal_length(SIEVE, 33.5e-9) < focal_length(SIEVE, 33.4e-9)

    def test_depth_of_focus(self):
        """DOF = 2·Δr²/λ."""
        assert depth_of_focus(SIEVE, WAVELENGTH) == pytest.approx(2 * 25e-12 / 33.4e-9, rel=1e-12)

    def test_desk_wavelengths_are_about_three_dof_apart(self):
        """The default pair of wavelengths sits about 3 DOF apart."""
        gap = focal_length(SIEVE, 33.4e-9) - focal_length(SIEVE, 33.5e-9)
        assert gap / depth_of_focus(SIEVE, 33.4e-9) == pytest.approx(3.0, abs=0.05)

    def test_default_pixel_pitch(self):
        """Default pitch is 0.4·Δr."""
        assert default_pixel_pitch(SIEVE) == pytest.approx(2e-6)

    @pytest.mark.parametrize('wavelength', [0.0, -1e-9])
    def test_non_positive_wavelength(self, wavelength):
        """Non-positive wavelengths are rejected."""
        with pytest.raises(InvalidArgumentError):
            focal_length(SIEVE, wavelength)

    def test_invalid_sieve(self):
        """Zone width must be well below the diameter."""
        with pytest.raises(InvalidArgumentError):
            SieveParams(diameter=1e-3, smallest_zone_width=2e-4)
        with pytest.raises(InvalidArgumentError):
            SieveParams(pupil_samples=63)

    def test_spectral_setup_must_increase(self):
        """Wavelengths must be strictly increasing."""
        with pytest.raises(InvalidArgumentError):
            SpectralSetup((33.5e-9, 33.4e-9))
        with pytest.raises(InvalidArgumentError):
            SpectralSetup(())
        assert SpectralSetup([33.4e-9, 33.5e-9]).count == 2


class TestGeneratePsf:
    """Defocused-pupil PSF synthesis."""

    def test_unit_sum(self):
        """Kernels are normalized to unit sum."""
        f = focal_length(SIEVE, WAVELENGTH)
        for offset in (-2.0, 0.0, 3.0):
            d = f + offset * depth_of_focus(SIEVE, WAVELENGTH)
            psf = generate_psf(SIEVE, WAVELENGTH, d, 31, PITCH)
            assert psf.grid.sum() == pytest.approx(1.0, abs=1e-9)
            assert psf.grid.shape == (31, 31)
            assert np.all(psf.grid >= 0)

    def test_rotation_symmetry(self):
        """A circular aperture gives a PSF invariant under 90° rotation."""
        d = focal_length(SIEVE, WAVELENGTH) + 1.5 * depth_of_focus(SIEVE, WAVELENGTH)
        grid = generate_psf(SIEVE, WAVELENGTH, d, 31, PITCH).grid
        np.testing.assert_allclose(np.rot90(grid), grid, rtol=0, atol=1e-9 * grid.max())

    def test_peak_at_focus(self):
        """Over a 21-plane scan around f(λ) the peak is highest at the focal plane."""
        f = focal_length(SIEVE, WAVELENGTH)
        dof = depth_of_focus(SIEVE, WAVELENGTH)
        distances = f + np.linspace(-2, 2, 21) * dof
        peaks = [generate_psf(SIEVE, WAVELENGTH, d, 31, PITCH).grid.max() for d in distances]
        assert int(np.argmax(peaks)) == 10

    def test_defocus_halves_peak(self):
        """Three DOF past focus the peak falls below half its in-focus value."""
        f = focal_length(SIEVE, WAVELENGTH)
        in_focus = generate_psf(SIEVE, WAVELENGTH, f, 31, PITCH).grid.max()
        defocused = generate_psf(SIEVE, WAVELENGTH, f + 3 * depth_of_focus(SIEVE, WAVELENGTH),
                                 31, PITCH).grid.max()
        assert defocused < 0.5 * in_focus

    def test_matches_direct_summation(self):
        """The FFT path agrees with explicit exponential sums."""
        sieve = SieveParams(pupil_samples=128)
        d = focal_length(sieve, WAVELENGTH) + depth_of_focus(sieve, WAVELENGTH)
        fast = generate_psf(sieve, WAVELENGTH, d, 15, PITCH).grid
        direct = brute_force_psf(sieve, WAVELENGTH, d, 15, PITCH)
        np.testing.assert_allclose(fast, direct, rtol=1e-8, atol=1e-12)

    def test_energy_outside_flag(self):
        """A tiny crop of a strongly defocused PSF is flagged."""
        d = focal_length(SIEVE, WAVELENGTH) + 5 * depth_of_focus(SIEVE, WAVELENGTH)
        psf = generate_psf(SIEVE, WAVELENGTH, d, 3, PITCH)
        assert psf.warning
        assert 0.05 < psf.energy_outside < 1.0

    def test_in_focus_crop_not_flagged(self):
        """The in-focus PSF keeps almost all of its energy in a 63-pixel crop."""
        psf = generate_psf(SIEVE, WAVELENGTH, focal_length(SIEVE, WAVELENGTH), 63, PITCH)
        assert not psf.warning

    def test_pitch_too_coarse(self):
        """A pitch whose pupil grid cannot hold the aperture is refused."""
        with pytest.raises(InvalidArgumentError):
            generate_psf(SIEVE, WAVELENGTH, focal_length(SIEVE, WAVELENGTH), 31, 10e-6)

    @pytest.mark.parametrize('kernel_size', [0, 30, 1001])
    def test_bad_kernel_size(self, kernel_size):
        """Kernel size must be odd and fit the pupil grid."""
        with pytest.raises(InvalidArgumentError):
            generate_psf(SIEVE, WAVELENGTH, 1.0, kernel_size, PITCH)

    def test_bad_distance(self):
        """Plane distance must be positive."""
        with pytest.raises(InvalidArgumentError):
            generate_psf(SIEVE, WAVELENGTH, 0.0, 31, PITCH)


class TestPsfStack:
    """Stacks and wavelength placement."""

    def test_stack_layout(self):
        """The stack is indexed [plane][source]."""
        sieve = SieveParams(pupil_samples=128)
        setup = SpectralSetup((33.4e-9, 33.5e-9))
        f = focal_length(sieve, 33.4e-9)
        distances = [f - 1e-3, f, f + 1e-3]
        stack = generate_psf_stack(sieve, setup, distances, 15, PITCH)
        assert len(stack) == 3 and all(len(row) == 2 for row in stack)
        assert isinstance(stack[0][0], Psf)
        assert stack[1][0].plane_distance == f
        assert stack[2][1].wavelength == 33.5e-9

    def test_wavelengths_for_separation(self):
        """Adjacent foci sit sep·DOF(base) apart."""
        setup = wavelengths_for_separation(SIEVE, 33.4e-9, 3, 2.5)
        assert setup.wavelengths[0] == 33.4e-9
        dof = depth_of_focus(SIEVE, 33.4e-9)
        focals = [focal_length(SIEVE, w) for w in setup.wavelengths]
        for a, b in zip(focals, focals[1:]):
            assert (a - b) / dof == pytest.approx(2.5, rel=1e-9)

    def test_separation_too_large(self):
        """Foci that would land behind the lens are refused."""
        with pytest.raises(InvalidArgumentError):
            wavelengths_for_separation(SIEVE, 33.4e-9, 2, 5000.0)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
