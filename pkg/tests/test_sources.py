"""
Unit tests for sources.py
"""

import pytest
import sys
import os

import numpy as np
from PIL import Image

# Add parent directory to path to import the project modules
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from errors import ConfigError
from sources import make_source_cube, shapes_cube, smooth_noise_cube


class TestSyntheticSources:
    """Generated scenes."""

    def test_shapes_are_disjoint(self):
        """No pixel is lit in two sources."""
        cube = shapes_cube(4, 64, seed=3)
        lit = (cube > 0).sum(axis=0)
        assert lit.max() <= 1
        assert all(cube[s].any() for s in range(4))

    def test_shapes_value_range(self):
        """Intensities lie in [0, 1]."""
        cube = shapes_cube(2, 32, seed=1)
        assert cube.min() >= 0.0 and cube.max() <= 1.0

    def test_seeded(self):
        """The same seed gives the same scene."""
        np.testing.assert_array_equal(shapes_cube(2, 32, 5), shapes_cube(2, 32, 5))
        assert not np.array_equal(smooth_noise_cube(2, 32, 5), smooth_noise_cube(2, 32, 6))

    def test_smooth_noise_scaled(self):
        """Each smooth-noise source spans exactly [0, 1]."""
        cube = smooth_noise_cube(3, 32, seed=0)
        np.testing.assert_allclose(cube.min(axis=(1, 2)), 0.0)
        np.testing.assert_allclose(cube.max(axis=(1, 2)), 1.0)

    def test_make_source_cube(self):
        """Wavelength tags fix S."""
        source = make_source_cube('shapes', (1e-8, 2e-8, 3e-8), 32, seed=0)
        assert source.num_sources == 3 and source.image_side == 32
        assert source.wavelengths == (1e-8, 2e-8, 3e-8)

    def test_unknown_generator(self):
        """Unknown generators are a configuration error."""
        with pytest.raises(ConfigError):
            make_source_cube('plasma', (1e-8,), 16)


class TestFileSources:
    """Grayscale images from disk."""

    def test_loads_and_resizes(self, tmp_path):
        """Images are converted to grayscale, resized and scaled to [0, 1]."""
        paths = []
        for i, color in enumerate([(255, 255, 255), (0, 0, 0)]):
            path = tmp_path / f'source_{i}.png'
            Image.new('RGB', (40, 20), color).save(path)
            paths.append(str(path))
        source = make_source_cube('files', (1e-8, 2e-8), 16, paths=paths)
        assert source.images.shape == (2, 16, 16)
        np.testing.assert_allclose(source.images[0], 1.0)
        np.testing.assert_allclose(source.images[1], 0.0)

    def test_wrong_number_of_paths(self, tmp_path):
        """One path per source is required."""
        with pytest.raises(ConfigError):
            make_source_cube('files', (1e-8, 2e-8), 16, paths=['only_one.png'])

    def test_unreadable_file(self, tmp_path):
        """A missing image is a configuration error."""
        with pytest.raises(ConfigError):
            make_source_cube('files', (1e-8,), 16, paths=[str(tmp_path / 'missing.png')])


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
