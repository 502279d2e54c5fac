#!/usr/bin/env python3
"""
Source Cubes
Synthetic multispectral scenes and grayscale image loading for the experiment harness.
"""

import logging
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from errors import ConfigError
from inverse import SourceCube

logger = logging.getLogger(__name__)

GENERATORS = ('shapes', 'smooth_noise', 'files')


def _disk(shape, centre, radius):
    rows, cols = np.indices(shape)
    return (rows - centre[0]) ** 2 + (cols - centre[1]) ** 2 <= radius ** 2


def _rectangle(shape, corner, size):
    mask = np.zeros(shape, dtype=bool)
    mask[corner[0]:corner[0] + size[0], corner[1]:corner[1] + size[1]] = True
    return mask


def shapes_cube(num_sources: int, image_side: int, seed: int,
                shapes_per_source: int = 3) -> np.ndarray:
    """
    Piecewise-constant scenes of disks and rectangles.

    Each source only covers pixels no earlier source uses, so the sources are spatially
    distinguishable.
    """
    rng = np.random.default_rng(seed)
    n = image_side
    taken = np.zeros((n, n), dtype=bool)
    cube = np.zeros((num_sources, n, n))
    for s in range(num_sources):
        for k in range(shapes_per_source):
            if (k + s) % 2 == 0:
                radius = rng.uniform(n / 16, n / 7)
                centre = rng.uniform(radius, n - radius, size=2)
                mask = _disk((n, n), centre, radius)
            else:
                size = rng.integers(max(2, n // 10), max(3, n // 4), size=2)
                corner = rng.integers(0, n - size + 1)
                mask = _rectangle((n, n), corner, size)
            mask &= ~taken
            cube[s][mask] = rng.uniform(0.5, 1.0)
            taken |= mask
        if not np.any(cube[s]):
            # shapes fully overlapped earlier sources; claim a share of the free pixels
            free = np.flatnonzero(~taken)
            if free.size == 0:
                raise ConfigError(f"image side {n} too small for {num_sources} disjoint sources")
            claim = free[:max(1, free.size // (num_sources - s))]
            cube[s].flat[claim] = 1.0
            taken.flat[claim] = True
    return cube


def smooth_noise_cube(num_sources: int, image_side: int, seed: int,
                      sigma: float = 2.0) -> np.ndarray:
    """Gaussian-smoothed white noise scaled to [0, 1] per source."""
    rng = np.random.default_rng(seed)
    cube = np.empty((num_sources, image_side, image_side))
    for s in range(num_sources):
        field_ = gaussian_filter(rng.standard_normal((image_side, image_side)), sigma, mode='wrap')
        cube[s] = (field_ - field_.min()) / (field_.max() - field_.min())
    return cube


def load_grayscale(path: Path, image_side: int) -> np.ndarray:
    """Load an image as grayscale, resize to image_side² and scale to [0, 1]."""
    try:
        with Image.open(path) as img:
            gray = img.convert('L').resize((image_side, image_side), Image.Resampling.BILINEAR)
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot load source image {path}: {e}") from e
    return np.asarray(gray, dtype=float) / 255.0


def make_source_cube(generator: str, wavelengths: Sequence[float], image_side: int,
                     seed: int = 0, paths: Optional[Sequence[str]] = None) -> SourceCube:
    """
    Build the ground-truth SourceCube.

    Args:
        generator: 'shapes', 'smooth_noise' or 'files'
        wavelengths: One tag per source; fixes S
        image_side: N
        seed: Generator seed (synthetic generators)
        paths: One image path per source ('files')
    """
    num_sources = len(wavelengths)
    if generator == 'shapes':
        images = shapes_cube(num_sources, image_side, seed)
    elif generator == 'smooth_noise':
        images = smooth_noise_cube(num_sources, image_side, seed)
    elif generator == 'files':
        if not paths or len(paths) != num_sources:
            raise ConfigError(f"'files' source needs {num_sources} paths, got {paths}")
        images = np.stack([load_grayscale(Path(p), image_side) for p in paths])
    else:
        raise ConfigError(f"unknown source generator {generator!r}; choose from {GENERATORS}")
    logger.info(f"Source cube: {generator}, S={num_sources}, N={image_side}")
    return SourceCube(images=images, wavelengths=tuple(wavelengths))
