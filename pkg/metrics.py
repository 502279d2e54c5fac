#!/usr/bin/env python3
"""
Image Quality Metrics
SSIM, SSE and PSNR for reconstructions, plus the λ search that picks the
regularization weight maximizing focal-plane reconstruction SSIM.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.signal import convolve2d

from errors import InvalidArgumentError, LambdaSearchError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SsimParams:
    """
    SSIM window and stabilizing constants.

    Args:
        window: Odd side of the Gaussian window
        window_sigma: Gaussian standard deviation (pixels)
        k1: Luminance constant factor
        k2: Contrast constant factor
        dynamic_range: L; None takes max - min of the reference image
    """
    window: int = 11
    window_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: Optional[float] = None

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise InvalidArgumentError(f"window must be odd and >= 3, got {self.window}")
        if not self.window_sigma > 0:
            raise InvalidArgumentError(f"window_sigma must be > 0, got {self.window_sigma}")
        if not (self.k1 > 0 and self.k2 > 0):
            raise InvalidArgumentError(f"k1 and k2 must be > 0, got {self.k1}, {self.k2}")
        if self.dynamic_range is not None and not self.dynamic_range > 0:
            raise InvalidArgumentError(f"dynamic_range must be > 0, got {self.dynamic_range}")


def _check_pair(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    """Normalized size×size Gaussian weights."""
    x = np.arange(size) - size // 2
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    window = np.outer(g, g)
    return window / window.sum()


def ssim(reference: np.ndarray, test: np.ndarray, params: Optional[SsimParams] = None) -> float:
    """
    Mean Gaussian-weighted SSIM over the valid (unpadded) window positions.

    Args:
        reference: Ground-truth N×N image; sets the dynamic range when params leave it open
        test: Image under evaluation
        params: Window and constants

    Returns:
        SSIM in [-1, 1]
    """
    params = params or SsimParams()
    reference, test = _check_pair(reference, test)
    if reference.ndim != 2:
        raise InvalidArgumentError(f"ssim expects 2D images, got shape {reference.shape}")
    if min(reference.shape) < params.window:
        raise InvalidArgumentError(
            f"image {reference.shape} smaller than the {params.window}x{params.window} window")

    dynamic_range = params.dynamic_range
    if dynamic_range is None:
        dynamic_range = float(reference.max() - reference.min())
    if not dynamic_range > 0:
        raise InvalidArgumentError("dynamic range is zero (constant reference image)")
    c1 = (params.k1 * dynamic_range) ** 2
    c2 = (params.k2 * dynamic_range) ** 2

    window = gaussian_window(params.window, params.window_sigma)

    def filt(image):
        return convolve2d(image, window, mode='valid')

    mu_x = filt(reference)
    mu_y = filt(test)
    var_x = filt(reference * reference) - mu_x * mu_x
    var_y = filt(test * test) - mu_y * mu_y
    cov_xy = filt(reference * test) - mu_x * mu_y

    numerator = (2 * mu_x * mu_y + c1) * (2 * cov_xy + c2)
    denominator = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(numerator / denominator))


def source_ssims(reference_cube: np.ndarray, test_cube: np.ndarray,
                 params: Optional[SsimParams] = None) -> List[float]:
    """SSIM of every source image, each against its own reference."""
    reference_cube, test_cube = _check_pair(reference_cube, test_cube)
    if reference_cube.ndim != 3:
        raise InvalidArgumentError(f"expected S x N x N cubes, got shape {reference_cube.shape}")
    return [ssim(ref, img, params) for ref, img in zip(reference_cube, test_cube)]


def mean_ssim(reference_cube: np.ndarray, test_cube: np.ndarray,
              params: Optional[SsimParams] = None) -> float:
    """Multi-source score: mean SSIM over the S reconstructions."""
    return float(np.mean(source_ssims(reference_cube, test_cube, params)))


def sse(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _check_pair(a, b)
    return float(np.sum((a - b) ** 2))


def psnr(a: np.ndarray, b: np.ndarray, peak: float) -> float:
    """10·log10(peak²·count / sse); inf for identical inputs."""
    if not peak > 0:
        raise InvalidArgumentError(f"peak must be > 0, got {peak}")
    error = sse(a, b)
    if error == 0:
        return math.inf
    return 10 * math.log10(peak ** 2 * np.asarray(a).size / error)


def source_errors(reference_cube: np.ndarray,
                  test_cube: np.ndarray) -> Tuple[List[float], List[float]]:
    """Per-source SSE and PSNR, the peak being each reference's max − min."""
    reference_cube, test_cube = _check_pair(reference_cube, test_cube)
    if reference_cube.ndim != 3:
        raise InvalidArgumentError(f"expected S x N x N cubes, got shape {reference_cube.shape}")
    errors = [sse(ref, img) for ref, img in zip(reference_cube, test_cube)]
    peaks = [float(ref.max() - ref.min()) for ref in reference_cube]
    return errors, [psnr(ref, img, peak) for ref, img, peak in zip(reference_cube, test_cube, peaks)]


def default_lambda_grid(count: int = 20, low: float = 1e-4, high: float = 1e2) -> np.ndarray:
    """`count` log-spaced λ values on [low, high]."""
    if count < 1 or not 0 < low <= high:
        raise InvalidArgumentError(f"invalid λ grid: count={count}, low={low}, high={high}")
    return np.logspace(math.log10(low), math.log10(high), count)


class LambdaSearchResult(NamedTuple):
    best_lambda: float
    grid: np.ndarray
    scores: np.ndarray

    @property
    def best_index(self) -> int:
        return int(np.flatnonzero(self.grid == self.best_lambda)[0])

    @property
    def on_boundary(self) -> bool:
        return self.grid.size > 1 and self.best_index in (0, self.grid.size - 1)


def lambda_search(closure: Callable[[float], float],
                  grid: Optional[Sequence[float]] = None) -> LambdaSearchResult:
    """
    Evaluate `closure(λ)` on every grid value and keep the argmax.

    Ties go to the lowest λ; NaN scores never win. A failing closure raises
    LambdaSearchError carrying the offending λ.
    """
    grid = default_lambda_grid() if grid is None else np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise InvalidArgumentError("λ grid must be a non-empty 1D sequence")
    if np.any(~np.isfinite(grid)) or np.any(grid <= 0):
        raise InvalidArgumentError(f"λ grid values must be finite and > 0, got {grid.tolist()}")

    order = np.argsort(grid, kind='stable')
    grid = grid[order]
    scores = np.empty(grid.size)
    for i, lam in enumerate(grid):
        try:
            scores[i] = float(closure(float(lam)))
        except Exception as e:
            raise LambdaSearchError(f"λ search failed at λ={lam:.4e}: {e}", float(lam)) from e
        logger.debug(f"λ={lam:.4e}: score {scores[i]:.6f}")

    ranked = np.where(np.isnan(scores), -np.inf, scores)
    best = int(np.argmax(ranked))
    result = LambdaSearchResult(float(grid[best]), grid, scores)
    logger.info(f"✅ Best λ = {result.best_lambda:.4e} (score {scores[best]:.6f})")
    if result.on_boundary:
        logger.warning(f"⚠️  Best λ sits on the edge of the grid [{grid[0]:.1e}, {grid[-1]:.1e}]")
    return result


def summarize_seeds(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value) over seeds."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise InvalidArgumentError("no values to summarize")
    spread = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
    return float(np.mean(values)), spread
