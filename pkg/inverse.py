#!/usr/bin/env python3
"""
Expected-Error Cost and MAP Reconstruction
Fast per-frequency path on the diagonalized system, a dense oracle that builds the
block-circulant matrices explicitly, and the measurement simulator.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg

from errors import InvalidArgumentError, InvalidStateError, SingularSystemError
from optics import Psf
from spectral import (GramField, PriorSpec, TransferCube, assemble_gram, build_transfer,
                      empty_gram, gram_update, hermitize, plane_contribution)

logger = logging.getLogger(__name__)

# Largest N²·S for which the dense oracle will build its matrices
DENSE_SIZE_LIMIT = 2048


@dataclass(frozen=True, eq=False)
class SourceCube:
    """
    S×N×N real source images with their wavelength tags.

    `imag_residual` is set on reconstructions: the largest imaginary part discarded
    when taking the real part, relative to the data norm.
    """
    images: np.ndarray
    wavelengths: Tuple[float, ...] = ()
    imag_residual: float = 0.0

    def __post_init__(self):
        images = np.asarray(self.images, dtype=float)
        object.__setattr__(self, 'images', images)
        object.__setattr__(self, 'wavelengths', tuple(float(w) for w in self.wavelengths))
        if images.ndim != 3 or images.shape[1] != images.shape[2]:
            raise InvalidArgumentError(f"images must be S x N x N, got shape {images.shape}")
        if not np.all(np.isfinite(images)):
            raise InvalidArgumentError("source images contain non-finite values")
        if self.wavelengths and len(self.wavelengths) != images.shape[0]:
            raise InvalidArgumentError(
                f"{len(self.wavelengths)} wavelength tags for {images.shape[0]} sources")

    @property
    def num_sources(self) -> int:
        return self.images.shape[0]

    @property
    def image_side(self) -> int:
        return self.images.shape[1]


@dataclass(frozen=True, eq=False)
class MeasurementSet:
    """M×N×N detector images and the candidate plane each was taken at."""
    images: np.ndarray
    plane_index: Tuple[int, ...]
    noise_seed: int = 0
    noise_variance: float = 0.0

    def __post_init__(self):
        images = np.asarray(self.images, dtype=float)
        object.__setattr__(self, 'images', images)
        object.__setattr__(self, 'plane_index', tuple(int(p) for p in self.plane_index))
        if images.ndim != 3 or images.shape[1] != images.shape[2]:
            raise InvalidArgumentError(f"images must be M x N x N, got shape {images.shape}")
        if len(self.plane_index) < 1:
            raise InvalidArgumentError("a measurement set needs at least one measurement")
        if len(self.plane_index) != images.shape[0]:
            raise InvalidArgumentError(
                f"{len(self.plane_index)} plane indices for {images.shape[0]} images")
        if min(self.plane_index) < 0:
            raise InvalidArgumentError(f"plane indices must be >= 0, got {self.plane_index}")

    @property
    def count(self) -> int:
        return len(self.plane_index)


@dataclass(frozen=True)
class NoiseModel:
    """
    Regularization weight and simulated noise level.

    Args:
        lambda_reg: λ > 0, regularization weight of the cost and MAP solves
        snr_db: When set, simulated noise variance is mean clean power / 10^(snr/10);
            inf disables noise. When None the variance is 1/λ.
    """
    lambda_reg: float
    snr_db: Optional[float] = None

    def __post_init__(self):
        if not (self.lambda_reg > 0 and math.isfinite(self.lambda_reg)):
            raise InvalidArgumentError(f"lambda_reg must be finite and > 0, got {self.lambda_reg}")
        if self.snr_db is not None and (math.isnan(self.snr_db) or self.snr_db == -math.inf):
            raise InvalidArgumentError(f"snr_db must be finite or +inf, got {self.snr_db}")


def expand_config(multiplicity: Sequence[int]) -> Tuple[int, ...]:
    """Multiplicity vector -> ascending tuple of plane indices, one per copy."""
    counts = np.asarray(multiplicity, dtype=np.int64)
    if counts.ndim != 1 or np.any(counts < 0):
        raise InvalidArgumentError(f"multiplicity must be a vector of counts >= 0, got {counts}")
    return tuple(int(c) for c in np.repeat(np.arange(counts.size), counts))


def count_planes(plane_index: Sequence[int], num_planes: int) -> np.ndarray:
    """Plane indices -> multiplicity vector of length num_planes."""
    indices = np.asarray(plane_index, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= num_planes):
        raise InvalidArgumentError(
            f"plane indices {indices.tolist()} out of range for {num_planes} planes")
    return np.bincount(indices, minlength=num_planes).astype(np.int64)


def _check_source(source: SourceCube, transfer: TransferCube) -> None:
    if source.num_sources != transfer.num_sources or source.image_side != transfer.image_side:
        raise InvalidArgumentError(
            f"source cube {source.images.shape} does not match transfer "
            f"(S={transfer.num_sources}, N={transfer.image_side})")
    if source.wavelengths and transfer.wavelengths and \
            not np.allclose(source.wavelengths, transfer.wavelengths, rtol=1e-12, atol=0):
        raise InvalidArgumentError(
            f"source wavelengths {source.wavelengths} differ from transfer {transfer.wavelengths}")


def forward_images(source: SourceCube, transfer: TransferCube,
                   planes: Sequence[int]) -> np.ndarray:
    """Noiseless measurements Σ_s IDFT(Ã_{m,s} ⊙ DFT(x_s)), one per plane index."""
    _check_source(source, transfer)
    spectra = np.fft.fft2(source.images)
    n = transfer.image_side
    clean = np.empty((len(planes), n, n))
    for m, plane in enumerate(planes):
        if not 0 <= plane < transfer.num_planes:
            raise InvalidArgumentError(f"plane index {plane} out of range")
        clean[m] = np.fft.ifft2((transfer.values[plane] * spectra).sum(axis=0)).real
    return clean


def noise_variance(clean: np.ndarray, noise: NoiseModel) -> float:
    if noise.snr_db is None:
        return 1.0 / noise.lambda_reg
    if math.isinf(noise.snr_db) and noise.snr_db > 0:
        return 0.0
    power = float(np.mean(clean ** 2))
    return power / 10 ** (noise.snr_db / 10)


def simulate_measurements(source: SourceCube, transfer: TransferCube,
                          config: Sequence[int], noise: NoiseModel,
                          seed: int) -> MeasurementSet:
    """
    Simulate detector images for a measurement configuration.

    Args:
        source: Ground-truth source cube
        transfer: Candidate-plane transfer functions
        config: Multiplicity vector over the candidate planes
        noise: Noise level (snr_db, or 1/λ when snr_db is None)
        seed: Seed of the Gaussian noise generator

    Returns:
        MeasurementSet with one image per plane copy, planes in ascending order
    """
    counts = np.asarray(config, dtype=np.int64)
    if counts.shape != (transfer.num_planes,):
        raise InvalidArgumentError(
            f"config needs {transfer.num_planes} multiplicities, got shape {counts.shape}")
    planes = expand_config(counts)
    if not planes:
        raise InvalidArgumentError("config must contain at least one measurement")

    clean = forward_images(source, transfer, planes)
    variance = noise_variance(clean, noise)
    images = clean
    if variance > 0:
        rng = np.random.default_rng(seed)
        images = clean + math.sqrt(variance) * rng.standard_normal(clean.shape)
    logger.debug(f"Simulated {len(planes)} measurements, noise variance {variance:.4e}")
    return MeasurementSet(images=images, plane_index=planes, noise_seed=int(seed),
                          noise_variance=variance)


def _frequency_of(index: int, image_side: int) -> Tuple[int, int]:
    row, col = divmod(int(index), image_side)
    k = np.fft.fftfreq(image_side, 1.0 / image_side)
    return int(k[row]), int(k[col])


def _singular(index: int, image_side: int, reason: str) -> SingularSystemError:
    freq = _frequency_of(index, image_side)
    return SingularSystemError(
        f"regularized block at frequency index {index} (ky, kx)={freq} {reason}",
        frequency_index=int(index), frequency=freq)


def _pivoted_inverse(block: np.ndarray, index: int, image_side: int) -> np.ndarray:
    """Inverse of one Hermitian block through a symmetric-pivoted LDL^H factorization."""
    lu, d, _ = scipy.linalg.ldl(block, lower=True, hermitian=True)
    pivots = np.linalg.eigvalsh(d)
    scale = max(float(np.abs(np.diag(block)).max()), np.finfo(float).tiny)
    if pivots.min() <= block.shape[0] * np.finfo(float).eps * scale:
        raise _singular(index, image_side, "is not positive definite")
    lu_inv = np.linalg.inv(lu)
    return lu_inv.conj().T @ np.linalg.inv(d) @ lu_inv


def _closed_form_blocks(regularized: np.ndarray,
                        with_inverse: bool) -> Optional[Tuple[np.ndarray, Optional[np.ndarray]]]:
    """
    tr(R⁻¹) and R⁻¹ for 1×1 and 2×2 blocks by the adjugate formula.

    Returns None when some block is not positive definite.
    """
    s = regularized.shape[1]
    if s == 1:
        r = regularized[:, 0, 0].real
        if not np.all(r > 0):
            return None
        traces = 1.0 / r
        return traces, traces.reshape(-1, 1, 1).astype(complex) if with_inverse else None

    a = regularized[:, 0, 0].real
    d = regularized[:, 1, 1].real
    b = regularized[:, 0, 1]
    det = a * d - (b.real ** 2 + b.imag ** 2)
    if not (np.all(a > 0) and np.all(det > 0)):
        return None
    traces = (a + d) / det
    if not with_inverse:
        return traces, None
    inverse = np.empty_like(regularized)
    inverse[:, 0, 0] = d / det
    inverse[:, 1, 1] = a / det
    inverse[:, 0, 1] = -b / det
    inverse[:, 1, 0] = -np.conj(b) / det
    return traces, inverse


def _inverse_blocks(regularized: np.ndarray, image_side: int,
                    with_inverse: bool) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Per-frequency tr(R⁻¹) and, optionally, R⁻¹ itself.

    S ≤ 2 uses the closed form; larger blocks go through batched Cholesky. When any
    block fails, every block is factored on its own and the failing ones go through
    the pivoted fallback.
    """
    finite = np.all(np.isfinite(regularized), axis=(1, 2))
    if not np.all(finite):
        raise _singular(int(np.argmin(finite)), image_side, "has non-finite entries")

    if regularized.shape[1] <= 2:
        solved = _closed_form_blocks(regularized, with_inverse)
        if solved is not None:
            return solved
        logger.debug("Closed-form inverse hit a non-positive block; factoring blocks one at a time")
        return _blockwise_inverse(regularized, image_side, with_inverse)

    try:
        chol = np.linalg.cholesky(regularized)
    except np.linalg.LinAlgError:
        logger.debug("Batched Cholesky failed; factoring blocks one at a time")
    else:
        chol_inv = np.linalg.inv(chol)
        traces = np.sum(np.abs(chol_inv) ** 2, axis=(1, 2))
        inverse = np.conj(np.swapaxes(chol_inv, -1, -2)) @ chol_inv if with_inverse else None
        return traces, inverse
    return _blockwise_inverse(regularized, image_side, with_inverse)


def _blockwise_inverse(regularized: np.ndarray, image_side: int,
                       with_inverse: bool) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    inverse = np.empty_like(regularized)
    for w, block in enumerate(regularized):
        try:
            lower_inv = np.linalg.inv(np.linalg.cholesky(block))
            inverse[w] = lower_inv.conj().T @ lower_inv
        except np.linalg.LinAlgError:
            inverse[w] = _pivoted_inverse(block, w, image_side)
    traces = np.einsum('wss->w', inverse).real
    return traces, inverse if with_inverse else None


def _regularized(gram: GramField, prior: PriorSpec, lambda_reg: float) -> np.ndarray:
    if not lambda_reg > 0:
        raise InvalidArgumentError(f"lambda_reg must be > 0, got {lambda_reg}")
    if gram.blocks.shape != prior.inv_cov_blocks.shape:
        raise InvalidArgumentError(
            f"gram blocks {gram.blocks.shape} do not match prior {prior.inv_cov_blocks.shape}")
    return gram.blocks + lambda_reg * prior.inv_cov_blocks


def cost_fast(gram: GramField, prior: PriorSpec, lambda_reg: float) -> float:
    """
    Expected SSE Σ_ω tr((G(ω) + λ·Σ̃_x⁻¹(ω))⁻¹) by N² independent S×S solves.

    Args:
        gram: Per-frequency Gram blocks of the configuration
        prior: Per-frequency prior
        lambda_reg: λ > 0

    Returns:
        The cost; the per-frequency terms are summed with math.fsum so the result
        does not depend on summation order
    """
    regularized = _regularized(gram, prior, lambda_reg)
    traces, _ = _inverse_blocks(regularized, prior.image_side, with_inverse=False)
    return math.fsum(traces.tolist())


class GramCost:
    """
    Cost of a configuration for a fixed (transfer, prior, λ).

    Holds the live GramField of the configuration being reduced and the precomputed
    per-plane contributions, so a trial removal costs one subtract, one evaluation and
    one add.
    """

    def __init__(self, transfer: TransferCube, prior: PriorSpec, lambda_reg: float):
        if not lambda_reg > 0:
            raise InvalidArgumentError(f"lambda_reg must be > 0, got {lambda_reg}")
        if prior.num_sources != transfer.num_sources or prior.image_side != transfer.image_side:
            raise InvalidArgumentError("prior does not match the transfer cube")
        self.transfer = transfer
        self.prior = prior
        self.lambda_reg = lambda_reg
        self.contributions = [plane_contribution(transfer, c) for c in range(transfer.num_planes)]
        self.gram: Optional[GramField] = None

    def _gram_for(self, multiplicity: Sequence[int]) -> GramField:
        counts = np.asarray(multiplicity, dtype=np.int64)
        if counts.shape == (self.transfer.num_planes,) and not np.any(counts):
            return empty_gram(self.transfer)
        return assemble_gram(self.transfer, counts)

    def __call__(self, multiplicity: Sequence[int]) -> float:
        """Cost of a configuration recomputed from scratch."""
        return cost_fast(self._gram_for(multiplicity), self.prior, self.lambda_reg)

    def reset(self, multiplicity: Sequence[int]) -> float:
        """Make `multiplicity` the live configuration and return its cost."""
        self.gram = self._gram_for(multiplicity)
        return self.current()

    def _live(self) -> GramField:
        if self.gram is None:
            raise InvalidArgumentError("GramCost has no live configuration; call reset() first")
        return self.gram

    def current(self) -> float:
        return cost_fast(self._live(), self.prior, self.lambda_reg)

    @property
    def multiplicity(self) -> np.ndarray:
        return self._live().multiplicity.copy()

    def trial_without(self, plane: int) -> float:
        """
        Cost after removing one copy of `plane`.

        The reduced blocks go to a scratch array, so the live Gram is only read and the
        result is bit-identical whether trials run serially or concurrently.
        """
        live = self._live()
        if live.multiplicity[plane] < 1:
            raise InvalidStateError(f"plane {plane} has no copy left to subtract")
        reduced = GramField(live.blocks - self.contributions[plane].blocks,
                            live.multiplicity.copy())
        reduced.multiplicity[plane] -= 1
        hermitize(reduced.blocks)
        return cost_fast(reduced, self.prior, self.lambda_reg)

    trial_without_copy = trial_without

    def remove(self, plane: int) -> None:
        gram_update(self._live(), self.contributions[plane], 'subtract')


def map_reconstruct_fast(meas: MeasurementSet, transfer: TransferCube, prior: PriorSpec,
                         lambda_reg: float) -> SourceCube:
    """
    MAP estimate by per-frequency S×S Hermitian solves.

    Solves (G(ω) + λ·Σ̃_x⁻¹(ω))·x̃(ω) = Ã_d(ω)^H·(ỹ(ω) − Ã_d(ω)·x̃₀(ω)) and returns
    x₀ + IDFT(x̃), keeping the real part.
    """
    n = transfer.image_side
    if meas.images.shape[1] != n:
        raise InvalidArgumentError(
            f"measurement side {meas.images.shape[1]} does not match transfer side {n}")
    counts = count_planes(meas.plane_index, transfer.num_planes)
    gram = assemble_gram(transfer, counts)
    regularized = _regularized(gram, prior, lambda_reg)
    _, inverse = _inverse_blocks(regularized, n, with_inverse=True)

    s, n2 = transfer.num_sources, n * n
    forward = transfer.values[list(meas.plane_index)].reshape(meas.count, s, n2)
    measured = np.fft.fft2(meas.images).reshape(meas.count, n2)
    mean_spectrum = np.fft.fft2(prior.mean_cube).reshape(s, n2)
    residual = measured - np.einsum('msw,sw->mw', forward, mean_spectrum)
    rhs = np.einsum('msw,mw->ws', forward.conj(), residual)
    update = np.einsum('wst,wt->ws', inverse, rhs)

    estimate = np.fft.ifft2(update.T.reshape(s, n, n))
    data_norm = max(float(np.linalg.norm(meas.images)), np.finfo(float).tiny)
    imag_residual = float(np.abs(estimate.imag).max()) / data_norm
    if imag_residual > 1e-9:
        logger.warning(f"⚠️  Reconstruction imaginary residual {imag_residual:.2e} of the data norm")
    return SourceCube(images=prior.mean_cube + estimate.real,
                      wavelengths=transfer.wavelengths, imag_residual=imag_residual)


# Dense oracle

def _as_transfer(psfs: Union[TransferCube, Sequence[Sequence[Union[Psf, np.ndarray]]]],
                 image_side: Optional[int]) -> TransferCube:
    if isinstance(psfs, TransferCube):
        return psfs
    if image_side is None:
        raise InvalidArgumentError("image_side is required when raw PSFs are given")
    return build_transfer(psfs, image_side)


def _check_dense_size(image_side: int, num_sources: int) -> None:
    size = image_side ** 2 * num_sources
    if size > DENSE_SIZE_LIMIT:
        raise InvalidArgumentError(
            f"dense oracle refuses N²·S = {size} > {DENSE_SIZE_LIMIT}; use the fast path")


def bccb_matrix(kernel: np.ndarray) -> np.ndarray:
    """
    N²×N² block-circulant matrix of circular convolution with a corner-origin kernel.

    Rows and columns follow row-major flattening of the N×N image.
    """
    kernel = np.asarray(kernel)
    n = kernel.shape[0]
    i = np.arange(n)
    shift = (i[:, None] - i[None, :]) % n
    matrix = kernel[shift[:, None, :, None], shift[None, :, None, :]]
    return matrix.reshape(n * n, n * n)


def dense_forward(transfer: TransferCube, planes: Sequence[int]) -> np.ndarray:
    """Explicit (M·N²)×(S·N²) system matrix, block (m, s) = BCCB of plane m, source s."""
    _check_dense_size(transfer.image_side, transfer.num_sources)
    n2 = transfer.image_side ** 2
    s = transfer.num_sources
    matrix = np.zeros((len(planes) * n2, s * n2))
    for m, plane in enumerate(planes):
        kernels = np.fft.ifft2(transfer.values[plane]).real
        for src in range(s):
            matrix[m * n2:(m + 1) * n2, src * n2:(src + 1) * n2] = bccb_matrix(kernels[src])
    return matrix


def _dft_matrix(image_side: int) -> np.ndarray:
    """Unnormalized 2D DFT acting on row-major flattened images."""
    k = np.arange(image_side)
    one_d = np.exp(-2j * np.pi * np.outer(k, k) / image_side)
    return np.kron(one_d, one_d)


def dense_prior(prior: PriorSpec) -> np.ndarray:
    """Dense S·N²×S·N² prior covariance whose DFT diagonal blocks are Σ̃_x(ω)."""
    n = prior.image_side
    s = prior.num_sources
    _check_dense_size(n, s)
    n2 = n * n
    cov_blocks = np.linalg.inv(prior.inv_cov_blocks)
    dft = _dft_matrix(n)
    dft_inv = dft.conj() / n2
    dense = np.empty((s * n2, s * n2), dtype=complex)
    for a in range(s):
        for b in range(s):
            dense[a * n2:(a + 1) * n2, b * n2:(b + 1) * n2] = (dft_inv * cov_blocks[:, a, b]) @ dft
    dense = 0.5 * (dense + dense.conj().T)
    if np.abs(dense.imag).max() <= 1e-12 * np.abs(dense.real).max():
        return dense.real
    return dense


def equivalent_dense_covariances(prior: PriorSpec, lambda_reg: float,
                                 num_measurements: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Dense (Σ_n, Σ_x) for which cost_dense and map_reconstruct_dense reproduce the fast
    path at λ: Σ_n = I and Σ_x = Σ_prior / λ.
    """
    if not lambda_reg > 0:
        raise InvalidArgumentError(f"lambda_reg must be > 0, got {lambda_reg}")
    n2 = prior.image_side ** 2
    return np.eye(num_measurements * n2), dense_prior(prior) / lambda_reg


def _posterior_precision(forward: np.ndarray, sigma_n: np.ndarray,
                         sigma_x: np.ndarray) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Returns (A^H Σ_n⁻¹ A + Σ_x⁻¹, Σ_n⁻¹ A); the second is None without measurements."""
    precision = scipy.linalg.inv(sigma_x)
    if forward.shape[0] == 0:
        return precision, None
    if sigma_n.shape != (forward.shape[0], forward.shape[0]):
        raise InvalidArgumentError(
            f"sigma_n must be {forward.shape[0]} square, got {sigma_n.shape}")
    weighted = scipy.linalg.cho_solve(scipy.linalg.cho_factor(sigma_n), forward)
    return forward.conj().T @ weighted + precision, weighted


def cost_dense(psfs: Union[TransferCube, Sequence[Sequence[Union[Psf, np.ndarray]]]],
               config: Sequence[int], sigma_n: np.ndarray, sigma_x: np.ndarray,
               image_side: Optional[int] = None) -> float:
    """
    Oracle cost tr((A^H Σ_n⁻¹ A + Σ_x⁻¹)⁻¹) on explicitly assembled matrices.

    Args:
        psfs: TransferCube, or C×S centre-origin kernels with image_side given
        config: Multiplicity vector over the candidate planes (may be all zero)
        sigma_n: (M·N²)² noise covariance
        sigma_x: (S·N²)² prior covariance
        image_side: N, when raw kernels are passed
    """
    transfer = _as_transfer(psfs, image_side)
    _check_dense_size(transfer.image_side, transfer.num_sources)
    counts = np.asarray(config, dtype=np.int64)
    if counts.shape != (transfer.num_planes,):
        raise InvalidArgumentError(
            f"config needs {transfer.num_planes} multiplicities, got shape {counts.shape}")
    planes = expand_config(counts)
    forward = dense_forward(transfer, planes)
    size = transfer.num_sources * transfer.image_side ** 2
    sigma_x = np.asarray(sigma_x)
    if sigma_x.shape != (size, size):
        raise InvalidArgumentError(f"sigma_x must be {size} square, got {sigma_x.shape}")
    precision, _ = _posterior_precision(forward, np.asarray(sigma_n), sigma_x)
    factor = scipy.linalg.cho_factor(precision)
    covariance = scipy.linalg.cho_solve(factor, np.eye(size))
    return float(np.trace(covariance).real)


def map_reconstruct_dense(meas: MeasurementSet,
                          psfs: Union[TransferCube, Sequence[Sequence[Union[Psf, np.ndarray]]]],
                          sigma_n: np.ndarray, sigma_x: np.ndarray,
                          prior_mean: Optional[np.ndarray] = None,
                          image_side: Optional[int] = None) -> SourceCube:
    """x₀ + (A^H Σ_n⁻¹ A + Σ_x⁻¹)⁻¹·A^H Σ_n⁻¹·(y − A·x₀) on explicit matrices."""
    transfer = _as_transfer(psfs, image_side)
    n, s = transfer.image_side, transfer.num_sources
    _check_dense_size(n, s)
    if meas.images.shape[1] != n:
        raise InvalidArgumentError(
            f"measurement side {meas.images.shape[1]} does not match transfer side {n}")
    forward = dense_forward(transfer, meas.plane_index)
    mean = np.zeros(s * n * n) if prior_mean is None else np.asarray(prior_mean, float).reshape(-1)
    if mean.size != s * n * n:
        raise InvalidArgumentError(f"prior_mean must hold {s * n * n} values, got {mean.size}")

    precision, weighted = _posterior_precision(forward, np.asarray(sigma_n), np.asarray(sigma_x))
    residual = meas.images.reshape(-1) - forward @ mean
    rhs = weighted.conj().T @ residual
    update = scipy.linalg.cho_solve(scipy.linalg.cho_factor(precision), rhs)
    estimate = mean + update
    data_norm = max(float(np.linalg.norm(meas.images)), np.finfo(float).tiny)
    imag_residual = float(np.abs(np.imag(estimate)).max()) / data_norm
    return SourceCube(images=np.real(estimate).reshape(s, n, n),
                      wavelengths=transfer.wavelengths, imag_residual=imag_residual)
