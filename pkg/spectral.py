#!/usr/bin/env python3
"""
Frequency-Domain Forward Operator
Holds the 2D-DFT diagonal of every (plane, source) blur, the per-frequency Gram
field Ã_d^H Ã_d with incremental updates, and the per-frequency prior.
"""

import enum
import hashlib
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from errors import CacheError, InvalidArgumentError, InvalidStateError
from optics import Psf, SpectralSetup

logger = logging.getLogger(__name__)

CACHE_MAGIC = b'TCUBE'
CACHE_VERSION = 1
_HEADER = struct.Struct('<5sHIII32s')


@dataclass(frozen=True, eq=False)
class TransferCube:
    """
    DFT of every corner-origin, N×N zero-embedded PSF.

    `values[c, s]` is the N×N transfer function of candidate plane c and source s.
    """
    values: np.ndarray
    image_side: int
    plane_distances: Tuple[float, ...]
    wavelengths: Tuple[float, ...] = ()
    pixel_pitch: float = 0.0
    kernel_size: int = 0

    @property
    def num_planes(self) -> int:
        return self.values.shape[0]

    @property
    def num_sources(self) -> int:
        return self.values.shape[1]

    def columns(self, plane: int) -> np.ndarray:
        """Frequency-major view (N², S) of one plane's transfer functions."""
        n2 = self.image_side ** 2
        return self.values[plane].reshape(self.num_sources, n2).T


@dataclass(frozen=True, eq=False)
class PlaneContribution:
    """Rank-one per-frequency blocks h(ω)^* h(ω)^T of one candidate plane."""
    plane: int
    blocks: np.ndarray


@dataclass(eq=False)
class GramField:
    """
    Per-frequency S×S Hermitian blocks of Ã_d^H Ã_d.

    `multiplicity[c]` counts the copies of candidate plane c summed into `blocks`.
    Single writer; readers must not overlap an update.
    """
    blocks: np.ndarray
    multiplicity: np.ndarray

    def copy(self) -> 'GramField':
        return GramField(self.blocks.copy(), self.multiplicity.copy())

    @property
    def total(self) -> int:
        return int(self.multiplicity.sum())

    def trace(self) -> np.ndarray:
        """Per-frequency trace (real)."""
        return np.einsum('wss->w', self.blocks).real


class PriorKind(str, enum.Enum):
    WHITE = 'white'
    POWER_SPECTRUM = 'power_spectrum'


@dataclass(frozen=True, eq=False)
class PriorSpec:
    """Per-frequency inverse prior covariance blocks Σ̃_x⁻¹(ω) and prior mean x₀."""
    inv_cov_blocks: np.ndarray
    mean_cube: np.ndarray

    @property
    def num_sources(self) -> int:
        return self.inv_cov_blocks.shape[1]

    @property
    def image_side(self) -> int:
        return self.mean_cube.shape[1]


def embed_psf(grid: np.ndarray, image_side: int) -> np.ndarray:
    """Zero-embed a centre-origin P×P kernel into N×N with its centre at (0, 0)."""
    p = grid.shape[0]
    if p > image_side:
        raise InvalidArgumentError(f"kernel size {p} exceeds image side {image_side}")
    embedded = np.zeros((image_side, image_side))
    embedded[:p, :p] = grid
    return np.roll(embedded, (-(p // 2), -(p // 2)), axis=(0, 1))


def build_transfer(psfs: Sequence[Sequence[Union[Psf, np.ndarray]]], image_side: int,
                   plane_distances: Optional[Sequence[float]] = None) -> TransferCube:
    """
    Build the TransferCube from a C×S array of PSFs.

    Args:
        psfs: Centre-origin kernels indexed [plane][source]; Psf objects or raw arrays
        image_side: N
        plane_distances: Required when raw arrays are given

    Returns:
        TransferCube with values[c, s] = DFT of the corner-origin embedding
    """
    if len(psfs) == 0 or len(psfs[0]) == 0:
        raise InvalidArgumentError("psfs must be a non-empty C x S array")
    num_sources = len(psfs[0])
    if any(len(row) != num_sources for row in psfs):
        raise InvalidArgumentError("every plane needs one PSF per source")

    first = psfs[0][0]
    is_psf = isinstance(first, Psf)
    if is_psf:
        pitches = {p.pixel_pitch for row in psfs for p in row}
        if len(pitches) != 1:
            raise InvalidArgumentError(f"PSFs must share one pixel pitch, got {sorted(pitches)}")
        if plane_distances is None:
            plane_distances = [row[0].plane_distance for row in psfs]
        wavelengths = tuple(p.wavelength for p in psfs[0])
        pitch = first.pixel_pitch
    else:
        if plane_distances is None:
            plane_distances = [float(c + 1) for c in range(len(psfs))]
        wavelengths = ()
        pitch = 0.0

    grids = [[p.grid if isinstance(p, Psf) else np.asarray(p, dtype=float) for p in row]
             for row in psfs]
    values = np.empty((len(grids), num_sources, image_side, image_side), dtype=complex)
    for c, row in enumerate(grids):
        for s, grid in enumerate(row):
            values[c, s] = np.fft.fft2(embed_psf(grid, image_side))

    return TransferCube(values=values, image_side=image_side,
                        plane_distances=tuple(float(d) for d in plane_distances),
                        wavelengths=wavelengths, pixel_pitch=pitch,
                        kernel_size=grids[0][0].shape[0])


def _check_plane(transfer: TransferCube, plane: int) -> None:
    if not 0 <= plane < transfer.num_planes:
        raise InvalidArgumentError(
            f"plane index {plane} out of range for {transfer.num_planes} candidate planes")


def plane_contribution(transfer: TransferCube, plane: int) -> PlaneContribution:
    """Entry (s, s') at ω is conj(Ã_{c,s}(ω))·Ã_{c,s'}(ω)."""
    _check_plane(transfer, plane)
    h = transfer.columns(plane)
    return PlaneContribution(plane, np.einsum('ws,wt->wst', h.conj(), h))


def hermitize(blocks: np.ndarray) -> None:
    blocks += np.conj(np.swapaxes(blocks, -1, -2))
    blocks *= 0.5


def assemble_gram(transfer: TransferCube, multiplicity: Sequence[int]) -> GramField:
    """Σ_c multiplicity[c]·plane_contribution(c), frequency-major."""
    counts = np.asarray(multiplicity, dtype=np.int64)
    if counts.shape != (transfer.num_planes,):
        raise InvalidArgumentError(
            f"multiplicity needs {transfer.num_planes} entries, got shape {counts.shape}")
    if np.any(counts < 0):
        raise InvalidArgumentError(f"multiplicity entries must be >= 0, got {counts.tolist()}")
    if not np.any(counts > 0):
        raise InvalidArgumentError("multiplicity must include at least one plane")
    n2 = transfer.image_side ** 2
    h = transfer.values.reshape(transfer.num_planes, transfer.num_sources, n2)
    blocks = np.einsum('c,csw,ctw->wst', counts.astype(float), h.conj(), h, optimize=True)
    hermitize(blocks)
    return GramField(blocks, counts.copy())


def empty_gram(transfer: TransferCube) -> GramField:
    """GramField with no planes included (all-zero blocks)."""
    s = transfer.num_sources
    return GramField(np.zeros((transfer.image_side ** 2, s, s), dtype=complex),
                     np.zeros(transfer.num_planes, dtype=np.int64))


def gram_update(gram: GramField, contribution: PlaneContribution, sign: str) -> GramField:
    """
    Add or subtract one plane copy in place, O(S²N²).

    Args:
        gram: GramField to update
        contribution: Output of plane_contribution for the plane
        sign: 'add' or 'subtract'

    Returns:
        The same GramField, updated and re-Hermitized
    """
    plane = contribution.plane
    if sign == 'add':
        gram.blocks += contribution.blocks
        gram.multiplicity[plane] += 1
    elif sign == 'subtract':
        if gram.multiplicity[plane] < 1:
            raise InvalidStateError(f"plane {plane} has no copy left to subtract")
        gram.blocks -= contribution.blocks
        gram.multiplicity[plane] -= 1
    else:
        raise InvalidArgumentError(f"sign must be 'add' or 'subtract', got {sign!r}")
    hermitize(gram.blocks)
    return gram


def frequency_grid(image_side: int) -> Tuple[np.ndarray, np.ndarray]:
    """Integer frequency indices (ky, kx) in numpy FFT order."""
    k = np.fft.fftfreq(image_side, 1.0 / image_side)
    return np.meshgrid(k, k, indexing='ij')


def isotropic_power_spectrum(image_side: int, scale: float = 1.0) -> np.ndarray:
    """1/(1 + scale·|k|²) on the FFT grid."""
    ky, kx = frequency_grid(image_side)
    return 1.0 / (1.0 + scale * (kx ** 2 + ky ** 2))


def make_prior(kind: Union[PriorKind, str], setup: SpectralSetup, image_side: int,
               power_spectrum: Optional[np.ndarray] = None,
               mean_cube: Optional[np.ndarray] = None) -> PriorSpec:
    """
    Build a per-frequency prior.

    Args:
        kind: 'white' (identity blocks) or 'power_spectrum' (diagonal 1/P(ω) blocks)
        setup: Spectral setup, fixes S
        image_side: N
        power_spectrum: N×N (shared) or S×N×N per-source spectrum, FFT order
        mean_cube: Optional S×N×N prior mean x₀ (zero when omitted)
    """
    kind = PriorKind(kind)
    s, n = setup.count, image_side
    if mean_cube is None:
        mean_cube = np.zeros((s, n, n))
    mean_cube = np.asarray(mean_cube, dtype=float)
    if mean_cube.shape != (s, n, n):
        raise InvalidArgumentError(f"mean_cube must be {(s, n, n)}, got {mean_cube.shape}")

    if kind is PriorKind.WHITE:
        blocks = np.broadcast_to(np.eye(s, dtype=complex), (n * n, s, s)).copy()
        return PriorSpec(blocks, mean_cube)

    if power_spectrum is None:
        raise InvalidArgumentError("power_spectrum prior needs a spectrum")
    spectrum = np.broadcast_to(np.asarray(power_spectrum, dtype=float), (s, n, n))
    if not np.all(np.isfinite(spectrum)) or np.any(spectrum <= 0):
        raise InvalidArgumentError("power spectrum must be positive everywhere")
    blocks = np.zeros((n * n, s, s), dtype=complex)
    idx = np.arange(s)
    blocks[:, idx, idx] = (1.0 / spectrum.reshape(s, n * n)).T
    return PriorSpec(blocks, mean_cube)


def cache_key(*parts) -> bytes:
    """SHA-256 digest over the repr of the given inputs."""
    return hashlib.sha256(repr(parts).encode('utf-8')).digest()


def save_transfer(cube: TransferCube, path: Union[str, Path], key: bytes = b'') -> None:
    """
    Write a TransferCube to the versioned binary container.

    Layout: header (magic, version, C, S, N, 32-byte key), C distances, S wavelengths,
    pixel pitch, kernel size, then the complex128 values in C order.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    c, s, n = cube.num_planes, cube.num_sources, cube.image_side
    wavelengths = np.asarray(cube.wavelengths if cube.wavelengths else [0.0] * s, dtype='<f8')
    with open(path, 'wb') as handle:
        handle.write(_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, c, s, n, key.ljust(32, b'\0')[:32]))
        handle.write(np.asarray(cube.plane_distances, dtype='<f8').tobytes())
        handle.write(wavelengths.tobytes())
        handle.write(struct.pack('<dI', cube.pixel_pitch, cube.kernel_size))
        handle.write(np.ascontiguousarray(cube.values, dtype='<c16').tobytes())


def load_transfer(path: Union[str, Path], key: Optional[bytes] = None) -> TransferCube:
    """Read a container written by save_transfer; CacheError on any inconsistency."""
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CacheError(f"cannot read {path}: {e}") from e
    if len(data) < _HEADER.size:
        raise CacheError(f"{path}: truncated header")
    magic, version, c, s, n, stored_key = _HEADER.unpack_from(data)
    if magic != CACHE_MAGIC or version != CACHE_VERSION:
        raise CacheError(f"{path}: not a version {CACHE_VERSION} transfer cache")
    if key is not None and stored_key != key.ljust(32, b'\0')[:32]:
        raise CacheError(f"{path}: cache key mismatch")

    offset = _HEADER.size
    expected = offset + 8 * c + 8 * s + 12 + 16 * c * s * n * n
    if len(data) != expected:
        raise CacheError(f"{path}: expected {expected} bytes, found {len(data)}")
    distances = np.frombuffer(data, '<f8', c, offset)
    offset += 8 * c
    wavelengths = np.frombuffer(data, '<f8', s, offset)
    offset += 8 * s
    pitch, kernel_size = struct.unpack_from('<dI', data, offset)
    offset += 12
    values = np.frombuffer(data, '<c16', c * s * n * n, offset).reshape(c, s, n, n).copy()
    return TransferCube(values=values, image_side=n,
                        plane_distances=tuple(float(d) for d in distances),
                        wavelengths=tuple(float(w) for w in wavelengths if w > 0),
                        pixel_pitch=pitch, kernel_size=kernel_size)


def extract_psf(cube: TransferCube, plane: int, source: int) -> np.ndarray:
    """Centre-origin kernel_size² PSF recovered from the transfer values (inverse of embed_psf)."""
    _check_plane(cube, plane)
    p = cube.kernel_size
    if not 0 < p <= cube.image_side:
        raise InvalidArgumentError(f"transfer cube records no usable kernel size ({p})")
    corner = np.fft.ifft2(cube.values[plane, source]).real
    return np.roll(corner, (p // 2, p // 2), axis=(0, 1))[:p, :p]
