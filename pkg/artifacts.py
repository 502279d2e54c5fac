#!/usr/bin/env python3
"""
Artifact Writers
CSV tables, the Excel summary workbook, display PNGs with normalization sidecars,
raw float64 arrays and the matplotlib figures emitted by the harness.
"""

import json
import logging
import math
import struct
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import yaml
from PIL import Image

from errors import InvalidArgumentError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

COST_TRACE_COLUMNS = ['iteration', 'eliminated_distance_m', 'cost']
SWEEP_COLUMNS = ['S', 'snr_db', 'sep_dof', 'ssim_csbs', 'ssim_focal']
SELECTION_COLUMNS = ['plane_index', 'distance_m', 'multiplicity']

# Round-trip precision for every float written to CSV
FLOAT_FORMAT = '%.17g'

CSBS_COLOR = 'tab:orange'
FOCAL_COLOR = 'tab:blue'


def write_csv(df: pd.DataFrame, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')
    logger.info(f"Saved {path}")
    return path


def read_csv(path: PathLike) -> pd.DataFrame:
    """Read a table written by write_csv; floats come back bit-exact."""
    return pd.read_csv(path, float_precision='round_trip')


def cost_trace_frame(history: Sequence, plane_distances: Sequence[float]) -> pd.DataFrame:
    """One row per elimination: iteration (from 1), eliminated distance, cost after it."""
    rows = [{'iteration': i, 'eliminated_distance_m': plane_distances[plane], 'cost': cost}
            for i, (plane, cost) in enumerate(history, start=1)]
    return pd.DataFrame(rows, columns=COST_TRACE_COLUMNS)


def selection_frame(plane_distances: Sequence[float], multiplicity: Sequence[int]) -> pd.DataFrame:
    return pd.DataFrame({'plane_index': np.arange(len(plane_distances)),
                         'distance_m': np.asarray(plane_distances, dtype=float),
                         'multiplicity': np.asarray(multiplicity, dtype=np.int64)},
                        columns=SELECTION_COLUMNS)


def read_selection_csv(path: PathLike, num_planes: int) -> np.ndarray:
    """Multiplicity vector from a selection CSV written by the harness."""
    try:
        df = read_csv(path)
    except (OSError, pd.errors.ParserError) as e:
        raise InvalidArgumentError(f"cannot read selection file {path}: {e}") from e
    missing = set(SELECTION_COLUMNS) - set(df.columns)
    if missing:
        raise InvalidArgumentError(f"selection file {path} lacks columns {sorted(missing)}")
    multiplicity = np.zeros(num_planes, dtype=np.int64)
    for row in df.itertuples(index=False):
        if not 0 <= row.plane_index < num_planes:
            raise InvalidArgumentError(f"selection file {path} names plane {row.plane_index}")
        multiplicity[int(row.plane_index)] = int(row.multiplicity)
    return multiplicity


def sweep_frame(rows: List[Mapping]) -> pd.DataFrame:
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


def write_excel_summary(path: PathLike, sheets: Dict[str, pd.DataFrame]) -> Path:
    """One sheet per table, written with openpyxl."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with pd.ExcelWriter(path, engine='openpyxl') as writer:
        for name, df in sheets.items():
            df.to_excel(writer, sheet_name=name[:31], index=False)
    logger.info(f"Saved {path}")
    return path


def write_json(path: PathLike, payload: Mapping) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + '\n')
    return path


def _json_default(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def write_yaml(path: PathLike, payload: Mapping) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(payload, sort_keys=False))
    return path


def write_raw(array: np.ndarray, path: PathLike) -> Path:
    """
    Flat binary array: uint32 ndim, uint32 dims, then float64 little-endian values in C order.
    """
    array = np.ascontiguousarray(array, dtype='<f8')
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as handle:
        handle.write(struct.pack(f'<I{array.ndim}I', array.ndim, *array.shape))
        handle.write(array.tobytes())
    return path


def read_raw(path: PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    (ndim,) = struct.unpack_from('<I', data)
    shape = struct.unpack_from(f'<{ndim}I', data, 4)
    offset = 4 * (ndim + 1)
    count = int(np.prod(shape)) if shape else 1
    if len(data) != offset + 8 * count:
        raise InvalidArgumentError(f"{path}: size does not match header shape {shape}")
    return np.frombuffer(data, '<f8', count, offset).reshape(shape).copy()


def write_png(image: np.ndarray, path: PathLike, raw_name: Optional[str] = None) -> Path:
    """
    8-bit grayscale PNG, min-max normalized, with a JSON sidecar holding the constants.

    The PNG is for display only; the sidecar names the raw file when one was written.
    """
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise InvalidArgumentError(f"PNG export needs a 2D image, got shape {image.shape}")
    low, high = float(image.min()), float(image.max())
    span = high - low
    scaled = np.zeros_like(image) if span == 0 else (image - low) / span
    pixels = np.clip(np.round(scaled * 255.0), 0, 255).astype(np.uint8)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels).save(path)
    sidecar = {'min': low, 'max': high, 'shape': list(image.shape)}
    if raw_name:
        sidecar['raw'] = raw_name
    write_json(path.with_suffix('.json'), sidecar)
    return path


def write_image_with_raw(image: np.ndarray, directory: PathLike, stem: str) -> Path:
    """PNG + sidecar + raw binary of the same image."""
    directory = Path(directory)
    raw = write_raw(image, directory / f'{stem}.raw')
    return write_png(image, directory / f'{stem}.png', raw_name=raw.name)


def _save(fig, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    logger.info(f"Saved {path}")
    return path


def plot_cost_trace(costs: Sequence[float], path: PathLike) -> Path:
    """Cost at every configuration size, from the full candidate set down to M."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(np.arange(len(costs)), costs, marker='o', color=CSBS_COLOR)
    ax.set_xlabel('Eliminations')
    ax.set_ylabel('Expected SSE')
    ax.set_yscale('log')
    ax.set_title('CSBS cost trace')
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def plot_selection(plane_distances: Sequence[float], multiplicity: Sequence[int],
                   focal_lengths: Sequence[float], path: PathLike,
                   focal_multiplicity: Optional[Sequence[int]] = None) -> Path:
    """Stem plot of copies per plane with the focal planes marked."""
    distances_mm = np.asarray(plane_distances) * 1e3
    fig, ax = plt.subplots(figsize=(7, 3.5))
    counts = np.asarray(multiplicity)
    keep = counts > 0
    markers, stems, _ = ax.stem(distances_mm[keep], counts[keep], basefmt=' ', label='CSBS')
    plt.setp(markers, color=CSBS_COLOR)
    plt.setp(stems, color=CSBS_COLOR)
    if focal_multiplicity is not None:
        focal = np.asarray(focal_multiplicity)
        ax.plot(distances_mm[focal > 0], focal[focal > 0], 'x', color=FOCAL_COLOR,
                markersize=9, label='Focal planes')
    for i, f in enumerate(focal_lengths):
        ax.axvline(f * 1e3, color=FOCAL_COLOR, linestyle='--', alpha=0.6,
                   label='f(λ)' if i == 0 else None)
    ax.set_xlabel('Detector distance (mm)')
    ax.set_ylabel('Measurements')
    ax.set_ylim(0, max(int(counts.max()), 1) + 1)
    ax.legend(loc='upper right', fontsize=8)
    return _save(fig, path)


def plot_psf_pairs(focal_psfs: Sequence[np.ndarray], csbs_psfs: Sequence[np.ndarray],
                   labels: Sequence[str], path: PathLike) -> Path:
    """Top row: every source's PSF at a focal plane; bottom row: the same at a CSBS plane."""
    columns = max(len(focal_psfs), len(csbs_psfs), 1)
    fig, axes = plt.subplots(2, columns, figsize=(2.2 * columns, 4.6), squeeze=False)
    for row, (psfs, name) in enumerate(((focal_psfs, 'focal'), (csbs_psfs, 'CSBS'))):
        for col in range(columns):
            ax = axes[row][col]
            ax.axis('off')
            if col < len(psfs):
                ax.imshow(psfs[col], cmap='gray')
                ax.set_title(f'{name} {labels[col] if col < len(labels) else ""}', fontsize=8)
    return _save(fig, path)


def plot_psf_montage(psfs: Sequence[np.ndarray], titles: Sequence[str], path: PathLike) -> Path:
    columns = min(len(psfs), 6)
    rows = math.ceil(len(psfs) / columns)
    fig, axes = plt.subplots(rows, columns, figsize=(2.2 * columns, 2.3 * rows), squeeze=False)
    for i, ax in enumerate(axes.flat):
        ax.axis('off')
        if i < len(psfs):
            ax.imshow(psfs[i], cmap='gray')
            ax.set_title(titles[i], fontsize=7)
    return _save(fig, path)


def plot_sweep(df: pd.DataFrame, path: PathLike) -> Path:
    """
    Panels with rows = number of sources and columns = SNR; SSIM against separation,
    CSBS in orange and focal planes in blue.
    """
    sources = sorted(df['S'].unique())
    snrs = sorted(df['snr_db'].unique())
    fig, axes = plt.subplots(len(sources), len(snrs), figsize=(3.2 * len(snrs), 2.6 * len(sources)),
                             squeeze=False, sharex=True, sharey=True)
    for i, s in enumerate(sources):
        for j, snr in enumerate(snrs):
            ax = axes[i][j]
            cell = df[(df['S'] == s) & (df['snr_db'] == snr)].sort_values('sep_dof')
            ax.plot(cell['sep_dof'], cell['ssim_csbs'], marker='o', color=CSBS_COLOR, label='CSBS')
            ax.plot(cell['sep_dof'], cell['ssim_focal'], marker='s', color=FOCAL_COLOR,
                    label='Focal planes')
            ax.set_title(f'S={s}, SNR={snr:g} dB', fontsize=9)
            ax.grid(True, alpha=0.3)
            if i == len(sources) - 1:
                ax.set_xlabel('Separation (DOF)')
            if j == 0:
                ax.set_ylabel('SSIM')
    axes[0][0].legend(fontsize=8)
    return _save(fig, path)
