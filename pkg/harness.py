#!/usr/bin/env python3
"""
Measurement Plane Selection Harness
Loads an experiment config, runs the PSF -> λ search -> CSBS -> reconstruction
pipeline against the focal-plane baseline, runs parameter sweeps, and writes
every table, image and figure of a run.

Usage:
    python harness.py run --config configs/desk_two_source.yaml
    python harness.py sweep --config configs/sweep.yaml --workers 4 --seeds 5
"""

import argparse
import dataclasses
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import yaml

import artifacts
from errors import (CacheError, ConfigError, InvalidArgumentError, SingularSystemError,
                    StageError)
from inverse import (GramCost, NoiseModel, SourceCube, map_reconstruct_fast,
                     simulate_measurements)
from metrics import (default_lambda_grid, lambda_search, source_errors, source_ssims,
                     summarize_seeds)
from optics import (SieveParams, SpectralSetup, default_pixel_pitch, depth_of_focus,
                    focal_length, generate_psf_stack, wavelengths_for_separation)
from selector import CandidateSet, csbs, focal_plane_config
from sources import GENERATORS, make_source_cube
from spectral import (PriorKind, TransferCube, build_transfer, cache_key, extract_psf,
                      isotropic_power_spectrum, load_transfer, make_prior, save_transfer)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2
EXIT_PARTIAL_SWEEP = 3


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    min_distance: Optional[float] = None
    max_distance: Optional[float] = None
    count: int = 30
    copies: int = 4
    margin_dof: float = 5.0


@dataclass(frozen=True)
class NoiseSpec:
    snr_db: Optional[float] = 15.0
    seed: int = 0


@dataclass(frozen=True)
class LambdaSpec:
    grid_min: float = 1e-4
    grid_max: float = 1e2
    grid_count: int = 20
    fixed: Optional[float] = None


@dataclass(frozen=True)
class PriorConfig:
    kind: str = 'white'
    scale: float = 1.0


@dataclass(frozen=True)
class SourceSpec:
    generator: str = 'shapes'
    seed: int = 0
    paths: Tuple[str, ...] = ()


@dataclass(frozen=True)
class SweepSpec:
    num_sources: Tuple[int, ...] = (2, 3, 4)
    snr_db: Tuple[float, ...] = (5.0, 15.0, 25.0)
    separation_dof: Tuple[float, ...] = (1.0, 2.0, 3.0, 5.0, 10.0, 15.0)
    seeds: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved experiment configuration; YAML section `lambda` maps to `lambda_reg`."""
    sieve: SieveParams = field(default_factory=SieveParams)
    wavelengths: Tuple[float, ...] = (33.4e-9, 33.5e-9)
    grid: GridSpec = field(default_factory=GridSpec)
    target_m: int = 12
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    lambda_reg: LambdaSpec = field(default_factory=LambdaSpec)
    prior: PriorConfig = field(default_factory=PriorConfig)
    source: SourceSpec = field(default_factory=SourceSpec)
    image_side: int = 64
    kernel_size: int = 63
    pixel_pitch: Optional[float] = None
    output_dir: str = 'results'
    cache_dir: str = '.psf_cache'
    workers: int = 1
    sweep: SweepSpec = field(default_factory=SweepSpec)

    @property
    def setup(self) -> SpectralSetup:
        return SpectralSetup(self.wavelengths)

    @property
    def resolved_pitch(self) -> float:
        return self.pixel_pitch if self.pixel_pitch is not None else default_pixel_pitch(self.sieve)

    def candidates(self) -> CandidateSet:
        """Uniform candidate grid; open bounds bracket every focal length by margin_dof DOFs."""
        focals = [focal_length(self.sieve, w) for w in self.wavelengths]
        margin = self.grid.margin_dof * depth_of_focus(self.sieve, self.wavelengths[0])
        low = self.grid.min_distance if self.grid.min_distance is not None else min(focals) - margin
        high = self.grid.max_distance if self.grid.max_distance is not None else max(focals) + margin
        return CandidateSet.uniform(low, high, self.grid.count, self.grid.copies)

    def noise_model(self, lambda_reg: float) -> NoiseModel:
        return NoiseModel(lambda_reg=lambda_reg, snr_db=self.noise.snr_db)

    def to_dict(self) -> Dict[str, Any]:
        data = dataclasses.asdict(self)
        data['lambda'] = data.pop('lambda_reg')
        return _plain(data)


_SECTIONS = {'sieve': SieveParams, 'grid': GridSpec, 'noise': NoiseSpec, 'lambda': LambdaSpec,
             'prior': PriorConfig, 'source': SourceSpec, 'sweep': SweepSpec}
_SECTION_FIELDS = {'lambda': 'lambda_reg'}


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _coerce(value, kind, name: str):
    """Convert a YAML value to the field's type; YAML 1.1 reads `1e-4` as a string."""
    if value is None:
        return None
    try:
        if kind is float:
            return float(value)
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(f"{value} is not an integer")
            return int(value)
        if kind is str:
            return str(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{name}: cannot read {value!r} as {kind.__name__} ({e})") from e
    return value


_FIELD_KINDS = {
    'sieve': {'diameter': float, 'smallest_zone_width': float, 'pupil_samples': int},
    'grid': {'min_distance': float, 'max_distance': float, 'count': int, 'copies': int,
             'margin_dof': float},
    'noise': {'snr_db': float, 'seed': int},
    'lambda': {'grid_min': float, 'grid_max': float, 'grid_count': int, 'fixed': float},
    'prior': {'kind': str, 'scale': float},
    'source': {'generator': str, 'seed': int},
    'sweep': {'seeds': int},
    None: {'target_m': int, 'image_side': int, 'kernel_size': int, 'pixel_pitch': float,
           'output_dir': str, 'cache_dir': str, 'workers': int},
}
_LIST_KINDS = {('source', 'paths'): str, ('sweep', 'num_sources'): int,
               ('sweep', 'snr_db'): float, ('sweep', 'separation_dof'): float,
               (None, 'wavelengths'): float}


def _coerce_list(value, kind, name: str) -> Tuple:
    if not isinstance(value, (list, tuple)):
        value = [value]
    return tuple(_coerce(v, kind, name) for v in value)


def _section(name: str, raw: Any) -> Any:
    cls = _SECTIONS[name]
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"section '{name}' must be a mapping, got {type(raw).__name__}")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {unknown}")
    values = {}
    for key, value in raw.items():
        if (name, key) in _LIST_KINDS:
            values[key] = _coerce_list(value, _LIST_KINDS[(name, key)], f"{name}.{key}")
        else:
            values[key] = _coerce(value, _FIELD_KINDS[name][key], f"{name}.{key}")
    try:
        return cls(**values)
    except InvalidArgumentError as e:
        raise ConfigError(f"{name}: {e}") from e


def config_from_dict(raw: Dict[str, Any]) -> ExperimentConfig:
    """Build and validate an ExperimentConfig from a nested mapping."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    top_fields = {f.name for f in dataclasses.fields(ExperimentConfig)} - set(_SECTION_FIELDS.values())
    allowed = top_fields | set(_SECTIONS)
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")

    values = {}
    for key, value in raw.items():
        target = _SECTION_FIELDS.get(key, key)
        if key in _SECTIONS:
            values[target] = _section(key, value)
        elif (None, key) in _LIST_KINDS:
            values[target] = _coerce_list(value, _LIST_KINDS[(None, key)], key)
        else:
            values[target] = _coerce(value, _FIELD_KINDS[None][key], key)
    config = ExperimentConfig(**values)
    validate_config(config)
    return config


def validate_config(config: ExperimentConfig) -> None:
    """Cross-field checks; raises ConfigError naming the offending key."""
    try:
        setup = config.setup
    except InvalidArgumentError as e:
        raise ConfigError(f"wavelengths: {e}") from e
    if config.image_side < 8:
        raise ConfigError(f"image_side must be >= 8, got {config.image_side}")
    if config.image_side & (config.image_side - 1):
        logger.warning(f"⚠️  image_side {config.image_side} is not a power of two; FFTs will be slower")
    if config.kernel_size % 2 == 0 or not 1 <= config.kernel_size <= config.image_side:
        raise ConfigError(f"kernel_size must be odd and <= image_side, got {config.kernel_size}")
    if config.kernel_size > config.sieve.pupil_samples:
        raise ConfigError("kernel_size must not exceed sieve.pupil_samples")
    if config.pixel_pitch is not None and not config.pixel_pitch > 0:
        raise ConfigError(f"pixel_pitch must be > 0, got {config.pixel_pitch}")
    if config.grid.count < 1 or config.grid.copies < 1:
        raise ConfigError("grid.count and grid.copies must be >= 1")
    if config.grid.margin_dof < 0:
        raise ConfigError("grid.margin_dof must be >= 0")
    if not setup.count <= config.target_m <= config.grid.count * config.grid.copies:
        raise ConfigError(
            f"target_m must be in [{setup.count}, {config.grid.count * config.grid.copies}], "
            f"got {config.target_m}")
    if config.workers < 1:
        raise ConfigError(f"workers must be >= 1, got {config.workers}")

    lam = config.lambda_reg
    if lam.fixed is not None and not lam.fixed > 0:
        raise ConfigError(f"lambda.fixed must be > 0, got {lam.fixed}")
    if lam.fixed is None and not (0 < lam.grid_min <= lam.grid_max and lam.grid_count >= 1):
        raise ConfigError("lambda grid needs 0 < grid_min <= grid_max and grid_count >= 1")

    try:
        PriorKind(config.prior.kind)
    except ValueError as e:
        raise ConfigError(f"prior.kind must be one of {[k.value for k in PriorKind]}") from e
    if not config.prior.scale > 0:
        raise ConfigError("prior.scale must be > 0")

    if config.source.generator not in GENERATORS:
        raise ConfigError(f"source.generator must be one of {GENERATORS}")
    if config.source.generator == 'files':
        if len(config.source.paths) != setup.count:
            raise ConfigError(f"source.paths needs one file per wavelength ({setup.count})")
        missing = [p for p in config.source.paths if not Path(p).is_file()]
        if missing:
            raise ConfigError(f"source files not found: {missing}")

    try:
        candidates = config.candidates()
    except InvalidArgumentError as e:
        raise ConfigError(f"grid: {e}") from e
    focals = [focal_length(config.sieve, w) for w in config.wavelengths]
    if min(focals) < candidates.plane_distances[0] or max(focals) > candidates.plane_distances[-1]:
        raise ConfigError(
            f"candidate grid [{candidates.plane_distances[0]:.6f}, "
            f"{candidates.plane_distances[-1]:.6f}] m does not span the focal lengths "
            f"{[round(f, 6) for f in focals]}")

    sweep = config.sweep
    if not (sweep.num_sources and sweep.snr_db and sweep.separation_dof):
        raise ConfigError("sweep axes must be non-empty")
    if sweep.seeds < 1 or any(s < 1 for s in sweep.num_sources):
        raise ConfigError("sweep.seeds and sweep.num_sources entries must be >= 1")
    if any(not s > 0 for s in sweep.separation_dof):
        raise ConfigError("sweep.separation_dof entries must be > 0")
    snrs = ([config.noise.snr_db] if config.noise.snr_db is not None else []) + list(sweep.snr_db)
    if any(math.isnan(s) or s == -math.inf for s in snrs):
        raise ConfigError(f"snr_db values must be finite or +inf, got {snrs}")


def _set_dotted(data: Dict[str, Any], dotted: str, value: Any) -> None:
    keys = dotted.split('.')
    node = data
    for key in keys[:-1]:
        child = node.get(key)
        if child is None:
            child = node[key] = {}
        if not isinstance(child, dict):
            raise ConfigError(f"--set {dotted}: '{key}' is not a section")
        node = child
    node[keys[-1]] = value


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Apply `dotted.key=value` overrides; values are parsed as YAML."""
    for item in overrides or ():
        if '=' not in item:
            raise ConfigError(f"--set expects dotted.key=value, got {item!r}")
        key, text = item.split('=', 1)
        try:
            value = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"--set {key}: {e}") from e
        _set_dotted(data, key.strip(), value)
    return data


def load_config(path: Optional[str], overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Read the YAML config (defaults when path is None) and apply CLI overrides."""
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, 'r', encoding='utf-8') as handle:
                data = yaml.safe_load(handle) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"invalid YAML in {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config root must be a mapping")
    return config_from_dict(apply_overrides(data, overrides))


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

@contextmanager
def stage(name: str, runtimes: Dict[str, float]) -> Iterator[None]:
    """Time a pipeline stage and tag any failure with its name."""
    start = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        logger.error(f"❌ Stage '{name}' failed: {type(e).__name__}: {e}")
        raise StageError(name, e) from e
    finally:
        runtimes[name] = runtimes.get(name, 0.0) + time.perf_counter() - start


def psf_cache_key(config: ExperimentConfig, distances: Sequence[float]) -> bytes:
    sieve = config.sieve
    return cache_key('transfer', sieve.diameter, sieve.smallest_zone_width, sieve.pupil_samples,
                     tuple(config.wavelengths), tuple(float(d) for d in distances),
                     config.image_side, config.kernel_size, config.resolved_pitch)


def psf_cache_path(config: ExperimentConfig, key: bytes) -> Path:
    return Path(config.cache_dir) / f"transfer_{key.hex()[:16]}.bin"


def load_psf_cache(path: Path, key: Optional[bytes] = None) -> TransferCube:
    return load_transfer(path, key)


def cache_psfs(config: ExperimentConfig) -> Tuple[TransferCube, bool]:
    """
    TransferCube for the config's candidate planes, content-addressed in cache_dir.

    Returns:
        (cube, hit) where hit tells whether PSF synthesis was skipped
    """
    distances = config.candidates().plane_distances
    key = psf_cache_key(config, distances)
    path = psf_cache_path(config, key)
    if path.exists():
        try:
            cube = load_psf_cache(path, key)
            logger.info(f"✅ PSF cache hit: {path}")
            return cube, True
        except CacheError as e:
            logger.warning(f"⚠️  Ignoring PSF cache ({e}); recomputing")

    psfs = generate_psf_stack(config.sieve, config.setup, distances, config.kernel_size,
                              config.resolved_pitch)
    cube = build_transfer(psfs, config.image_side)
    tmp = path.with_name(f"{path.name}.{os.getpid()}.{id(cube)}.tmp")
    try:
        save_transfer(cube, tmp, key)
        tmp.replace(path)
        logger.info(f"Cached transfer functions at {path}")
    except OSError as e:
        logger.warning(f"⚠️  Could not write PSF cache {path}: {e}")
        tmp.unlink(missing_ok=True)
    return cube, False


def build_prior(config: ExperimentConfig):
    if config.prior.kind == PriorKind.POWER_SPECTRUM.value:
        spectrum = isotropic_power_spectrum(config.image_side, config.prior.scale)
        return make_prior(PriorKind.POWER_SPECTRUM, config.setup, config.image_side, spectrum)
    return make_prior(PriorKind.WHITE, config.setup, config.image_side)


def lambda_grid(config: ExperimentConfig) -> np.ndarray:
    lam = config.lambda_reg
    return default_lambda_grid(lam.grid_count, lam.grid_min, lam.grid_max)


def reconstruct_and_score(source: SourceCube, transfer: TransferCube, prior, multiplicity,
                          config: ExperimentConfig, lambda_reg: float,
                          seed: int) -> Tuple[SourceCube, List[float]]:
    """Simulate the configuration's measurements, MAP-reconstruct and score per source."""
    meas = simulate_measurements(source, transfer, multiplicity, config.noise_model(lambda_reg), seed)
    estimate = map_reconstruct_fast(meas, transfer, prior, lambda_reg)
    return estimate, source_ssims(source.images, estimate.images)


@dataclass
class ExperimentReport:
    """Everything needed to reproduce and summarize one experiment."""
    config: Dict[str, Any]
    plane_distances: List[float]
    lambda_reg: float
    lambda_grid: List[float]
    lambda_scores: List[float]
    selected_multiplicity: List[int]
    focal_multiplicity: List[int]
    cost_history: List[Tuple[int, float]]
    initial_cost: float
    evaluations: int
    ssim_csbs: List[float]
    ssim_focal: List[float]
    seeds: Dict[str, int]
    sse_csbs: List[float] = field(default_factory=list)
    sse_focal: List[float] = field(default_factory=list)
    psnr_csbs: List[float] = field(default_factory=list)
    psnr_focal: List[float] = field(default_factory=list)
    runtimes: Dict[str, float] = field(default_factory=dict)
    psf_cache_hit: bool = False

    @property
    def mean_ssim_csbs(self) -> float:
        return float(np.mean(self.ssim_csbs))

    @property
    def mean_ssim_focal(self) -> float:
        return float(np.mean(self.ssim_focal))

    @property
    def selected_distances(self) -> List[float]:
        return [d for d, k in zip(self.plane_distances, self.selected_multiplicity) for _ in range(k)]

    def cost_trace(self) -> List[float]:
        return [self.initial_cost] + [c for _, c in self.cost_history]

    def to_dict(self) -> Dict[str, Any]:
        data = dataclasses.asdict(self)
        data['selected_distances'] = self.selected_distances
        data['mean_ssim_csbs'] = self.mean_ssim_csbs
        data['mean_ssim_focal'] = self.mean_ssim_focal
        return data


def select_lambda(config: ExperimentConfig, source: SourceCube, transfer: TransferCube, prior,
                  focal: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    """Fixed λ, or the grid value maximizing focal-plane reconstruction SSIM."""
    if config.lambda_reg.fixed is not None:
        lam = config.lambda_reg.fixed
        return lam, np.array([lam]), np.array([math.nan])

    def closure(lam: float) -> float:
        _, scores = reconstruct_and_score(source, transfer, prior, focal, config, lam,
                                          config.noise.seed)
        return float(np.mean(scores))

    result = lambda_search(closure, lambda_grid(config))
    return result.best_lambda, result.grid, result.scores


def run_single(config: ExperimentConfig, output_dir: Optional[Path] = None) -> ExperimentReport:
    """
    One experiment: PSFs -> transfer -> λ search on the focal baseline -> CSBS ->
    simulate and reconstruct both configurations with the same source and seed -> score.

    Args:
        config: Validated experiment configuration
        output_dir: When given, every artifact of the run is written there

    Returns:
        ExperimentReport
    """
    runtimes: Dict[str, float] = {}
    logger.info(f"{'=' * 60}")
    logger.info(f"🚀 Experiment: S={len(config.wavelengths)}, N={config.image_side}, "
                f"C={config.grid.count}x{config.grid.copies}, M={config.target_m}, "
                f"SNR={config.noise.snr_db} dB")
    logger.info(f"{'=' * 60}")

    with stage('psf', runtimes):
        transfer, hit = cache_psfs(config)
        candidates = config.candidates()
    with stage('source', runtimes):
        source = make_source_cube(config.source.generator, config.wavelengths, config.image_side,
                                  config.source.seed, config.source.paths)
        prior = build_prior(config)
        focal = focal_plane_config(config.sieve, config.setup, config.target_m, candidates)
    with stage('lambda', runtimes):
        lam, grid, scores = select_lambda(config, source, transfer, prior, focal)
    with stage('select', runtimes):
        state = csbs(candidates, config.target_m, GramCost(transfer, prior, lam),
                     workers=config.workers)
    with stage('reconstruct', runtimes):
        csbs_estimate, ssim_csbs = reconstruct_and_score(source, transfer, prior, state.multiplicity,
                                                         config, lam, config.noise.seed)
        focal_estimate, ssim_focal = reconstruct_and_score(source, transfer, prior, focal,
                                                           config, lam, config.noise.seed)
        sse_csbs, psnr_csbs = source_errors(source.images, csbs_estimate.images)
        sse_focal, psnr_focal = source_errors(source.images, focal_estimate.images)

    report = ExperimentReport(
        config=config.to_dict(), plane_distances=list(candidates.plane_distances),
        lambda_reg=lam, lambda_grid=grid.tolist(), lambda_scores=scores.tolist(),
        selected_multiplicity=state.multiplicity.tolist(), focal_multiplicity=focal.tolist(),
        cost_history=[(int(p), float(c)) for p, c in state.history],
        initial_cost=state.initial_cost, evaluations=state.evaluations,
        ssim_csbs=ssim_csbs, ssim_focal=ssim_focal,
        sse_csbs=sse_csbs, sse_focal=sse_focal, psnr_csbs=psnr_csbs, psnr_focal=psnr_focal,
        seeds={'noise': config.noise.seed, 'source': config.source.seed},
        runtimes=runtimes, psf_cache_hit=hit)
    logger.info(f"✅ Mean SSIM: CSBS {report.mean_ssim_csbs:.4f} vs focal {report.mean_ssim_focal:.4f} "
                f"(λ={lam:.4e})")

    if output_dir is not None:
        with stage('write', runtimes):
            write_run_outputs(report, Path(output_dir), config, transfer, source,
                              csbs_estimate, focal_estimate)
    return report


def write_run_outputs(report: ExperimentReport, out: Path, config: ExperimentConfig,
                      transfer: TransferCube, source: SourceCube, csbs_estimate: SourceCube,
                      focal_estimate: SourceCube) -> None:
    """CSVs, summary workbook, report.json, images with raw data, and figures."""
    out.mkdir(parents=True, exist_ok=True)
    artifacts.write_yaml(out / 'config.yaml', report.config)
    trace = artifacts.cost_trace_frame(report.cost_history, report.plane_distances)
    selection = artifacts.selection_frame(report.plane_distances, report.selected_multiplicity)
    focal = artifacts.selection_frame(report.plane_distances, report.focal_multiplicity)
    ssim_table = pd.DataFrame({'source': np.arange(len(report.ssim_csbs)),
                               'wavelength_m': list(config.wavelengths),
                               'ssim_csbs': report.ssim_csbs, 'ssim_focal': report.ssim_focal,
                               'sse_csbs': report.sse_csbs, 'sse_focal': report.sse_focal,
                               'psnr_csbs': report.psnr_csbs, 'psnr_focal': report.psnr_focal})
    lambdas = pd.DataFrame({'lambda': report.lambda_grid, 'focal_ssim': report.lambda_scores})
    artifacts.write_csv(trace, out / 'cost_trace.csv')
    artifacts.write_csv(selection, out / 'selection.csv')
    artifacts.write_csv(focal, out / 'focal_selection.csv')
    artifacts.write_csv(ssim_table, out / 'ssim.csv')
    artifacts.write_csv(lambdas, out / 'lambda_search.csv')
    artifacts.write_excel_summary(out / 'summary.xlsx', {
        'selection': selection, 'focal': focal, 'cost_trace': trace,
        'ssim': ssim_table, 'lambda_search': lambdas})
    artifacts.write_json(out / 'report.json', report.to_dict())

    images = out / 'images'
    for s in range(source.num_sources):
        artifacts.write_image_with_raw(source.images[s], images, f'source_s{s}')
        artifacts.write_image_with_raw(csbs_estimate.images[s], images, f'recon_csbs_s{s}')
        artifacts.write_image_with_raw(focal_estimate.images[s], images, f'recon_focal_s{s}')

    figures = out / 'figures'
    focals = [focal_length(config.sieve, w) for w in config.wavelengths]
    artifacts.plot_cost_trace(report.cost_trace(), figures / 'cost_trace.png')
    artifacts.plot_selection(report.plane_distances, report.selected_multiplicity, focals,
                             figures / 'selection.png', report.focal_multiplicity)
    focal_row, csbs_row, _ = psf_pairs(transfer, report.plane_distances,
                                       report.selected_multiplicity, focals[0])
    artifacts.plot_psf_pairs(focal_row, csbs_row, [f'λ{s + 1}' for s in range(len(focals))],
                             figures / 'psf_pairs.png')


def psf_pairs(transfer: TransferCube, plane_distances: Sequence[float],
              selected_multiplicity: Sequence[int],
              focal_distance: float) -> Tuple[List[np.ndarray], List[np.ndarray], Tuple[int, int]]:
    """
    PSFs of every source at the candidate nearest `focal_distance` and at the retained
    CSBS plane with the most copies (lowest index on ties), column s holding source s.
    """
    focal_plane = int(np.argmin(np.abs(np.asarray(plane_distances) - focal_distance)))
    csbs_plane = int(np.argmax(selected_multiplicity))
    sources = range(transfer.num_sources)
    return ([extract_psf(transfer, focal_plane, s) for s in sources],
            [extract_psf(transfer, csbs_plane, s) for s in sources],
            (focal_plane, csbs_plane))


# ---------------------------------------------------------------------------
# Sweep
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepCell:
    index: int
    num_sources: int
    snr_db: float
    separation_dof: float


def sweep_cells(config: ExperimentConfig) -> List[SweepCell]:
    axes = config.sweep
    cells = []
    for s in axes.num_sources:
        for snr in axes.snr_db:
            for sep in axes.separation_dof:
                cells.append(SweepCell(len(cells), s, snr, sep))
    return cells


def cell_seeds(base_seed: int, index: int, count: int) -> List[int]:
    """Seed of each repetition of a cell: base ⊕ index first, then a SeedSequence stream."""
    cell_seed = base_seed ^ index
    children = np.random.SeedSequence(cell_seed).spawn(count - 1) if count > 1 else []
    return [cell_seed] + [int(child.generate_state(1)[0]) for child in children]


def cell_config(config: ExperimentConfig, cell: SweepCell, seed: int) -> ExperimentConfig:
    """Config of one sweep cell; wavelengths spaced so adjacent foci sit sep·DOF apart."""
    try:
        setup = wavelengths_for_separation(config.sieve, config.wavelengths[0], cell.num_sources,
                                           cell.separation_dof)
    except InvalidArgumentError as e:
        raise ConfigError(f"sweep cell {cell}: {e}") from e
    target_m = max(config.target_m, cell.num_sources)
    grid = dataclasses.replace(config.grid, min_distance=None, max_distance=None)
    return dataclasses.replace(config, wavelengths=setup.wavelengths, grid=grid, target_m=target_m,
                               noise=NoiseSpec(snr_db=cell.snr_db, seed=seed), workers=1)


def _run_cell(config: ExperimentConfig, cell: SweepCell, seeds: List[int]) -> Dict[str, Any]:
    csbs_scores, focal_scores = [], []
    for seed in seeds:
        report = run_single(cell_config(config, cell, seed))
        csbs_scores.append(report.mean_ssim_csbs)
        focal_scores.append(report.mean_ssim_focal)
    csbs_mean, csbs_spread = summarize_seeds(csbs_scores)
    focal_mean, focal_spread = summarize_seeds(focal_scores)
    return {'S': cell.num_sources, 'snr_db': cell.snr_db, 'sep_dof': cell.separation_dof,
            'ssim_csbs': csbs_mean, 'ssim_focal': focal_mean,
            'ssim_csbs_spread': csbs_spread, 'ssim_focal_spread': focal_spread}


@dataclass
class SweepResult:
    table: pd.DataFrame
    spread: pd.DataFrame
    failures: List[Dict[str, Any]]
    runtime: float


def run_sweep(config: ExperimentConfig, output_dir: Optional[Path] = None,
              workers: Optional[int] = None, seeds: Optional[int] = None) -> SweepResult:
    """
    Run every (S, snr, separation) cell; failing cells are recorded and skipped.

    Cells run concurrently up to `workers`; each owns its seed (base seed ⊕ cell index),
    and rows are reported in cell order whatever the completion order.
    """
    workers = workers or config.workers
    repeats = seeds or config.sweep.seeds
    cells = sweep_cells(config)
    start = time.perf_counter()
    logger.info(f"{'=' * 60}")
    logger.info(f"🚀 Sweep: {len(cells)} cells x {repeats} seed(s), {workers} worker(s)")
    logger.info(f"{'=' * 60}")

    rows: Dict[int, Dict[str, Any]] = {}
    failures: List[Dict[str, Any]] = []
    with ThreadPoolExecutor(max_workers=workers) as executor:
        future_to_cell = {
            executor.submit(_run_cell, config, cell, cell_seeds(config.noise.seed, cell.index, repeats)): cell
            for cell in cells}
        for done, future in enumerate(as_completed(future_to_cell), start=1):
            cell = future_to_cell[future]
            try:
                rows[cell.index] = future.result()
                logger.info(f"📍 Cell {done}/{len(cells)} ({100.0 * done / len(cells):.1f}%): "
                            f"S={cell.num_sources}, SNR={cell.snr_db:g}, sep={cell.separation_dof:g} ✅")
            except Exception as e:
                logger.warning(f"⚠️  Cell {cell.index} (S={cell.num_sources}, SNR={cell.snr_db:g}, "
                               f"sep={cell.separation_dof:g}) failed: {e}")
                failures.append({'S': cell.num_sources, 'snr_db': cell.snr_db,
                                 'sep_dof': cell.separation_dof, 'error': str(e)})

    ordered = [rows[i] for i in sorted(rows)]
    table = artifacts.sweep_frame(ordered)
    spread = pd.DataFrame(ordered, columns=['S', 'snr_db', 'sep_dof', 'ssim_csbs_spread',
                                            'ssim_focal_spread'])
    failures.sort(key=lambda f: (f['S'], f['snr_db'], f['sep_dof']))
    result = SweepResult(table, spread, failures, time.perf_counter() - start)
    logger.info(f"✅ Sweep complete: {len(ordered)} cells, {len(failures)} failed, "
                f"{result.runtime:.1f} s")

    if output_dir is not None:
        write_sweep_outputs(result, Path(output_dir), config, repeats)
    return result


def write_sweep_outputs(result: SweepResult, out: Path, config: ExperimentConfig,
                        repeats: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    artifacts.write_yaml(out / 'config.yaml', config.to_dict())
    artifacts.write_csv(result.table, out / 'sweep.csv')
    sheets = {'sweep': result.table}
    if repeats > 1:
        artifacts.write_csv(result.spread, out / 'sweep_spread.csv')
        sheets['spread'] = result.spread
    failures = pd.DataFrame(result.failures, columns=['S', 'snr_db', 'sep_dof', 'error'])
    if result.failures:
        artifacts.write_csv(failures, out / 'failures.csv')
        sheets['failures'] = failures
    artifacts.write_excel_summary(out / 'summary.xlsx', sheets)
    artifacts.write_json(out / 'report.json', {
        'cells': len(result.table) + len(result.failures), 'completed': len(result.table),
        'failures': result.failures, 'seeds_per_cell': repeats, 'base_seed': config.noise.seed,
        'runtime_s': result.runtime})
    if len(result.table):
        artifacts.plot_sweep(result.table, out / 'sweep.png')


# ---------------------------------------------------------------------------
# Individual verbs
# ---------------------------------------------------------------------------

def export_psfs(config: ExperimentConfig, out: Path) -> TransferCube:
    """Transfer cube plus a PSF summary table, raw PSF stack and focal-plane montage."""
    runtimes: Dict[str, float] = {}
    with stage('psf', runtimes):
        transfer, _ = cache_psfs(config)
    candidates = config.candidates()
    stack = np.stack([[extract_psf(transfer, c, s) for s in range(transfer.num_sources)]
                      for c in range(transfer.num_planes)])
    rows = [{'plane_index': c, 'distance_m': d, 'source': s, 'wavelength_m': w,
             'peak': float(stack[c, s].max())}
            for c, d in enumerate(candidates.plane_distances)
            for s, w in enumerate(config.wavelengths)]
    artifacts.write_csv(pd.DataFrame(rows), out / 'psfs.csv')
    artifacts.write_raw(stack, out / 'psf_stack.raw')

    focals = [focal_length(config.sieve, w) for w in config.wavelengths]
    planes = [int(np.argmin(np.abs(np.asarray(candidates.plane_distances) - f))) for f in focals]
    artifacts.plot_psf_montage([stack[p, s] for s, p in enumerate(planes)],
                               [f'λ={w * 1e9:.2f} nm, d={candidates.plane_distances[p] * 1e3:.2f} mm'
                                for w, p in zip(config.wavelengths, planes)],
                               out / 'figures' / 'focal_psfs.png')
    return transfer


def select_only(config: ExperimentConfig, out: Path, workers: int = 1) -> None:
    runtimes: Dict[str, float] = {}
    with stage('psf', runtimes):
        transfer, _ = cache_psfs(config)
        candidates = config.candidates()
    with stage('lambda', runtimes):
        prior = build_prior(config)
        source = make_source_cube(config.source.generator, config.wavelengths, config.image_side,
                                  config.source.seed, config.source.paths)
        focal = focal_plane_config(config.sieve, config.setup, config.target_m, candidates)
        lam, _, _ = select_lambda(config, source, transfer, prior, focal)
    with stage('select', runtimes):
        state = csbs(candidates, config.target_m, GramCost(transfer, prior, lam), workers=workers)
    artifacts.write_yaml(out / 'config.yaml', config.to_dict())
    artifacts.write_csv(artifacts.cost_trace_frame(state.history, candidates.plane_distances),
                        out / 'cost_trace.csv')
    artifacts.write_csv(artifacts.selection_frame(candidates.plane_distances, state.multiplicity),
                        out / 'selection.csv')
    focals = [focal_length(config.sieve, w) for w in config.wavelengths]
    artifacts.plot_cost_trace(state.cost_trace(), out / 'figures' / 'cost_trace.png')
    artifacts.plot_selection(candidates.plane_distances, state.multiplicity, focals,
                             out / 'figures' / 'selection.png', focal)
    artifacts.write_json(out / 'report.json', {'lambda_reg': lam, 'evaluations': state.evaluations,
                                                'final_cost': state.final_cost, 'runtimes': runtimes})


def reconstruct_only(config: ExperimentConfig, out: Path, selection: Optional[str],
                     lambda_reg: Optional[float]) -> List[float]:
    runtimes: Dict[str, float] = {}
    with stage('psf', runtimes):
        transfer, _ = cache_psfs(config)
        candidates = config.candidates()
    with stage('reconstruct', runtimes):
        prior = build_prior(config)
        source = make_source_cube(config.source.generator, config.wavelengths, config.image_side,
                                  config.source.seed, config.source.paths)
        if selection:
            multiplicity = artifacts.read_selection_csv(selection, candidates.num_planes)
        else:
            multiplicity = focal_plane_config(config.sieve, config.setup, config.target_m, candidates)
        lam = lambda_reg or config.lambda_reg.fixed
        if lam is None:
            focal = focal_plane_config(config.sieve, config.setup, config.target_m, candidates)
            lam, _, _ = select_lambda(config, source, transfer, prior, focal)
        estimate, scores = reconstruct_and_score(source, transfer, prior, multiplicity, config,
                                                 lam, config.noise.seed)
    artifacts.write_yaml(out / 'config.yaml', config.to_dict())
    artifacts.write_csv(pd.DataFrame({'source': np.arange(len(scores)), 'ssim': scores}),
                        out / 'ssim.csv')
    for s in range(estimate.num_sources):
        artifacts.write_image_with_raw(estimate.images[s], out / 'images', f'recon_s{s}')
    artifacts.write_json(out / 'report.json', {'lambda_reg': lam, 'ssim': scores,
                                                'mean_ssim': float(np.mean(scores)),
                                                'runtimes': runtimes})
    return scores


# ---------------------------------------------------------------------------
# Command line
# ---------------------------------------------------------------------------

def timestamped_dir(base: str, verb: str) -> Path:
    stamp = datetime.now().strftime('%Y%m%d_%H%M%S')
    path = Path(base) / f'{verb}_{stamp}'
    suffix = 1
    while path.exists():
        path = Path(base) / f'{verb}_{stamp}_{suffix}'
        suffix += 1
    path.mkdir(parents=True)
    return path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description='Measurement-plane selection for diffractive-lens multispectral imaging')
    parser.add_argument('--log-level', default='INFO',
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    verbs = parser.add_subparsers(dest='verb', required=True)

    def common(sub):
        sub.add_argument('--config', help='YAML experiment config')
        sub.add_argument('--set', dest='overrides', action='append', default=[],
                         metavar='KEY=VALUE', help='Override a config value (dotted key)')
        sub.add_argument('--output-dir', help='Base output directory (overrides output_dir)')
        return sub

    common(verbs.add_parser('psf', help='Generate, cache and export the PSF stack'))
    select = common(verbs.add_parser('select', help='λ search and CSBS selection'))
    select.add_argument('--workers', type=int, default=1, help='Threads for CSBS trials')
    recon = common(verbs.add_parser('reconstruct', help='Simulate and reconstruct a configuration'))
    recon.add_argument('--selection', help='Selection CSV (default: focal-plane baseline)')
    recon.add_argument('--lambda', dest='lambda_reg', type=float, help='Regularization weight')
    common(verbs.add_parser('run', help='Full CSBS vs focal-plane experiment'))
    sweep = common(verbs.add_parser('sweep', help='Sweep S, SNR and separation'))
    sweep.add_argument('--workers', type=int, help='Parallel sweep cells')
    sweep.add_argument('--seeds', type=int, help='Repetitions per cell')
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format='%(asctime)s - %(levelname)s - %(message)s')
    try:
        config = load_config(args.config, args.overrides)
        out = timestamped_dir(args.output_dir or config.output_dir, args.verb)
        logger.info(f"Output directory: {out}")

        if args.verb == 'psf':
            export_psfs(config, out)
        elif args.verb == 'select':
            select_only(config, out, args.workers)
        elif args.verb == 'reconstruct':
            scores = reconstruct_only(config, out, args.selection, args.lambda_reg)
            print(f"Mean SSIM {np.mean(scores):.4f} -> {out}")
        elif args.verb == 'run':
            report = run_single(config, out)
            print(f"SSIM CSBS {report.mean_ssim_csbs:.4f} | focal {report.mean_ssim_focal:.4f} "
                  f"| λ {report.lambda_reg:.4e} -> {out}")
        elif args.verb == 'sweep':
            if args.seeds is not None and args.seeds < 1:
                raise ConfigError(f"--seeds must be >= 1, got {args.seeds}")
            result = run_sweep(config, out, workers=args.workers, seeds=args.seeds)
            print(f"{len(result.table)} cells completed, {len(result.failures)} failed -> {out}")
            if result.failures:
                return EXIT_PARTIAL_SWEEP
        return EXIT_OK
    except ConfigError as e:
        logger.error(f"❌ Configuration error: {e}")
        return EXIT_CONFIG
    except StageError as e:
        logger.error(f"❌ {e}")
        if isinstance(e.cause, (ConfigError, InvalidArgumentError)) and not e.numerical:
            return EXIT_CONFIG
        return EXIT_NUMERICAL
    except (SingularSystemError, np.linalg.LinAlgError, FloatingPointError) as e:
        logger.error(f"❌ Numerical failure: {e}")
        return EXIT_NUMERICAL


if __name__ == '__main__':
    sys.exit(main())
