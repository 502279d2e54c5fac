"""
Unit tests for harness.py
"""

import pytest
import sys
import os
import dataclasses
import logging

import numpy as np
import yaml

# Add parent directory to path to import the project modules
ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, ROOT)

import artifacts
import harness
from errors import ConfigError, SingularSystemError, StageError
from spectral import build_transfer
from harness import (EXIT_CONFIG, EXIT_NUMERICAL, EXIT_PARTIAL_SWEEP, SweepCell, cache_psfs,
                     cell_config, cell_seeds, config_from_dict, load_config, main,
                     psf_cache_key, psf_cache_path, psf_pairs, run_single, run_sweep, stage,
                     timestamped_dir)


def small_config(tmp_path, **extra):
    """One source, five near-focus planes, 32×32 images, no noise and a tiny fixed λ."""
    raw = {
        'sieve': {'pupil_samples': 128},
        'wavelengths': [33.4e-9],
        'grid': {'count': 5, 'copies': 1, 'margin_dof': 0.5},
        'target_m': 2,
        'noise': {'snr_db': float('inf'), 'seed': 3},
        'lambda': {'fixed': 1e-10},
        'source': {'generator': 'shapes', 'seed': 1},
        'image_side': 32,
        'kernel_size': 31,
        'pixel_pitch': 4.5e-6,
        'output_dir': str(tmp_path / 'results'),
        'cache_dir': str(tmp_path / 'cache'),
    }
    raw.update(extra)
    return raw


def write_config(tmp_path, raw, name='config.yaml'):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(raw))
    return str(path)


class TestConfig:
    """YAML loading, overrides and validation."""

    def test_defaults(self):
        """An empty mapping gives the desk-scale defaults."""
        config = config_from_dict({})
        assert config.wavelengths == (33.4e-9, 33.5e-9)
        assert config.target_m == 12
        assert config.grid.count == 30 and config.grid.copies == 4
        assert config.lambda_reg.grid_count == 20
        assert config.resolved_pitch == pytest.approx(2e-6)
        assert 'lambda' in config.to_dict()

    def test_shipped_configs_load(self):
        """The example configs validate."""
        desk = load_config(os.path.join(ROOT, 'configs', 'desk_two_source.yaml'))
        assert desk.sieve.diameter == pytest.approx(1e-2)
        assert desk.noise.snr_db == 15.0
        sweep = load_config(os.path.join(ROOT, 'configs', 'sweep.yaml'))
        assert sweep.sweep.separation_dof == (1.0, 2.0, 3.0, 5.0, 10.0, 15.0)

    def test_candidate_grid_spans_foci(self):
        """The automatic grid brackets every focal length."""
        config = config_from_dict({})
        candidates = config.candidates()
        assert candidates.num_planes == 30 and candidates.total == 120
        focals = [harness.focal_length(config.sieve, w) for w in config.wavelengths]
        assert candidates.plane_distances[0] < min(focals)
        assert candidates.plane_distances[-1] > max(focals)

    def test_overrides(self):
        """--set values are parsed as YAML and applied by dotted key."""
        config = load_config(None, ['target_m=3', 'noise.snr_db=20', 'lambda.fixed=0.5'])
        assert config.target_m == 3
        assert config.noise.snr_db == 20.0
        assert config.lambda_reg.fixed == 0.5

    def test_bad_override(self):
        """Overrides need key=value."""
        with pytest.raises(ConfigError):
            load_config(None, ['target_m'])

    def test_string_floats(self):
        """Exponent floats that YAML 1.1 reads as strings are converted."""
        config = config_from_dict({'lambda': {'fixed': '1e-3'}})
        assert config.lambda_reg.fixed == pytest.approx(1e-3)

    @pytest.mark.parametrize('raw', [
        {'bogus': 1},
        {'grid': {'bogus': 1}},
        {'target_m': 1},
        {'grid': {'min_distance': 1.0, 'max_distance': 1.2}},
        {'wavelengths': [33.5e-9, 33.4e-9]},
        {'kernel_size': 64},
        {'prior': {'kind': 'laplacian'}},
        {'source': {'generator': 'files'}},
        {'target_m': 'many'},
        {'noise': {'snr_db': float('-inf')}},
    ])
    def test_invalid(self, raw):
        """Invalid configs raise ConfigError."""
        with pytest.raises(ConfigError):
            config_from_dict(raw)

    def test_missing_file(self, tmp_path):
        """An unreadable config path is a configuration error."""
        with pytest.raises(ConfigError):
            load_config(str(tmp_path / 'missing.yaml'))


class TestPsfCache:
    """Content-addressed transfer cache."""

    def test_cold_then_warm(self, tmp_path):
        """The second call loads exactly what the first computed."""
        config = config_from_dict(small_config(tmp_path))
        cold, hit = cache_psfs(config)
        assert not hit
        warm, hit = cache_psfs(config)
        assert hit
        np.testing.assert_array_equal(cold.values, warm.values)
        assert warm.plane_distances == cold.plane_distances

    def test_corrupted_cache_is_recomputed(self, tmp_path, caplog):
        """A damaged cache file is reported and rebuilt."""
        config = config_from_dict(small_config(tmp_path))
        cube, _ = cache_psfs(config)
        path = psf_cache_path(config, psf_cache_key(config, config.candidates().plane_distances))
        path.write_bytes(b'garbage')
        with caplog.at_level(logging.WARNING):
            again, hit = cache_psfs(config)
        assert not hit
        assert 'Ignoring PSF cache' in caplog.text
        np.testing.assert_array_equal(again.values, cube.values)

    def test_key_follows_optics(self, tmp_path):
        """Changing the optics changes the cache key."""
        config = config_from_dict(small_config(tmp_path))
        other = dataclasses.replace(config, pixel_pitch=5e-6)
        distances = config.candidates().plane_distances
        assert psf_cache_key(config, distances) != psf_cache_key(other, distances)


class TestRunSingle:
    """End-to-end experiment."""

    def test_near_focus_noiseless_recovery(self, tmp_path):
        """Noiseless measurements with a tiny λ reconstruct the scene almost exactly."""
        config = config_from_dict(small_config(tmp_path))
        report = run_single(config)
        assert report.mean_ssim_csbs > 0.99
        assert report.mean_ssim_focal > 0.99
        assert sum(report.selected_multiplicity) == 2
        assert report.evaluations == 5 + 4 + 3
        assert report.lambda_reg == 1e-10
        costs = report.cost_trace()
        assert all(b >= a * (1 - 1e-12) for a, b in zip(costs, costs[1:]))

    def test_outputs_written(self, tmp_path):
        """A run writes its tables, workbook, report, images and figures."""
        config = config_from_dict(small_config(tmp_path))
        out = tmp_path / 'run'
        run_single(config, out)
        for name in ('config.yaml', 'cost_trace.csv', 'selection.csv', 'focal_selection.csv',
                     'ssim.csv', 'lambda_search.csv', 'summary.xlsx', 'report.json',
                     'images/source_s0.png', 'images/source_s0.raw', 'images/recon_csbs_s0.json',
                     'figures/cost_trace.png', 'figures/selection.png', 'figures/psf_pairs.png'):
            assert (out / name).exists(), name

    def test_runs_are_deterministic(self, tmp_path):
        """Two runs of the same config write byte-identical tables."""
        raw = small_config(tmp_path, noise={'snr_db': 20.0, 'seed': 4})
        config = config_from_dict(raw)
        run_single(config, tmp_path / 'a')
        run_single(config, tmp_path / 'b')
        for name in ('cost_trace.csv', 'selection.csv', 'ssim.csv'):
            assert (tmp_path / 'a' / name).read_bytes() == (tmp_path / 'b' / name).read_bytes()

    def test_worker_count_does_not_change_outputs(self, tmp_path):
        """Threaded CSBS trials write the same tables as a single worker."""
        raw = small_config(tmp_path, wavelengths=[33.4e-9, 33.5e-9], target_m=3,
                           noise={'snr_db': 20.0, 'seed': 4}, **{'lambda': {'fixed': 0.1}})
        for workers, name in ((1, 'serial'), (3, 'threaded')):
            run_single(config_from_dict(dict(raw, workers=workers)), tmp_path / name)
        for name in ('cost_trace.csv', 'selection.csv', 'ssim.csv'):
            assert ((tmp_path / 'serial' / name).read_bytes()
                    == (tmp_path / 'threaded' / name).read_bytes()), name

    def test_errors_reported_per_source(self, tmp_path):
        """SSE and PSNR of both configurations land in the report and in ssim.csv."""
        config = config_from_dict(small_config(tmp_path))
        out = tmp_path / 'run'
        report = run_single(config, out)
        assert len(report.sse_csbs) == len(report.psnr_focal) == 1
        assert report.sse_csbs[0] >= 0 and report.sse_focal[0] >= 0
        assert report.psnr_csbs[0] > 20 and report.psnr_focal[0] > 20
        table = artifacts.read_csv(out / 'ssim.csv')
        for column in ('sse_csbs', 'sse_focal', 'psnr_csbs', 'psnr_focal'):
            assert column in table.columns
        assert table['sse_csbs'][0] == report.sse_csbs[0]

    def test_psf_pairs_follow_each_source(self):
        """Each column of the PSF comparison holds that source's kernel at both planes."""
        rng = np.random.default_rng(7)
        kernels = [[rng.random((3, 3)) for _ in range(2)] for _ in range(4)]
        kernels = [[k / k.sum() for k in row] for row in kernels]
        transfer = build_transfer(kernels, 8, plane_distances=[1.0, 2.0, 3.0, 4.0])
        focal_row, csbs_row, planes = psf_pairs(transfer, [1.0, 2.0, 3.0, 4.0], [0, 2, 0, 2], 2.9)
        assert planes == (2, 1)
        for s in range(2):
            np.testing.assert_allclose(focal_row[s], kernels[2][s], atol=1e-12)
            np.testing.assert_allclose(csbs_row[s], kernels[1][s], atol=1e-12)
        assert not np.allclose(csbs_row[0], csbs_row[1])

    def test_stage_tags_failures(self):
        """Errors inside a stage carry the stage name and runtimes are recorded."""
        runtimes = {}
        with pytest.raises(StageError) as info:
            with stage('select', runtimes):
                raise SingularSystemError('singular')
        assert info.value.stage == 'select'
        assert info.value.numerical
        assert 'select' in runtimes


class TestSweep:
    """Parameter sweeps."""

    def sweep_raw(self, tmp_path, separations, num_sources=(1,)):
        return small_config(tmp_path, sweep={'num_sources': list(num_sources), 'snr_db': [30.0],
                                             'separation_dof': separations, 'seeds': 1})

    def test_cell_seeds(self):
        """The first seed is base ⊕ index; extra seeds are reproducible."""
        assert cell_seeds(5, 3, 1) == [6]
        seeds = cell_seeds(5, 3, 3)
        assert len(seeds) == 3 and seeds[0] == 6
        assert seeds == cell_seeds(5, 3, 3)

    def test_single_cell_matches_run(self, tmp_path):
        """A one-cell sweep reports what run_single reports for that cell."""
        config = config_from_dict(self.sweep_raw(tmp_path, [1.0]))
        result = run_sweep(config)
        assert result.failures == []
        cell = SweepCell(0, 1, 30.0, 1.0)
        report = run_single(cell_config(config, cell, cell_seeds(config.noise.seed, 0, 1)[0]))
        assert result.table['ssim_csbs'][0] == report.mean_ssim_csbs
        assert result.table['ssim_focal'][0] == report.mean_ssim_focal

    def test_worker_count_does_not_change_sweep_table(self, tmp_path):
        """sweep.csv is byte-identical with one worker or several."""
        config = config_from_dict(self.sweep_raw(tmp_path, [1.0, 2.0, 3.0]))
        run_sweep(config, tmp_path / 'serial', workers=1, seeds=2)
        run_sweep(config, tmp_path / 'threaded', workers=3, seeds=2)
        for name in ('sweep.csv', 'sweep_spread.csv'):
            assert ((tmp_path / 'serial' / name).read_bytes()
                    == (tmp_path / 'threaded' / name).read_bytes()), name

    def test_failed_cell_is_recorded(self, tmp_path):
        """A cell whose wavelengths cannot be placed is skipped and reported."""
        config = config_from_dict(self.sweep_raw(tmp_path, [1.0, 5000.0], num_sources=[2]))
        result = run_sweep(config, tmp_path / 'sweep', workers=2)
        assert len(result.table) == 1
        assert len(result.failures) == 1 and result.failures[0]['sep_dof'] == 5000.0
        assert (tmp_path / 'sweep' / 'failures.csv').exists()
        assert (tmp_path / 'sweep' / 'sweep.csv').exists()


@pytest.mark.slow
class TestDeskExperiment:
    """The shipped two-source desk experiment."""

    DESK = os.path.join(ROOT, 'configs', 'desk_two_source.yaml')

    @pytest.mark.parametrize('seed', [0, 1, 2, 3, 4])
    def test_csbs_beats_focal_planes(self, tmp_path, seed):
        """CSBS scores above the focal-plane baseline for every noise seed."""
        config = load_config(self.DESK, [f'noise.seed={seed}', f'cache_dir={tmp_path}'])
        report = run_single(config)
        assert report.mean_ssim_csbs > report.mean_ssim_focal

    def test_wide_separation_matches_focal_planes(self, tmp_path):
        """With foci 15 DOF apart the two configurations score alike."""
        config = load_config(self.DESK, [f'cache_dir={tmp_path}', 'sweep.num_sources=[2]',
                                         'sweep.snr_db=[15.0]', 'sweep.separation_dof=[15.0]',
                                         'sweep.seeds=1'])
        result = run_sweep(config)
        assert result.failures == []
        gap = result.table['ssim_csbs'][0] - result.table['ssim_focal'][0]
        assert abs(gap) <= 0.05


class TestMain:
    """Command-line entry point and exit codes."""

    def test_partial_sweep_exit_code(self, tmp_path):
        """A sweep with a failed cell exits with 3."""
        raw = small_config(tmp_path, sweep={'num_sources': [2], 'snr_db': [30.0],
                                            'separation_dof': [1.0, 5000.0]})
        path = write_config(tmp_path, raw)
        code = main(['sweep', '--config', path, '--output-dir', str(tmp_path / 'out')])
        assert code == EXIT_PARTIAL_SWEEP

    def test_config_error_exit_code(self, tmp_path):
        """An invalid config exits with 1."""
        path = write_config(tmp_path, {'bogus': 1})
        assert main(['run', '--config', path]) == EXIT_CONFIG

    def test_numerical_error_exit_code(self, tmp_path, monkeypatch):
        """A singular system during selection exits with 2."""
        def failing_csbs(*args, **kwargs):
            raise SingularSystemError('block 0 not positive definite', 0, (0, 0))

        monkeypatch.setattr(harness, 'csbs', failing_csbs)
        path = write_config(tmp_path, small_config(tmp_path))
        code = main(['run', '--config', path, '--output-dir', str(tmp_path / 'out')])
        assert code == EXIT_NUMERICAL

    def test_psf_export_bad_pitch_exit_code(self, tmp_path, caplog):
        """A pitch too coarse for the pupil grid fails the psf stage with exit 1."""
        path = write_config(tmp_path, small_config(tmp_path, pixel_pitch=10e-6))
        with caplog.at_level(logging.ERROR):
            code = main(['psf', '--config', path, '--output-dir', str(tmp_path / 'out')])
        assert code == EXIT_CONFIG
        assert '[psf]' in caplog.text

    def test_run_exit_code(self, tmp_path):
        """A successful run exits with 0."""
        path = write_config(tmp_path, small_config(tmp_path))
        assert main(['run', '--config', path, '--output-dir', str(tmp_path / 'out')]) == 0

    def test_timestamped_dirs_are_unique(self, tmp_path):
        """Repeated calls never reuse a directory."""
        first = timestamped_dir(str(tmp_path), 'run')
        second = timestamped_dir(str(tmp_path), 'run')
        assert first != second
        assert first.name.startswith('run_') and second.is_dir()


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
