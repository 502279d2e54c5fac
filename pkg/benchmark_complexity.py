#!/usr/bin/env python3
"""
Fast vs Dense Cost Timing
Times cost_fast over N in {32, 64, 128} (S=2) and compares against the dense
oracle at N=16. Prints a table and saves it as CSV.

Usage:
    python benchmark_complexity.py [output.csv]
"""

import logging
import sys
import time

import numpy as np
import pandas as pd

from inverse import cost_dense, cost_fast, equivalent_dense_covariances
from spectral import assemble_gram, build_transfer, make_prior
from optics import SpectralSetup

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

NUM_SOURCES = 2
NUM_PLANES = 4
KERNEL_SIZE = 7
LAMBDA = 1.0


def random_instance(image_side: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    psfs = []
    for _ in range(NUM_PLANES):
        row = []
        for _ in range(NUM_SOURCES):
            kernel = rng.random((KERNEL_SIZE, KERNEL_SIZE))
            row.append(kernel / kernel.sum())
        psfs.append(row)
    transfer = build_transfer(psfs, image_side)
    prior = make_prior('white', SpectralSetup(tuple(range(1, NUM_SOURCES + 1))), image_side)
    return psfs, transfer, prior


def best_time(fn, repeats: int = 5) -> float:
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def main() -> int:
    rows = []
    multiplicity = np.ones(NUM_PLANES, dtype=np.int64)
    logger.info(f"{'=' * 60}")
    logger.info("🚀 Fast cost timing (S=2)")
    logger.info(f"{'=' * 60}")
    for n in (32, 64, 128):
        _, transfer, prior = random_instance(n)
        gram = assemble_gram(transfer, multiplicity)
        elapsed = best_time(lambda: cost_fast(gram, prior, LAMBDA))
        rows.append({'path': 'fast', 'N': n, 'seconds': elapsed})
        logger.info(f"   N={n:4d}: {elapsed * 1e3:.3f} ms")

    _, transfer, prior = random_instance(16)
    sigma_n, sigma_x = equivalent_dense_covariances(prior, LAMBDA, NUM_PLANES)
    elapsed = best_time(lambda: cost_dense(transfer, multiplicity, sigma_n, sigma_x), repeats=2)
    rows.append({'path': 'dense', 'N': 16, 'seconds': elapsed})
    logger.info(f"   dense N=16: {elapsed * 1e3:.1f} ms")

    df = pd.DataFrame(rows)
    fast = df[df['path'] == 'fast'].set_index('N')['seconds']
    for small, large in ((32, 64), (64, 128)):
        logger.info(f"📍 N {small} -> {large}: fast cost time x{fast[large] / fast[small]:.2f}")
    ratio = elapsed / fast[64]
    logger.info(f"📍 Dense N=16 / fast N=64: x{ratio:.0f}")
    logger.info(f"✅ {'OK' if ratio >= 100 else 'BELOW 100x'}")

    if len(sys.argv) > 1:
        df.to_csv(sys.argv[1], index=False)
        logger.info(f"Saved {sys.argv[1]}")
    print(df.to_string(index=False))
    return 0


if __name__ == '__main__':
    sys.exit(main())
