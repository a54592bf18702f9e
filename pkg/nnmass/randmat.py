"""
Random matrix simulations of layerwise Jacobians.

A layer of width w_c in a network of NN-Mass m has, on average, a Jacobian with w_c + m / 2 rows and w_c columns once
    the long-range inputs are accounted for. Here such matrices are drawn with i.i.d. N(0, q) entries and their
    singular spectra are measured. Matrices are plain numpy arrays of shape (H, W).
"""
import csv
import logging
import math

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import NumericError, RangeError
from .utils import derive_seed, generator

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ("width", "mass", "matrix_rows", "trials", "mean_sv", "stddev_sv")


@dataclass(frozen=True)
class SingularSpectrum:
    values: Tuple[float, ...]
    mean: float
    mean_square: float


@dataclass(frozen=True)
class SimSweepRow:
    width: int
    mass: float
    matrix_rows: int
    trials: int
    mean_sv: float
    stddev_sv: float

    def as_row(self):
        return [self.width, self.mass, self.matrix_rows, self.trials, self.mean_sv, self.stddev_sv]


def sample_gaussian(rows, cols, variance=1.0, seed=0, *keys):
    """
    Draw a (rows, cols) matrix of i.i.d. N(0, variance) entries.

    Args:
        rows (int): H, at least 1.
        cols (int): W, at least 1.
        variance (float): q, strictly positive.
        seed (int): The 64-bit seed. Any extra `keys` select an independent sub-stream of it.
    """
    if rows < 1 or cols < 1:
        raise RangeError(f"Matrix dimensions must be positive, got ({rows}, {cols})", rows=rows, cols=cols)
    if not variance > 0:
        raise RangeError(f"Variance must be positive, got {variance}", variance=variance)
    return generator(seed, *keys).normal(0.0, math.sqrt(variance), size=(rows, cols))


def singular_values(matrix):
    """
    The min(H, W) singular values of a matrix, in descending order.

    Raises:
        NumericError: If any entry is NaN or infinite.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if not np.all(np.isfinite(matrix)):
        raise NumericError("Cannot decompose a matrix with non-finite entries", shape=list(matrix.shape))

    # gesdd already returns them sorted descending
    values = np.linalg.svd(matrix, compute_uv=False)
    return SingularSpectrum(tuple(values.tolist()), float(values.mean()), float(np.mean(values ** 2)))


def mean_square_trials(rows, cols, trials, seed):
    """The mean of sigma_i^2 over the singular values of each of `trials` unit variance matrices."""
    if trials < 1:
        raise RangeError(f"At least one trial is required, got {trials}", trials=trials)
    return np.array([singular_values(sample_gaussian(rows, cols, 1.0, seed, trial)).mean_square
                     for trial in range(trials)])


def mean_square_identity_check(rows, cols, trials, seed):
    """
    Estimate E[sigma^2] for unit variance (rows, cols) Gaussian matrices, pooled over trials.

    Notes:
        The expectation is exactly `rows`: the sum of sigma_i^2 is the squared Frobenius norm, whose expectation is
            H * W, spread over W singular values. The result should land within 5 H / sqrt(trials * W) of H.
    """
    if not rows >= cols >= 1:
        raise RangeError(f"The identity is checked for tall matrices, got ({rows}, {cols})", rows=rows, cols=cols)
    return float(mean_square_trials(rows, cols, trials, seed).mean())


def jacobian_rows(width, mass):
    """H = w_c + m / 2, rounded half up."""
    return int(math.floor(width + mass / 2 + 0.5))


def _simulate_one(width, mass, trials, variance, seed, mass_index):
    rows = jacobian_rows(width, mass)
    means = np.array([singular_values(sample_gaussian(rows, width, variance, seed, mass_index, trial)).mean
                      for trial in range(trials)])
    stddev = float(means.std(ddof=1)) if trials > 1 else 0.0
    return SimSweepRow(width, float(mass), rows, trials, float(means.mean()), stddev)


def iter_mass_sweep(width, masses, trials, variance=1.0, seed=0, jobs=1):
    """
    Yield one SimSweepRow per mass, in the order of `masses`.

    Arguments are checked when this is called, not when the first row is pulled. Each trial draws from the stream
        (seed, mass index, trial index), so the rows are the same however many `jobs` run them.
    """
    if width < 1:
        raise RangeError(f"Width must be positive, got {width}", width=width)
    if trials < 1:
        raise RangeError(f"At least one trial is required, got {trials}", trials=trials)
    if not variance > 0:
        raise RangeError(f"Variance must be positive, got {variance}", variance=variance)
    masses = [float(mass) for mass in masses]
    if any(mass < 0 for mass in masses):
        raise RangeError("Masses must be non-negative", masses=masses)
    return _iter_rows(width, masses, trials, variance, seed, jobs)


def _iter_rows(width, masses, trials, variance, seed, jobs):
    if jobs <= 1:
        for index, mass in enumerate(masses):
            row = _simulate_one(width, mass, trials, variance, seed, index)
            logger.info("Width %d mass %g: H=%d mean singular value %.6f", width, mass, row.matrix_rows, row.mean_sv)
            yield row
        return

    with ThreadPoolExecutor(max_workers=jobs) as executor:
        futures = [executor.submit(_simulate_one, width, mass, trials, variance, seed, index)
                   for index, mass in enumerate(masses)]
        for future in futures:
            yield future.result()



def simulate_mass_sweep(width, masses, trials, variance=1.0, seed=0, jobs=1):
    """
    The mean singular value of (w_c + m / 2, w_c) Gaussian matrices for each mass m.

    Args:
        width (int): w_c, the number of columns.
        masses: Non-negative NN-Mass values. Fractional row counts are rounded half up.
        trials (int): Matrices drawn per mass.
        variance (float): The entry variance q.
        seed (int): The 64-bit seed.
        jobs (int): Threads to spread the masses over.

    Returns:
        list: SimSweepRow per mass, where `mean_sv` and `stddev_sv` are the mean and sample standard deviation of the
            per-matrix mean singular value.
    """
    return list(iter_mass_sweep(width, masses, trials, variance, seed, jobs))


def simulate_width_sweep(widths, masses, trials, variance=1.0, seed=0, jobs=1):
    """`simulate_mass_sweep` for several widths, each on its own derived seed. Rows are grouped by width."""
    rows = []
    for index, width in enumerate(widths):
        rows.extend(simulate_mass_sweep(width, masses, trials, variance, derive_seed(seed, index), jobs))
    return rows


def parse_grid(text):
    """Parse "begin:end:step" (end exclusive) into a list of floats. A bare number is a one-element grid."""
    parts = text.split(":")
    if len(parts) == 1:
        return [float(parts[0])]
    if len(parts) != 3:
        raise RangeError(f"Expected begin:end:step, got {text!r}", grid=text)

    begin, end, step = (float(part) for part in parts)
    if step <= 0:
        raise RangeError(f"Grid step must be positive, got {step}", grid=text)
    count = max(int(math.ceil((end - begin) / step)), 0)
    return [begin + k * step for k in range(count)]


def write_sweep_csv(rows, stream):
    """Write rows under the mandatory header, flushing after each one so an interrupted run leaves a valid prefix."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    stream.flush()
    for row in rows:
        writer.writerow(row.as_row())
        stream.flush()
