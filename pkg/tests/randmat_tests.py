import io
import itertools
import logging
import math

from unittest import TestCase

import numpy as np

from faker import Faker
from scipy import linalg

from nnmass import randmat
from nnmass.analysis import linear_fit
from nnmass.errors import NumericError, RangeError

faker = Faker()
logger = logging.getLogger(__name__)


class RandmatTestCase(TestCase):
    def setUp(self):
        Faker.seed(0x73766473)
        self.seed = faker.random_int(0, 2 ** 32)


class SamplingTests(RandmatTestCase):
    def test_deterministic(self):
        self.assertTrue(np.array_equal(randmat.sample_gaussian(1, 1, 1.0, self.seed),
                                       randmat.sample_gaussian(1, 1, 1.0, self.seed)))
        self.assertFalse(np.array_equal(randmat.sample_gaussian(5, 5, 1.0, self.seed, 0),
                                        randmat.sample_gaussian(5, 5, 1.0, self.seed, 1)))

    def test_moments(self):
        big = randmat.sample_gaussian(1000, 1000, 1.0, self.seed)
        self.assertLess(abs(big.mean()), 0.01)

        pooled = np.concatenate([randmat.sample_gaussian(10, 10, 4.0, self.seed, k).ravel() for k in range(10)])
        self.assertTrue(3.0 <= pooled.var(ddof=1) <= 5.0, pooled.var(ddof=1))

    def test_invalid(self):
        for rows, cols, variance in ((0, 3, 1.0), (3, -1, 1.0), (3, 3, 0.0), (3, 3, -2.0)):
            with self.assertRaises(RangeError):
                randmat.sample_gaussian(rows, cols, variance, self.seed)


class SingularValueTests(RandmatTestCase):
    def test_known(self):
        np.testing.assert_allclose(randmat.singular_values(np.eye(3)).values, [1.0, 1.0, 1.0])
        np.testing.assert_allclose(randmat.singular_values(np.diag([3.0, 4.0])).values, [4.0, 3.0])

    def test_eigen_oracle(self):
        """The singular values of M are the square roots of the eigenvalues of M^T M"""
        matrix = randmat.sample_gaussian(8, 5, 1.0, self.seed)
        eigenvalues = linalg.eigh(matrix.T @ matrix, eigvals_only=True)[::-1]
        np.testing.assert_allclose(randmat.singular_values(matrix).values, np.sqrt(eigenvalues), rtol=1e-8)

    def test_frobenius_and_scale(self):
        for k in range(10):
            rows, cols = faker.random_int(1, 40), faker.random_int(1, 40)
            matrix = randmat.sample_gaussian(rows, cols, 1.0, self.seed, k)
            spectrum = randmat.singular_values(matrix)
            values = np.array(spectrum.values)
            self.assertEqual(len(values), min(rows, cols))
            self.assertTrue(np.all(np.diff(values) <= 0))
            self.assertAlmostEqual(np.sum(values ** 2) / np.sum(matrix ** 2), 1.0, delta=1e-8)

            scale = faker.pyfloat(min_value=0.1, max_value=10)
            np.testing.assert_allclose(randmat.singular_values(scale * matrix).values, scale * values, rtol=1e-10)

    def test_non_finite(self):
        matrix = np.ones((3, 3))
        matrix[1, 2] = np.nan
        with self.assertRaises(NumericError):
            randmat.singular_values(matrix)


class MeanSquareTests(RandmatTestCase):
    def test_identity(self):
        """E[sigma^2] = H for unit variance entries"""
        for rows, cols, trials in ((100, 10, 200), (50, 50, 200), (200, 100, 200), (1, 1, 400)):
            estimate = randmat.mean_square_identity_check(rows, cols, trials, self.seed)
            self.assertLess(abs(estimate - rows), 5 * rows / math.sqrt(trials * cols),
                            f"H={rows} W={cols}: {estimate}")

    def test_width_independent(self, rows=200, trials=200):
        """For fixed H, the estimates for different W agree within 3 pooled standard errors"""
        estimates = {}
        for cols in (10, 50, 100):
            values = randmat.mean_square_trials(rows, cols, trials, self.seed + cols)
            estimates[cols] = (values.mean(), values.std(ddof=1) / math.sqrt(trials))

        for (a, (mean_a, se_a)), (b, (mean_b, se_b)) in itertools.combinations(estimates.items(), 2):
            self.assertLess(abs(mean_a - mean_b), 3 * math.hypot(se_a, se_b), f"W={a} vs W={b}")

    def test_invalid(self):
        with self.assertRaises(RangeError):
            randmat.mean_square_identity_check(5, 10, 10, self.seed)
        with self.assertRaises(RangeError):
            randmat.mean_square_identity_check(10, 5, 0, self.seed)


class SweepTests(RandmatTestCase):
    def test_rows(self):
        self.assertEqual(randmat.jacobian_rows(8, 0), 8)
        self.assertEqual(randmat.jacobian_rows(8, 3), 10)
        self.assertEqual(randmat.jacobian_rows(8, 5), 11)
        self.assertEqual(randmat.parse_grid("0:300:30"), [float(m) for m in range(0, 300, 30)])
        self.assertEqual(randmat.parse_grid("12"), [12.0])
        with self.assertRaises(RangeError):
            randmat.parse_grid("0:10:0")

    def test_zero_mass_is_square(self):
        row, = randmat.simulate_mass_sweep(8, [0], 20, seed=self.seed)
        self.assertEqual((row.matrix_rows, row.width), (8, 8))
        baseline = np.mean([randmat.singular_values(randmat.sample_gaussian(8, 8, 1.0, self.seed, 0, k)).mean
                            for k in range(20)])
        self.assertAlmostEqual(row.mean_sv, baseline, places=12)

    def test_increasing(self):
        """Mean singular values grow nearly linearly with mass, each step by more than a standard error"""
        rows = randmat.simulate_mass_sweep(8, randmat.parse_grid("0:300:30"), 50, seed=self.seed)
        for before, after in zip(rows, rows[1:]):
            pooled = math.hypot(before.stddev_sv, after.stddev_sv) / math.sqrt(50)
            self.assertGreater(after.mean_sv - before.mean_sv, pooled, f"mass {before.mass} -> {after.mass}")
        fit = linear_fit([row.mass for row in rows], [row.mean_sv for row in rows])
        self.assertGreaterEqual(fit.r_squared, 0.95)

    def test_locally_linear(self, width=8):
        rows = randmat.simulate_mass_sweep(width, randmat.parse_grid(f"0:{4 * width + 1}:4"), 200, seed=self.seed)
        fit = linear_fit([row.mass for row in rows], [row.mean_sv for row in rows])
        self.assertGreaterEqual(fit.r_squared, 0.95)

    def test_wider_is_larger(self):
        rows = randmat.simulate_width_sweep([8, 64], [0, 50, 100], 20, seed=self.seed)
        narrow, wide = rows[:3], rows[3:]
        for small, large in zip(narrow, wide):
            self.assertEqual(small.mass, large.mass)
            self.assertGreater(large.mean_sv, small.mean_sv)

    def test_jobs_do_not_change_rows(self):
        masses = [0, 10, 20, 30]
        self.assertEqual(randmat.simulate_mass_sweep(6, masses, 5, seed=self.seed),
                         randmat.simulate_mass_sweep(6, masses, 5, seed=self.seed, jobs=3))

    def test_invalid_sweep(self):
        """Nothing needs to be pulled from the sweep for bad arguments to fail"""
        cases = [(0, [0], 5, 1.0), (4, [0], 0, 1.0), (4, [-2], 5, 1.0), (4, [0], 5, 0.0)]
        for width, masses, trials, variance in cases:
            with self.assertRaises(RangeError):
                randmat.iter_mass_sweep(width, masses, trials, variance, seed=self.seed)

    def test_csv(self):
        stream = io.StringIO()
        randmat.write_sweep_csv(randmat.iter_mass_sweep(4, [0, 2], 3, seed=self.seed), stream)
        lines = stream.getvalue().splitlines()
        self.assertEqual(lines[0], ",".join(randmat.SWEEP_COLUMNS))
        self.assertEqual(len(lines), 3)
        self.assertTrue(lines[2].startswith("4,2.0,5,3,"))
