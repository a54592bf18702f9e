"""
Architecture space exploration: sweep {depth, width, budget} grids, train every configuration, and relate accuracy and
    initial gradient flow to NN-Mass and to parameter counts with least squares fits.
"""
import csv
import dataclasses
import json
import logging
import math

from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from . import network, topology
from .datasets import DatasetRef, load_ref
from .errors import (ConsistencyError, DegenerateVarianceError, DivergenceError, DomainError, FormatError, RangeError,
                     reading)
from .utils import classproperty, derive_seed

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ("depth", "width", "budget", "seed", "nn_mass", "nn_density", "param_count", "flop_count",
                 "test_acc", "train_loss", "mean_init_sv", "diverged")

# Keys separating the dataset stream from the per-job streams of a master seed.
_DATA_KEY = 0x64617461


# region Accounting
def _layer_shapes(spec):
    """(output width, input columns) of every layer in forward order, the input projection first."""
    shapes = []
    previous = spec.input_dim
    for cell in spec.cells:
        for i in range(cell.depth):
            shapes.append((cell.width, previous + topology.n_sources(cell, i)))
            previous = cell.width
    return shapes


def param_count(spec):
    """
    Count the trainable parameters of the model `network.build_model` makes from `spec`.

    That is the input projection, every layer's weights (including one column per long-range source) and biases, and
        the output head.
    """
    total = sum(rows * cols + rows for rows, cols in _layer_shapes(spec))
    final_width = spec.cells[-1].width
    return total + final_width * spec.output_dim + spec.output_dim


def flop_count(spec):
    """
    Two FLOPs per multiply-accumulate of one forward pass through the layers of every cell, the input projection
        included. Biases and the classifier head are not counted.
    """
    return 2 * sum(rows * cols for rows, cols in _layer_shapes(spec))
# endregion


# region Sweeps
@dataclass(frozen=True)
class SweepGrid:
    """
    A grid of single-cell architectures to train.

    Args:
        widths, depths, budgets: The values of w_c, d_c and t_c to cross.
        repeats (int): Seeds per configuration. Each repeat draws its own links, weights and shuffles.
        train (TrainConfig): Training hyperparameters. Its data_seed is replaced per job.
        dataset (DatasetRef): The data to train on.
        activation (str): Activation of every model.
        probes (int): Number of probe inputs for the initial Jacobian measurement.
        seed (int): The master seed.
    """
    widths: Tuple[int, ...] = (8,)
    depths: Tuple[int, ...] = (16, 24, 32)
    budgets: Tuple[int, ...] = (1, 3, 6, 10, 14)
    repeats: int = 3
    train: network.TrainConfig = field(default_factory=network.TrainConfig)
    dataset: DatasetRef = field(default_factory=DatasetRef)
    activation: str = "elu"
    probes: int = 16
    seed: int = 0

    def __post_init__(self):
        for name in ("widths", "depths", "budgets"):
            values = tuple(int(value) for value in getattr(self, name))
            if not values:
                raise RangeError(f"Sweep grid {name} must not be empty", field=name)
            object.__setattr__(self, name, values)
        if self.repeats < 1:
            raise RangeError(f"Repeats must be at least 1, got {self.repeats}", repeats=self.repeats)

    @classproperty
    def desk(cls):
        """3 depths x 5 budgets x 3 repeats at width 8, 15 epochs on Circle20."""
        return cls()

    @classproperty
    def full(cls):
        """Depths {16, ..., 32} x budgets {0, ..., 14} x 5 repeats at width 8, 60 epochs."""
        return cls(depths=(16, 20, 24, 28, 32), budgets=tuple(range(15)), repeats=5, train=network.TrainConfig.full)

    @property
    def configs(self):
        """Every (depth, width, budget) in run order."""
        return [(depth, width, budget) for depth in self.depths for width in self.widths for budget in self.budgets]

    def to_dict(self):
        return {
            "widths": list(self.widths), "depths": list(self.depths), "budgets": list(self.budgets),
            "repeats": self.repeats, "train": self.train.to_dict(), "dataset": self.dataset.to_dict(),
            "activation": self.activation, "probes": self.probes, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data):
        with reading("sweep grid"):
            data = dict(data)
            if "train" in data:
                data["train"] = network.TrainConfig.from_dict(data["train"])
            if "dataset" in data:
                data["dataset"] = DatasetRef.from_dict(data["dataset"])
            return cls(**data)

    @classmethod
    def load(cls, path):
        with open(path, "r") as rb:
            data = json.load(rb)
        try:
            return cls.from_dict(data)
        except FormatError as e:
            e.context.setdefault("path", str(path))
            raise


@dataclass(frozen=True)
class SweepRow:
    depth: int
    width: int
    budget: int
    seed: Optional[int]
    nn_mass: float
    nn_density: float
    param_count: int
    flop_count: int
    test_acc: float
    train_loss: float
    mean_init_sv: float
    diverged: bool = False

    def as_row(self):
        return [self.depth, self.width, self.budget, "" if self.seed is None else self.seed, self.nn_mass,
                self.nn_density, self.param_count, self.flop_count, self.test_acc, self.train_loss,
                self.mean_init_sv, int(self.diverged)]

    @classmethod
    def from_row(cls, row):
        return cls(
            int(row["depth"]), int(row["width"]), int(row["budget"]), int(row["seed"]) if row["seed"] else None,
            float(row["nn_mass"]), float(row["nn_density"]), int(row["param_count"]), int(row["flop_count"]),
            float(row["test_acc"]), float(row["train_loss"]), float(row["mean_init_sv"]), bool(int(row["diverged"])),
        )


# Worker state, set once per process so the datasets are not pickled with every job.
_worker_data = {}


def _init_worker(train_set, test_set):
    _worker_data["train"] = train_set
    _worker_data["test"] = test_set


def _run_job(job):
    grid, config_index, repeat, (depth, width, budget) = job
    train_set, test_set = _worker_data["train"], _worker_data["test"]
    job_seed = derive_seed(grid.seed, config_index, repeat)

    spec = topology.single_cell(depth, width, budget, grid.activation, train_set.feature_dim, train_set.n_classes)
    mass = topology.nn_mass(spec)
    density = topology.nn_density(spec)
    recomputed = sum(cell.width * cell.depth * topology.cell_density(cell) for cell in spec.cells)
    if not math.isclose(mass, recomputed, rel_tol=1e-12, abs_tol=1e-12):
        raise ConsistencyError("NN-Mass disagrees with its density form", nn_mass=mass, recomputed=recomputed)

    topo_seed, init_seed, data_seed = (derive_seed(job_seed, k) for k in range(3))
    model = network.build_model(spec, topo_seed, init_seed, jacobian_experiment=True)
    mean_init_sv = network.ldi_report(model, network.default_probe(spec.input_dim, grid.probes, init_seed)).mean_sv

    config = dataclasses.replace(grid.train, data_seed=data_seed)
    try:
        trace = network.train(model, train_set, test_set, config)
        final = trace.epochs[-1]
        test_acc, train_loss, diverged = final.test_acc, final.train_loss, False
    except DivergenceError as e:
        logger.warning("Configuration %s repeat %d diverged after epoch %d", (depth, width, budget), repeat,
                       e.last_finite_epoch)
        test_acc, train_loss, diverged = float("nan"), float("nan"), True

    row = SweepRow(depth, width, budget, job_seed, mass, density, param_count(spec), flop_count(spec),
                   test_acc, train_loss, mean_init_sv, diverged)
    logger.info("d=%d w=%d t=%d repeat %d: mass %.4f, test acc %.4f, mean init sv %.4f",
                depth, width, budget, repeat, mass, test_acc, mean_init_sv)
    return row


def load_sweep_data(grid):
    """The (train, test) datasets of `grid`, drawn from its master seed."""
    return load_ref(grid.dataset, derive_seed(grid.seed, _DATA_KEY))


def run_sweep(grid, parallelism=1, stream=None, data=None):
    """
    Train every configuration of `grid` `grid.repeats` times.

    Args:
        grid (SweepGrid): The grid.
        parallelism (int): Worker processes. Each job's seeds come from (master seed, config index, repeat), so the
            rows do not depend on scheduling.
        stream (file, optional): If given, the CSV header and every row are written and flushed as they complete.
        data (tuple, optional): The (train, test) datasets, as from `load_sweep_data`. Loaded here if not given.

    Returns:
        list: SweepRow per (config, repeat), ordered by config index then repeat. A diverged run is recorded with
            `diverged` set and NaN accuracy instead of stopping the sweep.
    """
    train_set, test_set = load_sweep_data(grid) if data is None else data
    jobs = [(grid, config_index, repeat, config)
            for config_index, config in enumerate(grid.configs) for repeat in range(grid.repeats)]
    logger.info("Sweeping %d jobs on %d workers", len(jobs), parallelism)

    writer = None
    if stream is not None:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(SWEEP_COLUMNS)
        stream.flush()

    def collect(results):
        rows = []
        for row in results:
            rows.append(row)
            if writer is not None:
                writer.writerow(row.as_row())
                stream.flush()
        return rows

    if parallelism <= 1:
        _init_worker(train_set, test_set)
        return collect(map(_run_job, jobs))

    with ProcessPoolExecutor(max_workers=parallelism, initializer=_init_worker,
                             initargs=(train_set, test_set)) as executor:
        return collect(executor.map(_run_job, jobs))


def write_sweep_csv(rows, stream):
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for row in rows:
        writer.writerow(row.as_row())


def read_sweep_csv(stream):
    return [SweepRow.from_row(row) for row in csv.DictReader(stream)]


def aggregate_rows(rows):
    """
    Average the repeats of every configuration, skipping diverged runs.

    Returns:
        list: One SweepRow per configuration with at least one finished run, `seed` None, in first-seen order.
    """
    groups = defaultdict(list)
    for row in rows:
        if not row.diverged:
            groups[(row.depth, row.width, row.budget)].append(row)

    aggregated = []
    for (depth, width, budget), members in groups.items():
        aggregated.append(SweepRow(
            depth, width, budget, None,
            members[0].nn_mass, members[0].nn_density, members[0].param_count, members[0].flop_count,
            float(np.mean([row.test_acc for row in members])),
            float(np.mean([row.train_loss for row in members])),
            float(np.mean([row.mean_init_sv for row in members])),
        ))
    return aggregated
# endregion


# region Fits
@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    r_squared: float
    x_transform: str = "identity"

    def predict(self, xs):
        return self.slope * _transform(xs, self.x_transform) + self.intercept

    def to_dict(self):
        return dataclasses.asdict(self)


def _transform(xs, x_transform):
    xs = np.asarray(xs, dtype=np.float64)
    if x_transform == "identity":
        return xs
    if x_transform == "log":
        if np.any(xs <= 0):
            raise DomainError("The log transform needs positive x values", minimum=float(xs.min()))
        return np.log(xs)
    raise RangeError(f"Unknown x transform {x_transform!r}", x_transform=x_transform)


def r_squared(ys, predictions):
    """The coefficient of determination 1 - SS_res / SS_tot."""
    ys = np.asarray(ys, dtype=np.float64)
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    if ss_tot == 0:
        raise DegenerateVarianceError("All y values are equal", y=float(ys[0]))
    return 1.0 - float(np.sum((ys - np.asarray(predictions)) ** 2)) / ss_tot


def linear_fit(xs, ys, x_transform="identity"):
    """
    Ordinary least squares of y on T(x).

    Args:
        xs: The predictor values.
        ys: The responses.
        x_transform (str): "identity" or "log".

    Returns:
        LinearFit: With R^2 = 1 - SS_res / SS_tot, which for a simple regression is the squared Pearson correlation.

    Raises:
        RangeError: With fewer than two points or mismatched lengths.
        DomainError: With a non-positive x under the log transform.
        DegenerateVarianceError: If all ys (or all transformed xs) are equal.
    """
    ys = np.asarray(ys, dtype=np.float64)
    if len(ys) < 2 or len(ys) != len(xs):
        raise RangeError("A fit needs at least two (x, y) pairs of equal length", xs=len(xs), ys=len(ys))
    tx = _transform(xs, x_transform)
    if not np.all(np.isfinite(tx)) or not np.all(np.isfinite(ys)):
        raise DomainError("Fit inputs must be finite")
    if np.ptp(ys) == 0:
        raise DegenerateVarianceError("All y values are equal", y=float(ys[0]))
    if np.ptp(tx) == 0:
        raise DegenerateVarianceError("All x values are equal", x=float(tx[0]))

    design = np.column_stack([tx, np.ones_like(tx)])
    (slope, intercept), *_ = np.linalg.lstsq(design, ys, rcond=None)
    r2 = r_squared(ys, design @ np.array([slope, intercept]))
    return LinearFit(float(slope), float(intercept), min(max(r2, 0.0), 1.0), x_transform)


def predict_accuracy(fit, nn_mass_values):
    """slope * log(m) + intercept for each mass, from a fit of accuracy on log NN-Mass."""
    if fit.x_transform != "log":
        raise DomainError("Accuracy prediction expects a fit on log NN-Mass", x_transform=fit.x_transform)
    return fit.predict(nn_mass_values)


def _fit_points(rows, x, y, x_transform):
    points = [(getattr(row, x), getattr(row, y)) for row in rows if not row.diverged]
    points = [(px, py) for px, py in points if math.isfinite(px) and math.isfinite(py)]
    if x_transform == "log":
        kept = [(px, py) for px, py in points if px > 0]
        if len(kept) < len(points):
            logger.warning("Dropping %d rows with non-positive %s from a log fit", len(points) - len(kept), x)
        points = kept
    return [px for px, _ in points], [py for _, py in points]


def fit_rows(rows, x="nn_mass", y="test_acc", x_transform="log", per_repeat=False):
    """
    Fit `y` against `x` over sweep rows.

    Repeats are averaged per configuration first unless `per_repeat` is set. Diverged rows are skipped, and under the
        log transform so are rows with x <= 0 (the zero-budget configurations when x is NN-Mass).
    """
    if not per_repeat:
        rows = aggregate_rows(rows)
    return linear_fit(*_fit_points(rows, x, y, x_transform), x_transform)


def holdout_evaluation(rows, train_depths, x="nn_mass", y="test_acc", x_transform="log"):
    """
    Fit on the configurations whose depth is in `train_depths` and score the fit on every other depth.

    Returns:
        tuple: (LinearFit on the training depths, R^2 of its predictions on the held-out depths).
    """
    rows = aggregate_rows(rows)
    train_depths = set(train_depths)
    fit = fit_rows([row for row in rows if row.depth in train_depths], x, y, x_transform, per_repeat=True)
    held_x, held_y = _fit_points([row for row in rows if row.depth not in train_depths], x, y, x_transform)
    if not held_x:
        raise RangeError("No held-out rows to evaluate", train_depths=sorted(train_depths))
    return fit, r_squared(held_y, fit.predict(held_x))
# endregion
