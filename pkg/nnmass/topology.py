"""
Architecture specifications and their topology metrics.

An architecture is a sequence of cells. Each cell is a plain stack of `depth` fully connected layers of `width` units,
    plus random long-range links: every layer i >= 2 of a cell concatenates min{width * (i - 1), shortcut_budget} units
    sampled from layers 0..i-2 of the same cell onto its input. Layers are zero-indexed within a cell, layers 0 and 1
    never receive long-range links, and no link crosses a cell boundary.

All metrics are computed in closed form from the architecture. Exact rational versions (`*_exact`) back the oracle
    checks and the design search; the float versions are what everything else reports.
"""
import json
import logging

from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import NamedTuple, Tuple

import networkx as nx

from .errors import DegenerateCellError, FormatError, RangeError, reading
from .utils import counters, generator

logger = logging.getLogger(__name__)


class Activation(str, Enum):
    linear = "linear"
    relu = "relu"
    elu = "elu"


@dataclass(frozen=True)
class CellSpec:
    """
    A cell: `depth` layers of `width` units, each layer i >= 2 taking up to `shortcut_budget` long-range sources.

    Notes:
        A cell with a non-zero budget needs depth >= 3, otherwise there is no layer to receive links and the density
            denominator (d - 1)(d - 2) is zero.
    """
    depth: int
    width: int
    shortcut_budget: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise RangeError(f"Cell depth must be positive, got {self.depth}", depth=self.depth)
        if self.width < 1:
            raise RangeError(f"Cell width must be positive, got {self.width}", width=self.width)
        if self.shortcut_budget < 0:
            raise RangeError(f"Shortcut budget must be non-negative, got {self.shortcut_budget}",
                             shortcut_budget=self.shortcut_budget)
        if self.shortcut_budget > 0 and self.depth < 3:
            raise DegenerateCellError(
                f"A cell with shortcuts needs depth >= 3, got depth {self.depth}", depth=self.depth,
            )

    @property
    def saturation_budget(self):
        """The smallest budget at which every candidate source is used, ie density 1."""
        return self.width * max(self.depth - 2, 0)

    def with_budget(self, budget):
        return CellSpec(self.depth, self.width, budget)

    def to_dict(self):
        return {"depth": self.depth, "width": self.width, "shortcut_budget": self.shortcut_budget}

    @classmethod
    def from_dict(cls, data):
        with reading("cell"):
            depth, width = int(data["depth"]), int(data["width"])
            budget = int(data.get("shortcut_budget", 0))
        return cls(depth, width, budget)


@dataclass(frozen=True)
class ArchitectureSpec:
    """
    The object every metric, model and design consumes.

    Args:
        cells: A non-empty ordered sequence of CellSpec. A list is accepted and frozen into a tuple.
        activation (Activation, str): One of "linear", "relu" or "elu".
        input_dim (int): Number of input features, projected onto the first cell's width before its layer 0.
        output_dim (int): Number of classes produced by the head reading the final layer.
    """
    cells: Tuple[CellSpec, ...]
    activation: Activation = Activation.elu
    input_dim: int = 2
    output_dim: int = 2

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(self.cells))
        try:
            object.__setattr__(self, "activation", Activation(self.activation))
        except ValueError:
            raise RangeError(f"Unknown activation {self.activation!r}", activation=str(self.activation))
        if not self.cells:
            raise RangeError("An architecture needs at least one cell")
        if self.input_dim < 1 or self.output_dim < 1:
            raise RangeError("Input and output dimensions must be positive",
                             input_dim=self.input_dim, output_dim=self.output_dim)

    @property
    def n_layers(self):
        return sum(cell.depth for cell in self.cells)

    @property
    def n_units(self):
        return sum(cell.depth * cell.width for cell in self.cells)

    def with_budgets(self, budgets):
        """A copy of this spec with the given shortcut budget per cell."""
        if len(budgets) != len(self.cells):
            raise RangeError("One budget per cell is required", cells=len(self.cells), budgets=len(budgets))
        return ArchitectureSpec(
            tuple(cell.with_budget(int(budget)) for cell, budget in zip(self.cells, budgets)),
            self.activation, self.input_dim, self.output_dim,
        )

    def to_dict(self):
        return {
            "cells": [cell.to_dict() for cell in self.cells],
            "activation": self.activation.value,
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
        }

    @classmethod
    def from_dict(cls, data):
        with reading("architecture"):
            return cls(
                tuple(CellSpec.from_dict(cell) for cell in data["cells"]),
                data.get("activation", Activation.elu.value),
                int(data.get("input_dim", 2)),
                int(data.get("output_dim", 2)),
            )

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path):
        with open(path, "r") as rb:
            text = rb.read()
        try:
            return cls.from_json(text)
        except FormatError as e:
            e.context.setdefault("path", str(path))
            raise


def single_cell(depth, width, shortcut_budget=0, activation=Activation.elu, input_dim=2, output_dim=2):
    """Convenience for the one-cell MLPs every experiment uses."""
    return ArchitectureSpec((CellSpec(depth, width, shortcut_budget),), activation, input_dim, output_dim)


# region Closed forms
def n_sources(cell, layer):
    """
    The number of long-range sources layer `layer` concatenates, min{w_c (i - 1), t_c}, or 0 for layers 0 and 1.

    This is the unchecked helper the network and the parameter count share. See `layer_longrange_links` for the
        checked edge count.
    """
    if layer < 2:
        return 0
    return min(cell.width * (layer - 1), cell.shortcut_budget)


def _check_degenerate(cell):
    if cell.depth < 3:
        raise DegenerateCellError(
            f"Cell metrics need depth >= 3, got depth {cell.depth}", depth=cell.depth, width=cell.width,
        )


def _source_sum(cell):
    return sum(n_sources(cell, i) for i in range(2, cell.depth))


def layer_longrange_links(cell, layer):
    """
    Count the long-range edges entering layer `layer` of `cell`.

    Each selected source connects to all w_c units of the target layer, so this is min{w_c (i - 1), t_c} * w_c.

    Raises:
        RangeError: If `layer` is not within [2, depth - 1].
    """
    if not 2 <= layer <= cell.depth - 1:
        raise RangeError(f"Layer {layer} does not receive long-range links in a cell of depth {cell.depth}",
                         layer=layer, depth=cell.depth)
    return n_sources(cell, layer) * cell.width


def total_possible_links(cell):
    """Every (source unit, target unit) pair with the target at least two layers after the source."""
    _check_degenerate(cell)
    return cell.width ** 2 * (cell.depth - 1) * (cell.depth - 2) // 2


def cell_density_exact(cell):
    _check_degenerate(cell)
    return Fraction(2 * _source_sum(cell), cell.width * (cell.depth - 1) * (cell.depth - 2))


def cell_density(cell):
    """The fraction of possible long-range links a cell realizes."""
    return float(cell_density_exact(cell))


def cell_mass_exact(cell):
    """A cell's contribution to NN-Mass, w_c d_c rho_c, as an exact fraction."""
    _check_degenerate(cell)
    return Fraction(2 * cell.depth * _source_sum(cell), (cell.depth - 1) * (cell.depth - 2))


def cell_mass(cell):
    return float(cell_mass_exact(cell))


def nn_density(arch):
    """The arithmetic mean of cell density over all cells."""
    return float(sum(cell_density_exact(cell) for cell in arch.cells) / len(arch.cells))


def nn_mass_exact(arch):
    return sum((cell_mass_exact(cell) for cell in arch.cells), Fraction(0))


def nn_mass(arch):
    """
    The NN-Mass of an architecture: the sum over cells of density times the number of units in the cell.

    Args:
        arch (ArchitectureSpec): The architecture.

    Returns:
        float: m = sum_c 2 d_c sum_{i=2}^{d_c-1} min{w_c (i - 1), t_c} / ((d_c - 1)(d_c - 2)).

    Raises:
        DegenerateCellError: If any cell has depth < 3.
    """
    return float(nn_mass_exact(arch))


class AverageDegree(NamedTuple):
    estimate: float
    exact_longrange: float


def cell_avg_degree(cell):
    """
    The average degree of one cell.

    `estimate` is w_c + m / 2, the lattice degree plus the deep-network approximation of the long-range degree.
        `exact_longrange` is the long-range links per node, m (d_c - 1)(d_c - 2) / (2 d_c^2), which reduces to
        sum_i min{w_c (i - 1), t_c} / d_c.
    """
    mass = cell_mass_exact(cell)
    exact = mass * (cell.depth - 1) * (cell.depth - 2) / (2 * cell.depth ** 2)
    return AverageDegree(float(cell.width + mass / 2), float(exact))


def avg_degree(arch):
    """
    The average degree of an architecture.

    Notes:
        The closed form is a single-cell result. For several cells this returns the mean of the per-cell values
            weighted by the number of units in each cell; use `cell_avg_degree` for the per-cell values themselves.
    """
    per_cell = [cell_avg_degree(cell) for cell in arch.cells]
    if len(per_cell) == 1:
        return per_cell[0]

    weights = [cell.depth * cell.width for cell in arch.cells]
    total = sum(weights)
    return AverageDegree(
        sum(w * degree.estimate for w, degree in zip(weights, per_cell)) / total,
        sum(w * degree.exact_longrange for w, degree in zip(weights, per_cell)) / total,
    )


@dataclass(frozen=True)
class MassReport:
    per_cell_density: Tuple[float, ...]
    nn_density: float
    nn_mass: float
    avg_degree_estimate: float
    avg_degree_exact_longrange: float

    def to_dict(self):
        return {
            "per_cell_density": list(self.per_cell_density),
            "nn_density": self.nn_density,
            "nn_mass": self.nn_mass,
            "avg_degree_estimate": self.avg_degree_estimate,
            "avg_degree_exact_longrange": self.avg_degree_exact_longrange,
        }


def mass_report(arch):
    degree = avg_degree(arch)
    return MassReport(
        tuple(cell_density(cell) for cell in arch.cells),
        nn_density(arch),
        nn_mass(arch),
        degree.estimate,
        degree.exact_longrange,
    )
# endregion


# region Realizations
@dataclass(frozen=True)
class TopologyRealization:
    """
    One concrete draw of the long-range links of an architecture.

    `sources[c][i]` is the sorted tuple of (layer, unit) pairs feeding layer i of cell c. Layers 0 and 1 always have
        an empty tuple so that indexing by layer is literal.
    """
    cells: Tuple[CellSpec, ...]
    sources: Tuple[Tuple[Tuple[Tuple[int, int], ...], ...], ...]
    seed: int

    def sources_of(self, cell_index, layer):
        return self.sources[cell_index][layer]

    def to_dict(self):
        return {
            "seed": self.seed,
            "cells": [
                {"spec": cell.to_dict(), "sources": [[list(unit) for unit in layer] for layer in layers]}
                for cell, layers in zip(self.cells, self.sources)
            ],
        }


def realize_topology(arch, seed):
    """
    Sample the long-range links of `arch`.

    Every layer i in [2, d_c - 1] of every cell draws min{w_c (i - 1), t_c} distinct units uniformly from the
        w_c (i - 1) units of layers 0..i-2. Each (cell, layer) pair draws from its own Philox stream keyed by the seed,
        so the result depends only on (arch, seed).
    """
    counters.increment("realizations")

    realized = []
    for c, cell in enumerate(arch.cells):
        layers = [(), ()][:min(cell.depth, 2)]
        for i in range(2, cell.depth):
            pool = cell.width * (i - 1)
            picked = generator(seed, c, i).choice(pool, size=n_sources(cell, i), replace=False)
            # Flat pool indices sort in (layer, unit) order already.
            layers.append(tuple(divmod(int(index), cell.width) for index in sorted(picked)))
        realized.append(tuple(layers))
        logger.debug("Realized cell %d: %s sources per layer", c, [len(layer) for layer in layers])

    return TopologyRealization(tuple(arch.cells), tuple(realized), int(seed))


class LinkCount(NamedTuple):
    per_layer: Tuple[int, ...]
    total: int


def count_links_oracle(real):
    """
    Count the long-range edges of a realization by brute force.

    Every source is checked to be distinct and at least two layers back, and each one is paired with every unit of the
        target layer. `per_layer` runs over every layer of every cell in order, so layers 0 and 1 of each cell count 0.

    Raises:
        RangeError: If a source is invalid for its layer.
    """
    per_layer = []
    for cell, layers in zip(real.cells, real.sources):
        for i, sources in enumerate(layers):
            if len(set(sources)) != len(sources):
                raise RangeError(f"Layer {i} has duplicate sources", layer=i)

            edges = 0
            for source_layer, source_unit in sources:
                if not (0 <= source_layer <= i - 2 and 0 <= source_unit < cell.width):
                    raise RangeError(f"Invalid source ({source_layer}, {source_unit}) for layer {i}", layer=i)
                edges += cell.width
            per_layer.append(edges)

    return LinkCount(tuple(per_layer), sum(per_layer))


def realization_graph(real):
    """
    Build the architecture graph of a realization.

    Nodes are (cell, layer, unit). Each unit has a "short" edge from every unit of the previous layer in its cell and a
        "long" edge from each of its layer's sampled sources. Cells are not joined, matching the fact that no
        long-range link crosses cells.
    """
    graph = nx.DiGraph()
    for c, (cell, layers) in enumerate(zip(real.cells, real.sources)):
        graph.add_nodes_from((c, i, u) for i in range(cell.depth) for u in range(cell.width))
        for i in range(1, cell.depth):
            for u in range(cell.width):
                graph.add_edges_from((((c, i - 1, v), (c, i, u)) for v in range(cell.width)), kind="short")
                graph.add_edges_from((((c, layer, unit), (c, i, u)) for layer, unit in layers[i]), kind="long")
    return graph


class DegreeStats(NamedTuple):
    lattice: float
    longrange: float
    total: float


def realized_degree(real):
    """
    Edges per node of each cell of a realized graph, split into lattice (short-range) and long-range parts.

    Returns:
        list: One DegreeStats per cell. `longrange` equals `cell_avg_degree(cell).exact_longrange` exactly.
    """
    graph = realization_graph(real)
    stats = []
    for c, cell in enumerate(real.cells):
        nodes = [node for node in graph.nodes if node[0] == c]
        kinds = [graph.edges[edge]["kind"] for edge in graph.in_edges(nodes)]
        short = kinds.count("short")
        long_ = kinds.count("long")
        stats.append(DegreeStats(short / len(nodes), long_ / len(nodes), (short + long_) / len(nodes)))
    return stats
# endregion


# region Convolutional geometries
CNN_BASE_WIDTHS = (16, 32, 64)

# Shortcut budgets per cell explored for each width multiplier and total depth.
CNN_BUDGET_TABLES = {
    1: {
        31: [(5, 8, 12), (10, 30, 50), (30, 40, 70), (41, 61, 91), (50, 90, 110)],
        40: [(5, 9, 12), (11, 31, 51), (31, 41, 71), (41, 62, 92), (50, 90, 109)],
        49: [(5, 10, 11), (11, 31, 52), (31, 41, 73), (42, 62, 93), (50, 90, 109)],
        64: [(5, 10, 12), (11, 32, 53), (31, 42, 74), (42, 62, 94), (49, 90, 110)],
    },
    2: {
        31: [(10, 35, 50), (20, 45, 75), (30, 50, 100), (40, 60, 120), (50, 70, 145)],
        40: [(20, 40, 70), (30, 50, 100), (40, 80, 125), (50, 105, 150), (60, 130, 170)],
        49: [(25, 50, 90), (35, 80, 125), (50, 105, 150), (70, 130, 170), (90, 150, 210)],
        64: [(30, 80, 117), (50, 110, 150), (70, 140, 200), (90, 175, 250), (110, 215, 300)],
    },
    3: {
        31: [(10, 30, 50), (40, 60, 90), (70, 90, 130), (100, 120, 170), (130, 150, 210)],
        40: [(11, 31, 51), (42, 62, 92), (72, 93, 133), (103, 123, 173), (133, 153, 212)],
        49: [(11, 31, 52), (43, 63, 93), (73, 95, 135), (104, 124, 176), (134, 154, 214)],
        64: [(12, 32, 52), (44, 64, 95), (76, 96, 136), (106, 126, 178), (135, 156, 216)],
    },
}


def cnn_depth_per_cell(total_depth):
    """Three cells plus four fixed layers (stem, two transitions, head): total = 3 d_c + 4."""
    if (total_depth - 4) % 3 or total_depth < 13:
        raise RangeError(f"Total depth {total_depth} is not of the form 3 * d_c + 4 with d_c >= 3",
                         total_depth=total_depth)
    return (total_depth - 4) // 3


def cnn_spec(total_depth, width_multiplier, budgets=(0, 0, 0), input_dim=3, output_dim=10):
    """
    The three-cell convolutional geometry as an ArchitectureSpec, for mass computation.

    Args:
        total_depth (int): Total layers, 3 d_c + 4.
        width_multiplier (int): Cell widths are this times (16, 32, 64) channels.
        budgets: The shortcut budget of each of the three cells.
    """
    depth = cnn_depth_per_cell(total_depth)
    cells = tuple(CellSpec(depth, width_multiplier * base, int(budget))
                  for base, budget in zip(CNN_BASE_WIDTHS, budgets))
    return ArchitectureSpec(cells, Activation.relu, input_dim, output_dim)
# endregion
