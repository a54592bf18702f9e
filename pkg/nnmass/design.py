"""
Training-free architecture design.

Given a fixed geometry (depth and width per cell), find the shortcut budgets whose closed-form NN-Mass hits a target.
    Only the mass and parameter formulas are evaluated: nothing is realized, allocated or trained.
"""
import itertools
import logging
import math

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Optional, Tuple

from . import analysis, topology
from .errors import DegenerateCellError, InfeasibleTargetError, RangeError, reading
from .topology import Activation, ArchitectureSpec, CellSpec

logger = logging.getLogger(__name__)

# The exhaustive search refuses grids larger than this.
EXHAUSTIVE_LIMIT = 2_000_000


@dataclass(frozen=True)
class DesignQuery:
    """
    Args:
        target_mass (float): The NN-Mass to reach, >= 0.
        cells: (depth, width) per cell, in order. Every depth must be at least 3.
        tolerance (float): Accepted relative gap |achieved - target| / target, in [0, 1).
        max_params (int, optional): Discard designs with more parameters.
        input_dim, output_dim, activation: The rest of the spec the parameter count is taken on.
    """
    target_mass: float
    cells: Tuple[Tuple[int, int], ...]
    tolerance: float = 0.05
    max_params: Optional[int] = None
    input_dim: int = 2
    output_dim: int = 2
    activation: str = "elu"

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple((int(d), int(w)) for d, w in self.cells))
        if self.target_mass < 0:
            raise RangeError(f"Target mass must be non-negative, got {self.target_mass}", target=self.target_mass)
        if not 0 <= self.tolerance < 1:
            raise RangeError(f"Tolerance must be in [0, 1), got {self.tolerance}", tolerance=self.tolerance)
        _geometry(self.cells)

    def to_dict(self):
        return {"target_mass": self.target_mass, "cells": [list(cell) for cell in self.cells],
                "tolerance": self.tolerance, "max_params": self.max_params, "input_dim": self.input_dim,
                "output_dim": self.output_dim, "activation": self.activation}

    @classmethod
    def from_dict(cls, data):
        with reading("design query"):
            return cls(**data)


@dataclass(frozen=True)
class DesignResult:
    """
    A designed architecture.

    `gap` is |achieved - target| / target (0 when both are 0). `within_tolerance` is False when no design met the
        tolerance and this is the nearest achievable one instead. `param_reduction` is only set by `compress`.
    """
    budgets: Tuple[int, ...]
    achieved_mass: float
    param_count: int
    gap: float
    within_tolerance: bool
    spec: ArchitectureSpec
    target_mass: float
    param_reduction: Optional[float] = None

    def to_dict(self):
        return {
            "budgets": list(self.budgets),
            "achieved_mass": self.achieved_mass,
            "target_mass": self.target_mass,
            "param_count": self.param_count,
            "gap": self.gap,
            "within_tolerance": self.within_tolerance,
            "param_reduction": self.param_reduction,
            "spec": self.spec.to_dict(),
        }


def _geometry(cells):
    """(depth, width) pairs or CellSpecs as zero-budget CellSpecs."""
    geometry = []
    for cell in cells:
        depth, width = (cell.depth, cell.width) if isinstance(cell, CellSpec) else cell
        if depth < 3:
            raise DegenerateCellError(f"Designable cells need depth >= 3, got {depth}", depth=depth)
        geometry.append(CellSpec(int(depth), int(width)))
    if not geometry:
        raise RangeError("At least one cell is required")
    return geometry


@lru_cache(maxsize=65536)
def _cell_mass(depth, width, budget):
    return topology.cell_mass_exact(CellSpec(depth, width, budget))


@lru_cache(maxsize=65536)
def _cell_source_columns(depth, width, budget):
    """Weight columns the long-range sources of one cell add, summed over its layers."""
    cell = CellSpec(depth, width, budget)
    return sum(topology.n_sources(cell, i) for i in range(depth))


def _mass(geometry, budgets):
    return sum((_cell_mass(cell.depth, cell.width, budget) for cell, budget in zip(geometry, budgets)), Fraction(0))


def _as_fraction(value):
    """
    The rational a float target stands for.

    Achievable masses are rationals like 293 / 30, which no float holds exactly. A float within 1e-12 (relative) of
        a fraction with a denominator up to 1e9 is taken to mean that fraction, so a printed mass can be hit with
        tolerance 0.
    """
    exact = Fraction(value)
    snapped = exact.limit_denominator(10 ** 9)
    return snapped if abs(snapped - exact) <= abs(exact) * Fraction(1, 10 ** 12) else exact


def mass_range(cells):
    """
    The NN-Mass a geometry can reach: 0 with no shortcuts, up to sum w_c d_c when every cell is saturated.
    """
    geometry = _geometry(cells)
    return 0.0, float(sum(cell.width * cell.depth for cell in geometry))


def _windows(geometry, budgets, radius):
    return [range(max(0, b - radius), min(cell.saturation_budget, b + radius) + 1)
            for cell, b in zip(geometry, budgets)]


class _Search(object):
    """One search over budget vectors, scoring candidates by the shared selection rule."""

    def __init__(self, geometry, low, high, target, template, max_params):
        self.geometry = geometry
        self.low = low
        self.high = high
        self.target = target
        self.template = template
        self.max_params = max_params
        # Each source column adds one weight per unit of its layer, so parameters are additive over cells
        self.base_params = analysis.param_count(self.spec([0] * len(geometry)))

    def spec(self, budgets):
        return ArchitectureSpec(tuple(cell.with_budget(b) for cell, b in zip(self.geometry, budgets)),
                                self.template.activation, self.template.input_dim, self.template.output_dim)

    def params(self, budgets):
        return self.base_params + sum(cell.width * _cell_source_columns(cell.depth, cell.width, budget)
                                      for cell, budget in zip(self.geometry, budgets))

    @property
    def grid_size(self):
        return math.prod(cell.saturation_budget + 1 for cell in self.geometry)

    def best(self, candidates):
        """
        Prefer designs within [low, high] with the fewest parameters, then the lexicographically smallest budgets.
            Without any, take the one nearest the target, then the fewest parameters, then the smallest budgets.

        Returns:
            tuple: (budgets, mass, params, within window), or None if every candidate is over `max_params`.
        """
        inside, outside = [], []
        for budgets in candidates:
            budgets = tuple(budgets)
            params = self.params(budgets)
            if self.max_params is not None and params > self.max_params:
                continue
            mass = _mass(self.geometry, budgets)
            if self.low <= mass <= self.high:
                inside.append((params, budgets, mass))
            else:
                outside.append((abs(mass - self.target), params, budgets, mass))

        if inside:
            params, budgets, mass = min(inside)
            return budgets, mass, params, True
        if outside:
            _, params, budgets, mass = min(outside)
            return budgets, mass, params, False
        return None

    def first_reaching(self, cell, offset):
        """The smallest budget of `cell` with offset + its mass >= low, or its saturation budget."""
        low, high = 0, cell.saturation_budget
        while low < high:
            middle = (low + high) // 2
            if offset + _cell_mass(cell.depth, cell.width, middle) >= self.low:
                high = middle
            else:
                low = middle + 1
        return low

    def binary(self):
        if len(self.geometry) != 1:
            raise RangeError("Binary search designs a single cell", cells=len(self.geometry))
        # Mass and parameters both strictly increase up to saturation, so the answer is next to the first budget
        #   reaching the window.
        budget = self.first_reaching(self.geometry[0], Fraction(0))
        return self.best([(b,) for b in (budget - 1, budget) if b >= 0])

    def exhaustive(self):
        total = self.grid_size
        if total > EXHAUSTIVE_LIMIT:
            raise RangeError(f"Exhaustive search over {total} designs is too large", designs=total)
        return self.best(itertools.product(*(range(cell.saturation_budget + 1) for cell in self.geometry)))

    def greedy(self):
        """
        Fill cells in order of mass gained per parameter, 2 d / ((d - 1)(d - 2) w), until the window is reached, then
            try every vector within 2 of that point.

        If none of those lands in the window, the radius doubles for as long as the neighbourhood stays within
            EXHAUSTIVE_LIMIT designs, or until it covers every budget.
        """
        order = sorted(range(len(self.geometry)),
                       key=lambda c: (-Fraction(2 * self.geometry[c].depth,
                                                (self.geometry[c].depth - 1) * (self.geometry[c].depth - 2)
                                                * self.geometry[c].width), c))
        budgets = [0] * len(self.geometry)
        reached = Fraction(0)
        for c in order:
            cell = self.geometry[c]
            full = _cell_mass(cell.depth, cell.width, cell.saturation_budget)
            if reached + full < self.low:
                budgets[c] = cell.saturation_budget
                reached += full
                continue
            budgets[c] = self.first_reaching(cell, reached)
            break

        radius = 2
        while True:
            around = _windows(self.geometry, budgets, radius)
            found = self.best(itertools.product(*around))
            if found is not None and found[3]:
                return found
            if all(len(r) == cell.saturation_budget + 1 for r, cell in zip(around, self.geometry)):
                return found
            wider = _windows(self.geometry, budgets, 2 * radius)
            if math.prod(len(r) for r in wider) > EXHAUSTIVE_LIMIT:
                return found
            radius *= 2
            logger.debug("No design within %d of %s, widening", radius // 2, budgets)

    def run(self, method):
        """
        "auto" is binary for a single cell, exhaustive while the grid has at most EXHAUSTIVE_LIMIT designs, and greedy
            beyond that.
        """
        if method == "auto":
            if len(self.geometry) == 1:
                method = "binary"
            else:
                method = "exhaustive" if self.grid_size <= EXHAUSTIVE_LIMIT else "greedy"
        if method not in ("binary", "exhaustive", "greedy"):
            raise RangeError(f"Unknown search method {method!r}", method=method)
        found = getattr(self, method)()
        if found is None:
            raise RangeError("No design satisfies the parameter limit", max_params=self.max_params)
        return found



def _result(search, found, target, param_reduction=None):
    budgets, mass, params, inside = found
    if target:
        gap = float(abs(mass - target) / target)
    else:
        gap = 0.0 if mass == 0 else float("inf")
    return DesignResult(tuple(budgets), float(mass), params, gap, inside, search.spec(budgets), float(target),
                        param_reduction)


def design_for_mass(query, method="auto"):
    """
    Find per-cell shortcut budgets reaching `query.target_mass` within `query.tolerance`.

    Args:
        query (DesignQuery): The target and geometry.
        method (str): "binary" (single cell), "greedy" (any number of cells), "exhaustive" (small geometries) or
            "auto", which picks binary for one cell, exhaustive while the grid is within EXHAUSTIVE_LIMIT and
            greedy beyond it.

    Returns:
        DesignResult: The design with the fewest parameters within tolerance, ties broken by the lexicographically
            smallest budgets. If none is within tolerance, the nearest achievable design with `within_tolerance` False.

    Raises:
        InfeasibleTargetError: If the target exceeds what the geometry can reach.
    """
    geometry = _geometry(query.cells)
    low_bound, high_bound = mass_range(geometry)
    target = _as_fraction(query.target_mass)
    if target > Fraction(high_bound):
        raise InfeasibleTargetError(
            f"Target mass {query.target_mass} is above the attainable maximum {high_bound}", (low_bound, high_bound),
        )

    tolerance = _as_fraction(query.tolerance)
    template = ArchitectureSpec(tuple(geometry), Activation(query.activation), query.input_dim, query.output_dim)
    search = _Search(geometry, target * (1 - tolerance), target * (1 + tolerance), target, template,
                     query.max_params)
    result = _result(search, search.run(method), target)
    logger.info("Designed budgets %s for target mass %g: mass %g, %d params, gap %.4g",
                result.budgets, query.target_mass, result.achieved_mass, result.param_count, result.gap)
    return result


def compress(reference, new_cells, tolerance=0.05, method="auto", max_params=None):
    """
    Design a smaller model whose NN-Mass is comparable to or higher than a reference: within
        [m_ref, (1 + tolerance) m_ref].

    Args:
        reference (ArchitectureSpec): The model to compress.
        new_cells: (depth, width) per cell of the new geometry.
        tolerance (float): Accepted relative excess over the reference mass.

    Returns:
        DesignResult: With `param_reduction` = reference parameters / designed parameters. If the geometry cannot reach
            the reference mass, the saturated design is returned with `within_tolerance` False.
    """
    geometry = _geometry(new_cells)
    reference_mass = topology.nn_mass_exact(reference)
    reachable = _mass(geometry, [cell.saturation_budget for cell in geometry])

    if reference_mass > reachable:
        logger.warning("Geometry %s cannot reach the reference mass %g; aiming at %g",
                       [(cell.depth, cell.width) for cell in geometry], float(reference_mass), float(reachable))
        low = high = reachable
    else:
        low, high = reference_mass, reference_mass * (1 + Fraction(tolerance))

    search = _Search(geometry, low, high, reference_mass, reference, max_params)
    budgets, mass, params, inside = search.run(method)
    inside = inside and mass >= reference_mass
    reduction = analysis.param_count(reference) / params
    result = _result(search, (budgets, mass, params, inside), reference_mass, reduction)
    logger.info("Compressed %d to %d params (%.2fx) at mass %g against %g",
                analysis.param_count(reference), params, reduction, result.achieved_mass, float(reference_mass))
    return result
