"""Viscosity solutions: the discounted fixed point and evolutionary value fields.

The discounted solver iterates the unit-time backward operator from the
constant lower bracket; the contraction rate exp(-lam) turns the observed
sup-change into a certified total-error bound, which is the stopping rule.
Evolutionary fields are computed in one shot per requested time (no time
stepping): every node is an independent localized inf-convolution of the
initial data.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dataclass_field
from typing import Callable, Optional

import numpy as np

from .errors import InvalidProblem, NoConvergence
from .laxoleinik import (
    GridFunction,
    SearchResult,
    discounted_lax_oleinik_batch,
    localization_radius,
    localized_convolution,
    solution_lipschitz_bound,
)
from .model import DiscountedProblem, LagrangianModel, to_evolutionary


# ---------------------------------------------------------------------------
# reports

@dataclass
class SolveReport:
    iterations: int
    sup_changes: list
    K1: float
    K2: float
    final_residual: float
    converged: bool
    tol: float

    def as_json(self) -> str:
        return json.dumps({
            "iterations": self.iterations,
            "sup_changes": [float(c) for c in self.sup_changes],
            "K1": self.K1,
            "K2": self.K2,
            "final_residual": self.final_residual,
            "converged": self.converged,
            "tol": self.tol,
        }, indent=2)


@dataclass
class ResidualReport:
    sup_residual: float            # over gradient-stable sample points
    stable_points: int
    unstable_points: int
    subsolution_margin: float      # max over kink tests of lam*v + H (or q + H)
    tol: float
    passed: bool = dataclass_field(init=False)

    def __post_init__(self):
        self.passed = (self.sup_residual <= self.tol
                       and self.subsolution_margin <= self.tol)

    def as_dict(self):
        return {
            "sup_residual": self.sup_residual,
            "stable_points": self.stable_points,
            "unstable_points": self.unstable_points,
            "subsolution_margin": self.subsolution_margin,
            "tol": self.tol,
            "passed": self.passed,
        }


# ---------------------------------------------------------------------------
# discounted fixed point

def bounds_K(problem: DiscountedProblem):
    """Constant bracket (K1, K2) for the backward fixed-point iteration."""
    k1 = problem.c1 / problem.lam
    k2 = (float(problem.theta2(0.0)) + problem.c2) / problem.lam
    return k1, k2


def solve_discounted(problem: DiscountedProblem, box, resolution, tol: float = 1e-3,
                     periodic: bool = True, step: float = 1.0,
                     progress: Optional[Callable] = None):
    """Iterate the unit-time backward operator from -K1 until the tail bound.

    The grid is treated as one period per axis by default; discounted
    localization radii exceed any affordable non-periodic padding, so
    non-periodic boxes are only accepted when their interior margin covers
    the search ball at every node (otherwise the operator raises).
    Returns (v, SolveReport).
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    k1, k2 = bounds_K(problem)
    lam = problem.lam
    box = np.asarray(box, dtype=float)
    if box.ndim == 1:
        box = box[None, :]
    if np.isscalar(resolution):
        resolution = (int(resolution),) * box.shape[0]

    v = GridFunction.from_callable(lambda p: np.full(p.shape[:-1], -k1), box,
                                   resolution, periodic=periodic)
    nodes = v.nodes()
    # fixed search Lipschitz bound: the a-priori constant of the fixed point
    lip_cap = float(problem.theta2(1.0)) + problem.c2 + lam * max(k1, k2)

    spread = k1 + k2
    cap = 10 if spread <= tol else math.ceil(math.log(spread / tol) / lam) + 10
    stop = tol * (1.0 - math.exp(-lam * step))
    sup_changes = []
    converged = False
    for it in range(cap):
        results = discounted_lax_oleinik_batch(problem, v, step, nodes,
                                               lip_bound=lip_cap)
        new_vals = np.array([r.value for r in results]).reshape(v.resolution)
        change = float(np.max(np.abs(new_vals - v.values)))
        sup_changes.append(change)
        v = v.with_values(new_vals)
        if progress is not None:
            progress(it, change)
        if change <= stop:
            converged = True
            break
    if not converged:
        raise NoConvergence(
            f"discounted iteration: sup-change {sup_changes[-1]:.3g} > {stop:.3g} "
            f"after {cap} sweeps")

    residual = residual_check(problem, v, samples=33, tol=10 * tol).sup_residual
    report = SolveReport(iterations=len(sup_changes), sup_changes=sup_changes,
                         K1=k1, K2=k2, final_residual=residual,
                         converged=converged, tol=tol)
    return v, report


# ---------------------------------------------------------------------------
# evolutionary fields

class EvolutionaryField:
    """Value field u(t, x) of an initial-value problem, evaluated on demand.

    Every evaluation with t > 0 is a localized inf-convolution of the
    initial data; values are cached per (t, point).
    """

    kind = "evolutionary"

    def __init__(self, model: LagrangianModel, u0: GridFunction,
                 growth_factory: Optional[Callable] = None):
        self.model = model
        self.u0 = u0
        self.dimension = u0.dimension
        self._growth_factory = growth_factory or (lambda T: model.growth)
        self._cache: dict = {}

    # -- localization constants -------------------------------------------

    def growth_for(self, T: float):
        return self._growth_factory(T)

    def lambda1(self, T: float) -> float:
        return localization_radius(self.growth_for(T), T, self.u0.lipschitz_estimate)

    def lipschitz_bound(self, T: float) -> float:
        return solution_lipschitz_bound(self.growth_for(T), T,
                                        self.u0.lipschitz_estimate)

    def lambda2(self, T: float) -> float:
        return localization_radius(self.growth_for(T), T, self.lipschitz_bound(T))

    def action_lagrangian(self, T: float) -> LagrangianModel:
        return self.model

    # -- evaluation ---------------------------------------------------------

    def value(self, t: float, x) -> float:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        key = (round(float(t), 12), tuple(np.round(x, 12)))
        if key in self._cache:
            return self._cache[key]
        out = self.values(t, x[None, :])[0]
        return out

    def values(self, t: float, xs) -> np.ndarray:
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        if t <= 0.0:
            return np.asarray(self.u0(xs), dtype=float).reshape(-1)
        keys = [(round(float(t), 12), tuple(np.round(x, 12))) for x in xs]
        missing = [i for i, k in enumerate(keys) if k not in self._cache]
        if missing:
            radius = self.lambda1(max(t, 1.0)) * t
            res = localized_convolution(self.model, self.u0, 0.0, t, xs[missing],
                                        radius, mode="inf")
            for i, r in zip(missing, res):
                self._cache[keys[i]] = r.value
        return np.array([self._cache[k] for k in keys])

    def result(self, t: float, x, **kwargs) -> SearchResult:
        """Full search result (tied minimizers and their paths) at one point."""
        xs = np.asarray(x, dtype=float).reshape(1, -1)
        radius = self.lambda1(max(t, 1.0)) * t
        return localized_convolution(self.model, self.u0, 0.0, t, xs, radius,
                                     mode="inf", **kwargs)[0]


def solve_evolutionary(model: LagrangianModel, u0: GridFunction, times, box,
                       resolution):
    """Value fields u(t_j, .) on the target box, one independent shot each.

    ``u0`` must cover the target box padded by the localization radius
    times the largest requested time; otherwise the operator raises
    :class:`BoundaryClipped`.
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if np.any(np.diff(times) <= 0) or times[0] <= 0:
        raise ValueError("times must be increasing and positive")
    box = np.asarray(box, dtype=float)
    if box.ndim == 1:
        box = box[None, :]
    if np.isscalar(resolution):
        resolution = (int(resolution),) * box.shape[0]
    target = GridFunction.from_callable(lambda p: np.zeros(p.shape[:-1]), box,
                                        resolution)
    nodes = target.nodes()
    field = EvolutionaryField(model, u0)
    slices = []
    for t in times:
        vals = field.values(float(t), nodes).reshape(resolution)
        slices.append(GridFunction(box, vals))
    return slices


class DiscountedField:
    """Solved discounted field v with its evolutionary lift u(t,x) = e^{lam t} v(x)."""

    kind = "discounted"

    def __init__(self, problem: DiscountedProblem, v: GridFunction):
        self.problem = problem
        self.v = v
        self.dimension = v.dimension
        self._transforms: dict = {}

    @property
    def u0(self):
        return self.v

    def transform(self, T: float):
        key = round(float(T), 9)
        if key not in self._transforms:
            self._transforms[key] = to_evolutionary(self.problem, horizon=T)
        return self._transforms[key]

    def growth_for(self, T: float):
        return self.transform(T)[0].growth

    def action_lagrangian(self, T: float) -> LagrangianModel:
        return self.transform(T)[0]

    def lambda1(self, T: float) -> float:
        return localization_radius(self.growth_for(T), T, self.v.lipschitz_estimate)

    def lipschitz_bound(self, T: float) -> float:
        return solution_lipschitz_bound(self.growth_for(T), T,
                                        self.v.lipschitz_estimate)

    def lambda2(self, T: float) -> float:
        return localization_radius(self.growth_for(T), T, self.lipschitz_bound(T))

    def value(self, t: float, x) -> float:
        return math.exp(self.problem.lam * t) * float(self.v(np.atleast_1d(x)))

    def values(self, t: float, xs) -> np.ndarray:
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        return math.exp(self.problem.lam * t) * np.asarray(self.v(xs), dtype=float).reshape(-1)

    def result(self, t: float, x, **kwargs) -> SearchResult:
        """Minimizer enumeration of the backward representation at horizon t."""
        xs = np.asarray(x, dtype=float).reshape(1, -1)
        return discounted_lax_oleinik_batch(self.problem, self.v, t, xs, **kwargs)[0]


# ---------------------------------------------------------------------------
# residual verification

def _axis_gradient(values_line, h, tol):
    """(gradient, one_sided_pair, stable) from a 5-point stencil.

    Stability needs the two centered stencils to agree and the one-sided
    slopes not to jump (a symmetric kink fools the centered test alone).
    """
    g1 = (values_line[3] - values_line[1]) / (2 * h)
    g2 = (values_line[4] - values_line[0]) / (4 * h)
    g_minus = (values_line[2] - values_line[1]) / h
    g_plus = (values_line[3] - values_line[2]) / h
    stable = (abs(g1 - g2) <= 10 * tol
              and abs(g_plus - g_minus) <= 10 * max(h, abs(g1 - g2)))
    return g1, (g_minus, g_plus), stable


def residual_check(problem_or_model, fields, samples: int = 65, tol: float = 1e-3,
                   times=None, dt_probe: float = 0.02):
    """Pointwise equation residuals on a sample of grid nodes.

    Discounted usage: ``residual_check(problem, v)`` checks
    lam*v + H(x, Dv) where the numerical gradient is stable (two centered
    stencils agree within 10*tol) and runs the one-sided-gradient
    subsolution test elsewhere.

    Evolutionary usage: ``residual_check(model, field, times=[...])`` with an
    :class:`EvolutionaryField` checks D_t u + H(t, x, D_x u) at interior
    sample nodes of the initial grid, using small time probes for D_t.
    """
    if isinstance(problem_or_model, DiscountedProblem):
        return _residual_discounted(problem_or_model, fields, samples, tol)
    if isinstance(fields, EvolutionaryField):
        if times is None:
            raise ValueError("evolutionary residual check needs times")
        return _residual_evolutionary(problem_or_model, fields, times, samples,
                                      tol, dt_probe)
    raise InvalidProblem("residual_check expects (problem, grid) or (model, field)")


def _axis_line(grid: GridFunction, flat_index, ax):
    idx = list(np.unravel_index(flat_index, grid.resolution))
    m = grid.resolution[ax]
    line = []
    ok = True
    for off in (-2, -1, 0, 1, 2):
        j = idx[ax] + off
        if grid.periodic[ax]:
            j %= m
        elif j < 0 or j >= m:
            ok = False
            break
        probe = idx.copy()
        probe[ax] = j
        line.append(grid.values[tuple(probe)])
    return (np.array(line), ok)


def _residual_discounted(problem: DiscountedProblem, v: GridFunction,
                         samples: int, tol: float) -> ResidualReport:
    lam = problem.lam
    H = problem.hamiltonian.H
    total = int(np.prod(v.resolution))
    stride = max(1, total // samples)
    picks = np.arange(0, total, stride)
    nodes = v.nodes()

    sup_res = 0.0
    sub_margin = -np.inf
    n_stable = n_unstable = 0
    for flat in picks:
        x = nodes[flat]
        grad = np.zeros(v.dimension)
        one_sided = []
        stable = True
        for ax in range(v.dimension):
            line, ok = _axis_line(v, flat, ax)
            if not ok:
                stable = False
                break
            g1, sides, ax_stable = _axis_gradient(line, v.spacing[ax], tol)
            grad[ax] = g1
            one_sided.append(sides)
            stable = stable and ax_stable
        val = float(v.values[np.unravel_index(flat, v.resolution)])
        if stable:
            n_stable += 1
            res = abs(lam * val + float(H(0.0, x, grad)))
            sup_res = max(sup_res, res)
        else:
            n_unstable += 1
            if not one_sided or len(one_sided) < v.dimension:
                continue
            # subsolution test over the hull of the one-sided gradients
            lo = np.array([min(a, b) for a, b in one_sided])
            hi = np.array([max(a, b) for a, b in one_sided])
            worst = -np.inf
            for w in np.linspace(0.0, 1.0, 17):
                p = lo + w * (hi - lo)
                worst = max(worst, lam * val + float(H(0.0, x, p)))
            sub_margin = max(sub_margin, worst)
    if sub_margin == -np.inf:
        sub_margin = 0.0
    return ResidualReport(sup_residual=sup_res, stable_points=n_stable,
                          unstable_points=n_unstable,
                          subsolution_margin=sub_margin, tol=tol)


def _residual_evolutionary(model: LagrangianModel, field: EvolutionaryField,
                           times, samples: int, tol: float,
                           dt_probe: float) -> ResidualReport:
    hmodel = model.hamiltonian
    if hmodel is None:
        raise InvalidProblem("evolutionary residual check needs a Hamiltonian")
    grid = field.u0
    nodes = grid.nodes()
    # restrict samples to where the localization ball stays inside the grid
    t_max = float(np.max(times)) + dt_probe
    pad = field.lambda1(max(t_max, 1.0)) * t_max + 3 * float(np.max(grid.spacing))
    inner = np.ones(len(nodes), dtype=bool)
    for ax in range(grid.dimension):
        if not grid.periodic[ax]:
            inner &= ((nodes[:, ax] >= grid.box[ax, 0] + pad)
                      & (nodes[:, ax] <= grid.box[ax, 1] - pad))
    nodes = nodes[inner]
    if len(nodes) == 0:
        raise InvalidProblem("no interior sample nodes: grid too small for "
                             "the localization pad")
    stride = max(1, len(nodes) // samples)
    nodes = nodes[::stride]

    sup_res = 0.0
    n_stable = n_unstable = 0
    hx = float(np.max(grid.spacing))
    for t in np.atleast_1d(times):
        t = float(t)
        vals_c = field.values(t, nodes)
        shifts = []
        for ax in range(grid.dimension):
            e = np.zeros(grid.dimension)
            e[ax] = hx
            shifts.append((field.values(t, nodes + e), field.values(t, nodes - e),
                           field.values(t, nodes + 2 * e), field.values(t, nodes - 2 * e)))
        up = field.values(t + dt_probe, nodes)
        dn = field.values(t - dt_probe, nodes)
        dtu = (up - dn) / (2 * dt_probe)
        for i in range(len(nodes)):
            grad = np.zeros(grid.dimension)
            stable = True
            for ax in range(grid.dimension):
                p1, m1, p2, m2 = (shifts[ax][k][i] for k in range(4))
                line = np.array([m2, m1, vals_c[i], p1, p2])
                g1, _, ax_stable = _axis_gradient(line, hx, tol)
                grad[ax] = g1
                stable = stable and ax_stable
            if not stable:
                n_unstable += 1
                continue
            n_stable += 1
            res = abs(dtu[i] + float(hmodel.H(t, nodes[i], grad)))
            sup_res = max(sup_res, res)
    return ResidualReport(sup_residual=sup_res, stable_points=n_stable,
                          unstable_points=n_unstable, subsolution_margin=0.0,
                          tol=tol)
