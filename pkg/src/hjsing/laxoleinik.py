"""Grid-sampled scalar fields and the inf/sup-convolution operators.

The operators search the infimum of ``f(z) + A(z, x)`` (or the supremum of
``f(y) - A(x, y)``) only inside the a-priori ball whose radius is the
localization constant times the time gap; that bound is what keeps the
scan finite and is itself asserted by the diagnostics hook.  The search is
a three-stage pipeline: a straight-segment quadrature ranks every node in
the ball, the optimizing direct method re-scores a window around the
leaders, and a golden-section polish with Richardson-refined actions
produces the final value and the (possibly tied) argument set.

Grids are axis-aligned boxes with multilinear interpolation.  An axis may
be periodic, in which case node values wrap and the candidate enumeration
works with real-line representatives near the query point.  Periodic
wrapping is what makes discounted fixed-point iteration possible on a
single period; the localization radii of the a-priori bounds routinely
exceed any affordable non-periodic padding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dataclass_field
from typing import Callable, Optional

import numpy as np

from .action import minimize_paths, straight_line_actions, _refine_nodes
from .errors import BoundaryClipped, ExponentOverflow
from .model import (
    EXPONENT_CAP,
    DiscountedProblem,
    GrowthData,
    LagrangianModel,
    convex_conjugate,
    to_evolutionary,
)

_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0

# optional hook fed with one record per operator call (used by verification)
_LOCALIZATION_COLLECTOR: Optional[Callable] = None


def set_localization_collector(fn: Optional[Callable]):
    """Install fn(record: dict) to observe every localized search; None clears."""
    global _LOCALIZATION_COLLECTOR
    _LOCALIZATION_COLLECTOR = fn


# ---------------------------------------------------------------------------
# grid functions

class GridFunction:
    """Scalar field sampled on a rectangular box, multilinear interpolation.

    Parameters
    ----------
    box : (n, 2) array
        Axis-aligned bounds [a_i, b_i].
    values : ndarray
        Node values, shape = resolution.  Stored read-only.
    periodic : bool or tuple of bool
        Periodic axes wrap: node i lives at a + i*(b-a)/m and position b
        identifies with a.  Non-periodic axes place m nodes on [a, b].
    """

    def __init__(self, box, values, periodic=False):
        box = np.asarray(box, dtype=float)
        if box.ndim == 1:
            box = box[None, :]
        values = np.asarray(values, dtype=float)
        if box.shape[0] != values.ndim or np.any(box[:, 1] <= box[:, 0]):
            raise ValueError("box must be (n, 2) with min < max, matching values.ndim")
        if not np.all(np.isfinite(values)):
            raise ValueError("grid values must be finite")
        self.box = box
        self.dimension = box.shape[0]
        self.resolution = values.shape
        if isinstance(periodic, bool):
            periodic = (periodic,) * self.dimension
        self.periodic = tuple(bool(p) for p in periodic)
        self.values = values.copy()
        self.values.setflags(write=False)
        self.spacing = np.array([
            (b - a) / (m if per else m - 1)
            for (a, b), m, per in zip(box, values.shape, self.periodic)
        ])
        self.lipschitz_estimate = self._lipschitz()

    # -- construction ------------------------------------------------------

    @classmethod
    def from_callable(cls, fn, box, resolution, periodic=False):
        box = np.asarray(box, dtype=float)
        if box.ndim == 1:
            box = box[None, :]
        if np.isscalar(resolution):
            resolution = (int(resolution),) * box.shape[0]
        if isinstance(periodic, bool):
            periodic = (periodic,) * box.shape[0]
        axes = [
            np.linspace(a, b, m, endpoint=not per)
            for (a, b), m, per in zip(box, resolution, periodic)
        ]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack(mesh, axis=-1)
        return cls(box, np.asarray(fn(pts), dtype=float), periodic)

    def with_values(self, values) -> "GridFunction":
        return GridFunction(self.box, values, self.periodic)

    # -- geometry ----------------------------------------------------------

    def axes(self):
        return [
            np.linspace(a, b, m, endpoint=not per)
            for (a, b), m, per in zip(self.box, self.resolution, self.periodic)
        ]

    def nodes(self):
        """All node coordinates, shape (prod(resolution), n)."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack(mesh, axis=-1).reshape(-1, self.dimension)

    def _lipschitz(self) -> float:
        total = 0.0
        for ax in range(self.dimension):
            diff = np.diff(self.values, axis=ax)
            quot = 0.0 if diff.size == 0 else float(np.max(np.abs(diff))) / self.spacing[ax]
            if self.periodic[ax]:
                wrap = np.abs(np.take(self.values, 0, axis=ax)
                              - np.take(self.values, -1, axis=ax))
                if wrap.size:
                    quot = max(quot, float(np.max(wrap)) / self.spacing[ax])
            total += quot ** 2
        return math.sqrt(total)

    def interpolation_error_bound(self) -> float:
        """Bound on |interpolant - underlying field| from second differences."""
        total = 0.0
        for ax in range(self.dimension):
            vals = self.values
            if self.periodic[ax]:
                vals = np.concatenate([vals, np.take(vals, [0], axis=ax)], axis=ax)
            d2 = np.diff(vals, n=2, axis=ax)
            if d2.size:
                total += float(np.max(np.abs(d2))) / 8.0
        return total

    # -- evaluation ---------------------------------------------------------

    def __call__(self, points):
        pts = np.asarray(points, dtype=float)
        squeeze = pts.ndim == 1
        pts = np.atleast_2d(pts)
        flat = pts.reshape(-1, self.dimension)
        idx0, frac = [], []
        for ax in range(self.dimension):
            a, b = self.box[ax]
            m = self.resolution[ax]
            h = self.spacing[ax]
            u = (flat[:, ax] - a) / h
            # snap to exact node indices so nodes reproduce stored values
            near = np.abs(u - np.round(u)) < 1e-9
            u = np.where(near, np.round(u), u)
            if self.periodic[ax]:
                u = np.mod(u, m)
                i0 = np.floor(u).astype(int) % m
            else:
                span = b - a
                if np.any(flat[:, ax] < a - 1e-9 * span) or np.any(flat[:, ax] > b + 1e-9 * span):
                    raise BoundaryClipped(
                        f"evaluation outside box on axis {ax}")
                u = np.clip(u, 0.0, m - 1)
                i0 = np.minimum(np.floor(u).astype(int), m - 2 if m > 1 else 0)
            idx0.append(i0)
            frac.append(u - i0)
        out = np.zeros(flat.shape[0])
        for corner in range(1 << self.dimension):
            weight = np.ones(flat.shape[0])
            index = []
            for ax in range(self.dimension):
                if corner >> ax & 1:
                    i = idx0[ax] + 1
                    if self.periodic[ax]:
                        i = i % self.resolution[ax]
                    else:
                        i = np.minimum(i, self.resolution[ax] - 1)
                    weight = weight * frac[ax]
                else:
                    i = idx0[ax]
                    weight = weight * (1.0 - frac[ax])
                index.append(i)
            out += weight * self.values[tuple(index)]
        out = out.reshape(pts.shape[:-1])
        return float(out[0]) if squeeze else out

    def node_gradient(self):
        """Central-difference gradient at every node, shape resolution + (n,)."""
        grads = []
        for ax in range(self.dimension):
            if self.periodic[ax]:
                up = np.roll(self.values, -1, axis=ax)
                dn = np.roll(self.values, 1, axis=ax)
                grads.append((up - dn) / (2 * self.spacing[ax]))
            else:
                grads.append(np.gradient(self.values, self.spacing[ax], axis=ax))
        return np.stack(grads, axis=-1)

    # -- persistence ---------------------------------------------------------

    def write(self, path, lam: Optional[float] = None, comments=()):
        lines = [f"# {c}" for c in comments]
        lines.append(f"dim {self.dimension}")
        lines.append("box " + " ".join(repr(float(v)) for v in self.box.reshape(-1)))
        lines.append("resolution " + " ".join(str(m) for m in self.resolution))
        if lam is not None:
            lines.append(f"lambda {repr(float(lam))}")
        if any(self.periodic):
            lines.append("periodic " + " ".join("1" if p else "0" for p in self.periodic))
        lines.extend(repr(float(v)) for v in self.values.reshape(-1))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path):
        """Returns (grid, lam-or-None)."""
        header = {}
        values = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split()
                if parts[0] in ("dim", "box", "resolution", "lambda", "periodic", "clamped"):
                    header[parts[0]] = parts[1:]
                else:
                    values.append(float(parts[0]))
        n = int(header["dim"][0])
        box = np.array([float(v) for v in header["box"]], dtype=float).reshape(n, 2)
        resolution = tuple(int(m) for m in header["resolution"])
        periodic = tuple(bool(int(p)) for p in header.get("periodic", ["0"] * n))
        lam = float(header["lambda"][0]) if "lambda" in header else None
        grid = cls(box, np.array(values).reshape(resolution), periodic)
        if "clamped" in header:
            grid.clamp_value = float(header["clamped"][0])
        return grid, lam


# ---------------------------------------------------------------------------
# a-priori constants

def localization_radius(growth: GrowthData, T: float, K: float) -> float:
    """Per-unit-time bound on |argmin - x| for Lipschitz-constant-K inputs."""
    if K < 0 or T <= 0:
        raise ValueError("need K >= 0 and T > 0")
    return float(growth.theta_lower_conjugate(K + 1.0) + growth.c_T
                 + growth.theta_upper(0.0))


def solution_lipschitz_bound(growth: GrowthData, T: float, lip_u0: float) -> float:
    """Lipschitz bound on the value field up to horizon T from Lip of the data.

    Chains the energy estimate: a spatial-gradient bound F1 from the energy
    at the endpoint, a time-derivative bound F2 through the equation, and
    returns sqrt(F1^2 + F2^2).
    """
    lam1 = localization_radius(growth, T, lip_u0)
    f1 = (growth.theta_lower_conjugate(lip_u0) + growth.c_T
          + growth.ct1(T) * T + growth.ct2(T) * T * growth.theta_upper(lam1)
          + growth.theta_upper(1.0))
    upper_conj = convex_conjugate(growth.theta_upper, f1)
    f2 = growth.theta_lower_conjugate(f1) + growth.c_T + abs(upper_conj)
    return float(math.hypot(f1, f2))


# ---------------------------------------------------------------------------
# argument sets

@dataclass
class ArgBall:
    """Localization ball plus the near-optimal argument points found in it."""

    center: np.ndarray
    radius: float
    argpoints: list = dataclass_field(default_factory=list)
    spacing: float = 0.0

    def __post_init__(self):
        self.center = np.atleast_1d(np.asarray(self.center, dtype=float))
        for z in self.argpoints:
            d = float(np.linalg.norm(np.asarray(z) - self.center))
            if d > self.radius + self.spacing + 1e-9:
                raise ValueError(
                    f"argpoint at distance {d:.6g} outside ball radius {self.radius:.6g}")


# ---------------------------------------------------------------------------
# candidate enumeration

def _axis_candidates(grid: GridFunction, ax: int, center: float, radius: float,
                     strict: bool):
    a, b = grid.box[ax]
    nodes = np.linspace(a, b, grid.resolution[ax], endpoint=not grid.periodic[ax])
    if grid.periodic[ax]:
        span = b - a
        r_eff = min(radius, 0.5 * span + grid.spacing[ax])
        k_lo = math.floor((center - r_eff - a) / span)
        k_hi = math.ceil((center + r_eff - a) / span)
        out = []
        for k in range(k_lo - 1, k_hi + 1):
            shifted = nodes + k * span
            mask = (shifted >= center - r_eff) & (shifted <= center + r_eff)
            out.append(shifted[mask])
        pos = np.unique(np.concatenate(out)) if out else np.array([center])
        if pos.size == 0:
            pos = np.array([center])
        return pos
    lo, hi = center - radius, center + radius
    if strict and (lo < a - 1e-9 * (b - a) or hi > b + 1e-9 * (b - a)):
        raise BoundaryClipped(
            f"localization ball [{lo:.4g}, {hi:.4g}] exits box [{a:.4g}, {b:.4g}] on axis {ax}")
    mask = (nodes >= max(lo, a)) & (nodes <= min(hi, b))
    pos = nodes[mask]
    if pos.size == 0:
        pos = np.array([min(max(center, a), b)])
    return pos


def _ball_candidates(grid: GridFunction, center, radius: float, strict: bool):
    """Real-line candidate positions in the ball around center, center included."""
    center = np.atleast_1d(np.asarray(center, dtype=float))
    per_axis = [_axis_candidates(grid, ax, center[ax], radius, strict)
                for ax in range(grid.dimension)]
    mesh = np.meshgrid(*per_axis, indexing="ij")
    pts = np.stack(mesh, axis=-1).reshape(-1, grid.dimension)
    keep = np.linalg.norm(pts - center, axis=1) <= radius + 1e-12
    pts = pts[keep]
    return np.vstack([center[None, :], pts])


# ---------------------------------------------------------------------------
# the localized search

def _golden_polish_1d(cost_fn, seeds, half_width, iters=24):
    """Vectorized golden-section minimize around each 1D seed.

    ``cost_fn(positions (P,1)) -> (P,)`` is evaluated on the full batch each
    iteration; returns (positions (P,1), costs (P,)).
    """
    seeds = np.asarray(seeds, dtype=float).reshape(-1)
    lo = seeds - half_width
    hi = seeds + half_width
    for _ in range(iters):
        a = hi - _INV_PHI * (hi - lo)
        b = lo + _INV_PHI * (hi - lo)
        fa = cost_fn(a[:, None])
        fb = cost_fn(b[:, None])
        left = fa <= fb
        hi = np.where(left, b, hi)
        lo = np.where(left, lo, a)
    best_pos = 0.5 * (lo + hi)
    best_val = cost_fn(best_pos[:, None])
    return best_pos[:, None], best_val


def _polish_nd(cost_fn, seed, half_width, iters=3):
    """Cyclic per-axis golden search around one nD seed."""
    z = np.array(seed, dtype=float)
    n = z.size
    for _ in range(iters):
        for ax in range(n):
            def axis_cost(t):
                trial = np.repeat(z[None, :], len(t), axis=0)
                trial[:, ax] = t[:, 0]
                return cost_fn(trial)
            pos, _ = _golden_polish_1d(axis_cost, np.array([z[ax]]), half_width, iters=18)
            z[ax] = pos[0, 0]
        half_width *= 0.4
    return z, float(cost_fn(z[None, :])[0])


@dataclass
class SearchResult:
    value: float
    arg: ArgBall
    minimizer_nodes: list          # path node arrays, one per tied argpoint
    times: np.ndarray
    best_point: np.ndarray
    f_part: float


def localized_convolution(model: LagrangianModel, f: GridFunction, t1: float,
                          t2: float, xs, radius: float, mode: str = "inf",
                          f_scale: float = 1.0, scan_segments: int = 8,
                          segments: int = 16, window: float = 1.0,
                          polish_window: Optional[float] = None,
                          tie_tol: float = 1e-6, strict: bool = True,
                          collect: bool = True):
    """Batched localized inf (or sup) convolution of f with the action kernel.

    mode="inf": value(x) = min_z f_scale*f(z) + A_{t1,t2}(z, x)
    mode="sup": value(x) = max_y f_scale*f(y) - A_{t1,t2}(x, y)

    Returns a list of :class:`SearchResult`, one per row of ``xs``.
    """
    if not t2 > t1:
        raise ValueError("need t2 > t1")
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    P, n = xs.shape
    dt = t2 - t1
    sign = 1.0 if mode == "inf" else -1.0
    h_ref = float(np.max(f.spacing))
    if polish_window is None:
        polish_window = max(5e-3, h_ref ** 2 / dt)

    cand_list = [_ball_candidates(f, xs[i], radius, strict) for i in range(P)]
    owners = np.concatenate([np.full(len(c), i) for i, c in enumerate(cand_list)])
    cand = np.vstack(cand_list)

    def clamp(points):
        out = np.array(points, dtype=float)
        for ax in range(f.dimension):
            if not f.periodic[ax]:
                out[:, ax] = np.clip(out[:, ax], f.box[ax, 0], f.box[ax, 1])
        return out

    def action_batch(points, owner_idx, nseg, init=None):
        if mode == "inf":
            starts, ends = points, xs[owner_idx]
        else:
            starts, ends = xs[owner_idx], points
        return minimize_paths(model, t1, t2, starts, ends, segments=nseg,
                              init_nodes=init)

    def straight_batch(points, owner_idx, nseg):
        if mode == "inf":
            return straight_line_actions(model, t1, t2, points, xs[owner_idx], nseg)
        return straight_line_actions(model, t1, t2, xs[owner_idx], points, nseg)

    f_vals = f_scale * np.asarray(f(cand), dtype=float).reshape(-1)
    cheap = straight_batch(cand, owners, scan_segments)
    cost = sign * f_vals + cheap

    # window around each owner's leader
    best_per = np.full(P, np.inf)
    np.minimum.at(best_per, owners, cost)
    keep = cost <= best_per[owners] + window
    cand_k, owners_k, cost_k = cand[keep], owners[keep], cost[keep]

    sol = action_batch(cand_k, owners_k, segments)
    cost_acc = sign * f_scale * np.asarray(f(cand_k), dtype=float).reshape(-1) + sol["action"]

    best_acc = np.full(P, np.inf)
    np.minimum.at(best_acc, owners_k, cost_acc)

    results: list[Optional[SearchResult]] = [None] * P
    # polish seeds: near-optimal candidates thinned to distinct basins
    seed_rows = np.where(cost_acc <= best_acc[owners_k] + polish_window)[0]
    seeds_by_owner: dict[int, list[int]] = {}
    for row in seed_rows:
        seeds_by_owner.setdefault(int(owners_k[row]), []).append(int(row))

    polished_pos = []
    polished_owner = []
    for i in range(P):
        rows = seeds_by_owner.get(i, [])
        rows.sort(key=lambda r: cost_acc[r])
        chosen: list[np.ndarray] = []
        for r in rows:
            z = cand_k[r]
            if all(np.linalg.norm(z - c) > 2.0 * h_ref for c in chosen):
                chosen.append(z)
            if len(chosen) >= 6:
                break
        if not chosen:
            chosen = [xs[i]]
        for z in chosen:
            polished_pos.append(z)
            polished_owner.append(i)
    polished_pos = np.asarray(polished_pos, dtype=float)
    polished_owner = np.asarray(polished_owner, dtype=int)

    def polish_cost(points, owner_idx):
        points = clamp(points)
        sol_p = action_batch(points, owner_idx, segments)
        return (sign * f_scale * np.asarray(f(points), dtype=float).reshape(-1)
                + sol_p["action"])

    if n == 1:
        pos, val = _golden_polish_1d(
            lambda pts: polish_cost(pts, polished_owner),
            polished_pos[:, 0], half_width=h_ref, iters=24)
        pos = clamp(pos)
    else:
        pos = np.empty_like(polished_pos)
        val = np.empty(len(polished_pos))
        for k in range(len(polished_pos)):
            owner_idx = polished_owner[k: k + 1]
            zk, vk = _polish_nd(lambda pts: polish_cost(pts, np.repeat(owner_idx, len(pts))),
                                polished_pos[k], half_width=h_ref)
            pos[k], val[k] = clamp(zk[None, :])[0], vk

    # final assembly: Richardson-refined values for every near-tied winner,
    # batched across owners
    tied_rows, tied_owner = [], []
    for i in range(P):
        rows = np.where(polished_owner == i)[0]
        vals = val[rows]
        order = np.argsort(vals)
        rows, vals = rows[order], vals[order]
        for r, vv in zip(rows, vals):
            if vv <= vals[0] + max(tie_tol, 1e-8):
                tied_rows.append(int(r))
                tied_owner.append(i)
    tied_rows = np.asarray(tied_rows, dtype=int)
    tied_owner = np.asarray(tied_owner, dtype=int)
    pts = pos[tied_rows]
    sol1 = action_batch(pts, tied_owner, segments)
    sol2 = action_batch(pts, tied_owner, 2 * segments,
                        init=_refine_nodes(sol1["nodes"]))
    a_ref = sol2["action"] + (sol2["action"] - sol1["action"]) / 3.0
    f_pts = f_scale * np.asarray(f(pts), dtype=float).reshape(-1)
    cost_final = sign * f_pts + a_ref
    times = sol2["times"]

    for i in range(P):
        rows = np.where(tied_owner == i)[0]
        vals = cost_final[rows]
        order = np.argsort(vals)
        rows, vals = rows[order], vals[order]
        keep = [r for r, v in zip(rows, vals) if v <= vals[0] + tie_tol]
        arg_pts = [pts[r].copy() for r in keep]
        arg = ArgBall(center=xs[i], radius=radius, argpoints=arg_pts,
                      spacing=h_ref)
        best = int(rows[0])
        results[i] = SearchResult(
            value=float(sign * vals[0]), arg=arg,
            minimizer_nodes=[sol2["nodes"][r] for r in keep],
            times=times, best_point=pts[best].copy(),
            f_part=float(f_pts[best]))
        if collect and _LOCALIZATION_COLLECTOR is not None:
            _LOCALIZATION_COLLECTOR({
                "center": xs[i].copy(), "radius": radius, "dt": dt,
                "argpoints": [p.copy() for p in arg_pts],
                "spacing": h_ref, "mode": mode,
            })
    return results


# ---------------------------------------------------------------------------
# public operators

def lax_oleinik_minus(model: LagrangianModel, f: GridFunction, t1: float,
                      t2: float, x, **kwargs):
    """(T^- f)(x) = inf_z f(z) + A_{t1,t2}(z, x), searched in the a-priori ball."""
    xs = np.asarray(x, dtype=float).reshape(1, -1)
    radius = localization_radius(model.growth, t2, f.lipschitz_estimate) * (t2 - t1)
    res = localized_convolution(model, f, t1, t2, xs, radius, mode="inf", **kwargs)[0]
    return res.value, res.arg


def lax_oleinik_plus(model: LagrangianModel, f: GridFunction, t1: float, x,
                     t2: float, radius: Optional[float] = None, **kwargs):
    """(T^+ f)(x) = sup_y f(y) - A_{t1,t2}(x, y), searched in the a-priori ball.

    Pass ``radius`` to use the solution-field bound (lambda_2 times the
    time gap) instead of the generic Lipschitz-based one.
    """
    xs = np.asarray(x, dtype=float).reshape(1, -1)
    if radius is None:
        radius = localization_radius(model.growth, t2, f.lipschitz_estimate) * (t2 - t1)
    res = localized_convolution(model, f, t1, t2, xs, radius, mode="sup", **kwargs)[0]
    return res.value, res.arg


def discounted_lax_oleinik(problem: DiscountedProblem, v: GridFunction, t: float,
                           x, **kwargs):
    """Value of the discounted backward operator at one point.

    Computed through the evolutionary transform: exp(-lam t) times the
    inf-convolution of v with the rescaled-action kernel.
    """
    results = discounted_lax_oleinik_batch(problem, v, t,
                                           np.atleast_2d(np.asarray(x, dtype=float)),
                                           **kwargs)
    return results[0].value


def discounted_lax_oleinik_batch(problem: DiscountedProblem, v: GridFunction,
                                 t: float, xs, lip_bound: Optional[float] = None,
                                 **kwargs):
    """Batched discounted operator; returns SearchResults with discounted values."""
    if t <= 0:
        raise ValueError("need t > 0")
    if problem.lam * t > EXPONENT_CAP:
        raise ExponentOverflow(
            f"lam*t = {problem.lam * t:.3g} exceeds cap {EXPONENT_CAP:g}; "
            "compose shorter steps instead")
    lhat, _ = to_evolutionary(problem, horizon=t)
    K = v.lipschitz_estimate if lip_bound is None else max(lip_bound, v.lipschitz_estimate)
    radius = localization_radius(lhat.growth, t, K) * t
    results = localized_convolution(lhat, v, 0.0, t, xs, radius, mode="inf", **kwargs)
    scale = math.exp(-problem.lam * t)
    for r in results:
        r.value = scale * r.value
    return results
