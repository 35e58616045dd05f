"""Singularity machinery: reachable gradients, propagation, cut times, retraction.

A point of the value field is singular when its reachable-gradient set has
more than one element; the set is enumerated from the distinct minimizers
of the backward representation.  Singularities are continued forward by
the ball-constrained argmax of u(t, .) - A_{t1,t}(x1, .): on a short
enough step the objective is strictly concave on the localization ball,
so the maximizer is unique and moves the singularity.  Chaining steps
across growing annuli, with the step budget recomputed on each annulus,
yields a curve of any requested length.

For discounted problems the same machinery runs on the exponential lift
u(t, x) = e^{lam t} v(x); forward calibrated flow plus the singular
continuation give the homotopy that retracts the complement of the
numerical Aubry set onto the singular set.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field as dataclass_field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import solve_ivp

from .action import (
    ConvexityConstants,
    _refine_nodes,
    estimate_constants,
    minimize_paths,
)
from .errors import (
    BlowUp,
    ConcavityFailure,
    InvalidProblem,
    NoMinimizer,
    NonUniqueArgmax,
    ScheduleStall,
)
from .laxoleinik import GridFunction
from .model import DiscountedProblem
from .solver import DiscountedField, EvolutionaryField

logger = logging.getLogger(__name__)

_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


# ---------------------------------------------------------------------------
# reachable gradients

@dataclass
class ReachableGradientSet:
    """Limiting gradients at a point, one element per distinct minimizer."""

    point: np.ndarray
    time: Optional[float]
    elements: list                  # [(q, p)] evolutionary, [p] discounted
    diameter: float
    source: str = "minimizer-enumeration"

    def momenta(self):
        if not self.elements:
            return np.zeros((0, len(self.point)))
        if isinstance(self.elements[0], tuple):
            return np.array([p for _, p in self.elements])
        return np.array(self.elements)


def _endpoint_velocity(nodes, dt, where: str):
    if where == "end":
        return (3.0 * nodes[-1] - 4.0 * nodes[-2] + nodes[-3]) / (2.0 * dt)
    return (-3.0 * nodes[0] + 4.0 * nodes[1] - nodes[2]) / (2.0 * dt)


def reachable_gradients(field, model, t: float, x, restarts: int = 5,
                        merge_tol: float = 1e-4,
                        polish_window: float = 2e-2) -> ReachableGradientSet:
    """Enumerate reachable gradients at (t, x) (or at x for discounted fields).

    Distinct minimizers of the backward representation are collected from a
    full scan of the localization ball plus polish of the near-tied basins
    (at least ``restarts`` seeds).  Evolutionary elements are (q, p) with
    q = -H(t, x, p); discounted elements are gradients of v itself.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if field.kind == "discounted":
        probe = min(0.5, 10.0 / field.problem.lam)
        res = field.result(probe, x, polish_window=polish_window)
        lag = field.problem.lagrangian
        t_end = probe
    else:
        if t <= 0:
            raise ValueError("evolutionary reachable gradients need t > 0")
        res = field.result(t, x, polish_window=polish_window)
        lag = field.model
        t_end = t
    if not res.minimizer_nodes:
        raise NoMinimizer(f"no minimizing trajectory found at {x}")

    # keep only true ties of the minimum value
    values = []
    dt = res.times[1] - res.times[0]
    elems = []
    for nodes in res.minimizer_nodes:
        vel = _endpoint_velocity(nodes, dt, "end")
        if field.kind == "discounted":
            p = np.atleast_1d(np.asarray(lag.L_v(0.0, x, vel), dtype=float))
            elems.append(p)
        else:
            p = np.atleast_1d(np.asarray(lag.L_v(t_end, x, vel), dtype=float))
            hmodel = lag.hamiltonian
            q = float(-hmodel.H(t_end, x, p)) if hmodel is not None else float("nan")
            elems.append((q, p))

    merged = []
    for e in elems:
        p = e[1] if isinstance(e, tuple) else e
        dup = False
        for m in merged:
            pm = m[1] if isinstance(m, tuple) else m
            if np.linalg.norm(p - pm) <= merge_tol:
                dup = True
                break
        if not dup:
            merged.append(e)
    momenta = np.array([m[1] if isinstance(m, tuple) else m for m in merged])
    if len(momenta) > 1:
        diam = float(max(np.linalg.norm(a - b)
                         for i, a in enumerate(momenta) for b in momenta[i + 1:]))
    else:
        diam = 0.0
    return ReachableGradientSet(point=x.copy(),
                                time=None if field.kind == "discounted" else t,
                                elements=merged, diameter=diam)


def is_singular(field, model, t: float, x, singular_tol: float = 1e-2):
    """(flag, certificate): singular iff the reachable set has diameter > tol."""
    cert = reachable_gradients(field, model, t, x)
    return cert.diameter > singular_tol, cert


# ---------------------------------------------------------------------------
# one propagation step

@dataclass
class StepResult:
    t_step: float
    times: np.ndarray               # ladder times, increasing, start excluded
    points: np.ndarray              # maximizer positions at the ladder times
    certificates: list              # ReachableGradientSet or None per point
    constants: ConvexityConstants
    concavity_margin: float


def _lattice(center, radius, lo, hi, per_axis=49):
    center = np.atleast_1d(np.asarray(center, dtype=float))
    axes = []
    for ax in range(center.size):
        a = max(center[ax] - radius, lo[ax])
        b = min(center[ax] + radius, hi[ax])
        axes.append(np.linspace(a, b, per_axis))
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack(mesh, axis=-1).reshape(-1, center.size)
    keep = np.linalg.norm(pts - center, axis=1) <= radius + 1e-12
    return np.vstack([center[None, :], pts[keep]])


def _field_domain(field, t: float, T: float):
    """Evaluable y-range for u(t, .), shrunk for evolutionary fields."""
    grid = field.u0 if field.kind == "evolutionary" else field.v
    lo = grid.box[:, 0].copy()
    hi = grid.box[:, 1].copy()
    if field.kind == "evolutionary":
        pad = field.lambda1(max(t, 1.0)) * t + np.max(grid.spacing)
        for ax in range(grid.dimension):
            if not grid.periodic[ax]:
                lo[ax] += pad
                hi[ax] -= pad
    else:
        for ax in range(grid.dimension):
            if grid.periodic[ax]:
                lo[ax], hi[ax] = -np.inf, np.inf
    return lo, hi


def _periodic_radius_cap(grid: GridFunction) -> float:
    """Half a period suffices on periodic axes: every node value has a
    representative there, and farther wraps only pay more transport."""
    caps = [0.5 * (b - a) + 2 * grid.spacing[ax]
            for ax, (a, b) in enumerate(grid.box) if grid.periodic[ax]]
    return min(caps) if caps else np.inf


def _argmax_objective(field, action_model, t1: float, x1, t: float, ys,
                      segments: int = 16):
    """phi(y) = u(t, y) - A_{t1,t}(x1, y) on a batch of y."""
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    sol = minimize_paths(action_model, t1, t, np.broadcast_to(x1, ys.shape), ys,
                         segments=segments)
    u_vals = field.values(t, ys)
    return u_vals - sol["action"]


def _argmax_point(field, action_model, t1, x1, t, radius, per_axis=49,
                  tie_tol=1e-6):
    """Maximize phi over the ball; returns (y*, phi*, scan_pts, scan_vals)."""
    lo, hi = _field_domain(field, t, t)
    cand = _lattice(x1, radius, lo, hi, per_axis=per_axis)
    vals = _argmax_objective(field, action_model, t1, x1, t, cand)
    order = np.argsort(-vals)
    n = cand.shape[1]
    h_polish = max(radius / (per_axis - 1), 1e-4)

    best_pos, best_val = None, -np.inf
    # polish the leading basin (and a runner-up if clearly separated)
    seeds = [cand[order[0]]]
    for idx in order[1:]:
        if vals[idx] < vals[order[0]] - 10 * tie_tol:
            break
        if np.linalg.norm(cand[idx] - seeds[0]) > 3 * h_polish:
            seeds.append(cand[idx])
            break
    for seed in seeds:
        z = np.array(seed, dtype=float)
        width = h_polish
        for _ in range(2 if n > 1 else 1):
            for ax in range(n):
                lo_b, hi_b = z[ax] - width, z[ax] + width
                for _ in range(28):
                    a = hi_b - _INV_PHI * (hi_b - lo_b)
                    b = lo_b + _INV_PHI * (hi_b - lo_b)
                    za, zb = z.copy(), z.copy()
                    za[ax], zb[ax] = a, b
                    fa = _argmax_objective(field, action_model, t1, x1, t,
                                           np.stack([za, zb]))
                    if fa[0] >= fa[1]:
                        hi_b = b
                    else:
                        lo_b = a
                z[ax] = 0.5 * (lo_b + hi_b)
            width *= 0.4
        v = float(_argmax_objective(field, action_model, t1, x1, t, z[None, :])[0])
        if v > best_val:
            best_val, best_pos = v, z
    return best_pos, best_val, cand, vals


def estimate_semiconcavity(field, t: float, x, scales) -> float:
    """Largest positive second-difference ratio of u(t, .) near x."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n = x.size
    worst = 0.0
    for scale in scales:
        for ax in range(n):
            z = np.zeros(n)
            z[ax] = scale
            pts = np.stack([x + z, x - z, x])
            vals = field.values(t, pts)
            ratio = (vals[0] + vals[1] - 2 * vals[2]) / (scale * scale)
            worst = max(worst, float(ratio))
    return worst


def propagation_step(field, model, t1: float, x1, T: float,
                     constants: Optional[ConvexityConstants] = None,
                     step_cap: Optional[float] = None, ladder: int = 4,
                     certify: bool = True, singular_tol: float = 1e-2,
                     max_halvings: int = 6) -> StepResult:
    """One ball-constrained argmax step of the singular continuation.

    The step budget is the ratio of the action's spatial convexity modulus
    to twice the local semiconcavity of u (with a 1.5 safety divisor),
    clamped to ``step_cap``.  For each ladder time the maximizer of
    u(t, .) - A_{t1,t}(x1, .) over the ball of radius lambda_2(T)(t - t1)
    is located, its strict-concavity margin checked, and (optionally) its
    singularity certificate computed.  Concavity or uniqueness failures
    halve the step, up to ``max_halvings``.
    """
    x1 = np.atleast_1d(np.asarray(x1, dtype=float))
    action_model = field.action_lagrangian(T)
    lam2 = field.lambda2(T)
    grid = field.u0 if field.kind == "evolutionary" else field.v
    h_grid = float(np.max(grid.spacing))
    radius_cap = _periodic_radius_cap(grid)

    if constants is None:
        span = min(T - t1, step_cap or (T - t1))
        slope = min(lam2, radius_cap / span)
        constants = estimate_constants(action_model, t1, x1, t1 + span,
                                       slope * span, slope)
    scales = [2 * h_grid, 4 * h_grid, 8 * h_grid]
    c_loc = max(estimate_semiconcavity(field, t1, x1, scales), 1e-8)
    t_step = constants.c2 / (2.0 * c_loc) / 1.5
    cap = step_cap if step_cap is not None else (T - t1)
    t_step = min(t_step, cap)
    if t_step < 1e-6:
        raise ScheduleStall(f"step budget {t_step:.3g} underflowed at t = {t1:.4g}")

    for attempt in range(max_halvings + 1):
        try:
            times = t1 + t_step * np.arange(1, ladder + 1) / ladder
            points = np.empty((ladder, x1.size))
            certs: list = []
            margin_worst = np.inf
            prev = x1
            for j, t in enumerate(times):
                radius = min(lam2 * (t - t1), radius_cap)
                y, phi, cand, vals = _argmax_point(field, action_model, t1, x1,
                                                   t, radius)
                # near-tied distant maxima mean the argmax is not unique
                far = np.linalg.norm(cand - y, axis=1) > max(4 * h_grid, 0.05 * radius)
                if np.any(vals[far] >= phi - 1e-9):
                    raise NonUniqueArgmax(f"tied maximizers at t = {t:.4g}")
                margin_req = constants.c2 / (t - t1) - c_loc
                if margin_req <= 0:
                    raise ConcavityFailure("no concavity margin at this step size")
                for scale in (2 * h_grid, 8 * h_grid):
                    z = np.zeros(x1.size)
                    z[0] = scale
                    second = float(
                        _argmax_objective(field, action_model, t1, x1, t,
                                          np.stack([y + z, y - z])).sum()
                        - 2 * phi)
                    allowed = -0.25 * margin_req * scale * scale
                    margin_worst = min(margin_worst, allowed - second)
                    if second > allowed:
                        raise ConcavityFailure(
                            f"objective second difference {second:.3g} above "
                            f"{allowed:.3g} at t = {t:.4g}")
                points[j] = y
                certs.append(reachable_gradients(field, model, t, y)
                             if certify else None)
                prev = y
            return StepResult(t_step=t_step, times=times, points=points,
                              certificates=certs, constants=constants,
                              concavity_margin=float(margin_worst))
        except (ConcavityFailure, NonUniqueArgmax) as exc:
            if attempt == max_halvings:
                if isinstance(exc, NonUniqueArgmax):
                    logger.warning("argmax stayed tied after %d halvings; "
                                   "taking the maximizer closest to the previous "
                                   "point", max_halvings)
                    order = np.argsort(np.linalg.norm(cand - prev, axis=1))
                    tied = [k for k in order if vals[k] >= phi - 1e-9]
                    points[j] = cand[tied[0]]
                    certs.append(reachable_gradients(field, model, t, points[j])
                                 if certify else None)
                    return StepResult(t_step=t_step, times=times[: j + 1],
                                      points=points[: j + 1], certificates=certs,
                                      constants=constants,
                                      concavity_margin=float(margin_worst))
                raise
            t_step *= 0.5
            if t_step < 1e-6:
                raise ScheduleStall("step halved below 1e-6") from exc
    raise ScheduleStall("unreachable")


# ---------------------------------------------------------------------------
# global trace

@dataclass
class SingularCurve:
    """Time-stamped singular curve with per-step diagnostics."""

    times: np.ndarray
    points: np.ndarray
    step_sizes: np.ndarray
    schedule: list                  # (annulus_index, t_i, k_i)
    certificates: list              # ReachableGradientSet or None, per point
    origin: np.ndarray
    t0: float
    localization_ok: bool = True
    diagnostics: dict = dataclass_field(default_factory=dict)

    @property
    def certificate_diameters(self):
        return np.array([c.diameter if c is not None else np.nan
                         for c in self.certificates])

    def speeds(self):
        dx = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        dt = np.diff(self.times)
        return dx / dt

    def write_csv(self, path, comments=()):
        n = self.points.shape[1]
        cols = ["s"] + [f"x{i + 1}" for i in range(n)]
        cols += ["step_size", "certificate_diameter"]
        lines = [f"# {c}" for c in comments]
        lines.append(",".join(cols))
        diams = self.certificate_diameters
        for k in range(len(self.times)):
            row = [repr(float(self.times[k]))]
            row += [repr(float(v)) for v in self.points[k]]
            row.append(repr(float(self.step_sizes[k])))
            row.append(repr(float(diams[k])) if np.isfinite(diams[k]) else "nan")
            lines.append(",".join(row))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def trace_singular_curve(field, model, t0: float, x, T_total: float,
                         block: float = 1.0, ladder: int = 4,
                         certify: bool = True, singular_tol: float = 1e-2,
                         require_singular: bool = True) -> SingularCurve:
    """Concatenate propagation steps until the curve covers [t0, T_total].

    On the i-th annulus the step size is recomputed from constants probed
    on the cone of horizon t0 + i*block (never larger than the previous
    annulus's) and repeated floor((budget)/t_i) times per the schedule; the
    ball-radius localization |x(s) - x| <= lambda_2 * (s - t0) is checked
    for every recorded point.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    flag, cert0 = is_singular(field, model, t0, x, singular_tol)
    if require_singular and not flag:
        raise InvalidProblem(
            f"start point {x} has reachable diameter {cert0.diameter:.3g} "
            f"<= {singular_tol:g}; pass require_singular=False to override")

    times = [t0]
    points = [x.copy()]
    steps = [0.0]
    certs = [cert0]
    schedule = []
    loc_ok = True

    grid = field.u0 if field.kind == "evolutionary" else field.v
    h_grid = float(np.max(grid.spacing))
    t_cur = t0
    x_cur = x.copy()
    t_prev_annulus = np.inf
    i = 0
    spent = 0.0
    while t_cur < T_total - 1e-12 and i < 64:
        i += 1
        T_i = t0 + i * block
        budget = (T_i - t0) - spent
        if budget <= 0:
            continue
        lam2_i = field.lambda2(T_i)

        def record(step):
            nonlocal t_cur, x_cur, spent, loc_ok
            for j in range(len(step.times)):
                times.append(float(step.times[j]))
                points.append(step.points[j].copy())
                steps.append(step.t_step)
                certs.append(step.certificates[j])
                drift = float(np.linalg.norm(step.points[j] - x))
                if drift > lam2_i * (step.times[j] - t0) + h_grid + 1e-9:
                    loc_ok = False
            t_cur = float(step.times[-1])
            x_cur = step.points[-1].copy()
            spent = t_cur - t0

        # first step of the annulus also fixes its step size t_i
        step = propagation_step(field, model, t_cur, x_cur, T_i,
                                step_cap=min(block, t_prev_annulus),
                                ladder=ladder, certify=certify,
                                singular_tol=singular_tol)
        t_i = min(step.t_step, t_prev_annulus)
        t_prev_annulus = t_i
        k_i = max(int(math.floor(budget / t_i)), 1)
        schedule.append((i, t_i, k_i))
        record(step)
        for _ in range(k_i - 1):
            if t_cur >= T_total - 1e-12:
                break
            step = propagation_step(field, model, t_cur, x_cur, T_i,
                                    constants=step.constants, step_cap=t_i,
                                    ladder=ladder, certify=certify,
                                    singular_tol=singular_tol)
            record(step)
        if t_cur >= T_total - 1e-12:
            break
    if t_cur < T_total - 1e-6:
        raise ScheduleStall(
            f"trace stalled at t = {t_cur:.4g} before T_total = {T_total:.4g}")
    return SingularCurve(times=np.array(times), points=np.array(points),
                         step_sizes=np.array(steps), schedule=schedule,
                         certificates=certs, origin=x.copy(), t0=t0,
                         localization_ok=loc_ok)


def lipschitz_certificate(curve: SingularCurve, constants: ConvexityConstants,
                          K_T: float, margin: float = 0.1) -> dict:
    """Check every difference quotient of the curve against the C-bound.

    The bound combines the constants of the action kernel with the uniform
    time-derivative modulus K_T of the field.
    """
    c1, c2, c3 = constants.c1, constants.c2, constants.c3
    c4 = c3 / c2 + (K_T + math.sqrt(c1 + K_T)) / (2.0 * c1)
    quotients = curve.speeds()
    max_q = float(np.max(quotients)) if quotients.size else 0.0
    return {
        "c4": float(c4),
        "max_quotient": max_q,
        "passed": bool(max_q <= c4 * (1.0 + margin)),
        "margin": margin,
        "K_T": K_T,
    }


# ---------------------------------------------------------------------------
# calibrated flow, cut time, Aubry candidates

def _interp_gradient(v: GridFunction, x):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    g = np.zeros(v.dimension)
    for ax in range(v.dimension):
        e = np.zeros(v.dimension)
        e[ax] = v.spacing[ax]
        g[ax] = (float(v(x + e)) - float(v(x - e))) / (2 * v.spacing[ax])
    return g


def _calibrated_flow(problem: DiscountedProblem, v: GridFunction, x, p0,
                     horizon: float, calib_tol: float, direction: int = +1,
                     bound: float = 1e6):
    """Integrate the discounted characteristic and watch the calibration defect.

    The defect of the calibration identity on [0, t] is monitored in its
    discounted normalization,

        v(gamma(t)) - e^{-lam t} v(x) - int_0^t e^{lam (s-t)} L ds,

    which keeps grid interpolation error from being amplified by
    e^{lam t}; the raw identity detects the same break points but can
    never hold to horizon on sampled data.  Returns (tau, sol) where tau
    is the first defect violation time (clamped at horizon) and sol the
    dense solution; direction=-1 runs the backward test, where the raw
    form is already stable and is used as is.
    """
    lam = problem.lam
    H = problem.hamiltonian
    L = problem.lagrangian
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n = x.size
    v_at_x = float(v(x))

    def rhs(t, y):
        xx, pp = y[:n], y[n:2 * n]
        hp = np.atleast_1d(np.asarray(H.H_p(0.0, xx, pp), dtype=float))
        hx = np.atleast_1d(np.asarray(H.H_x(0.0, xx, pp), dtype=float))
        lrun = math.exp(lam * t) * float(L.L(0.0, xx, hp))
        return np.concatenate([hp, -hx - lam * pp, [lrun]])

    def defect(t, y):
        raw = math.exp(lam * t) * float(v(y[:n])) - v_at_x - y[2 * n]
        return raw * math.exp(-lam * max(t, 0.0))

    def break_event(t, y):
        return calib_tol * (1.0 + abs(t)) - abs(defect(t, y))

    break_event.terminal = True
    break_event.direction = -1

    def escape(t, y):
        return bound - float(np.max(np.abs(y[:2 * n])))

    escape.terminal = True
    escape.direction = -1

    y0 = np.concatenate([x, np.atleast_1d(p0), [0.0]])
    t_end = direction * horizon
    sol = solve_ivp(rhs, (0.0, t_end), y0, method="RK45", rtol=1e-9, atol=1e-11,
                    events=[break_event, escape], dense_output=True,
                    max_step=min(abs(horizon) / 20, 0.25))
    if sol.t_events[1].size:
        raise BlowUp(f"characteristic escaped at t = {sol.t_events[1][0]:.4g}")
    if sol.t_events[0].size:
        return abs(float(sol.t_events[0][0])), sol
    return abs(horizon), sol


def cut_time(problem: DiscountedProblem, v: GridFunction, x, horizon: float,
             calib_tol: float = 1e-3, singular_tol: float = 1e-2):
    """Forward calibration span tau(x); horizon stands in for +infinity.

    Returns (tau, info) with info containing the clamped flag and the flow
    solution when one was run.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    field = DiscountedField(problem, v)
    cert = reachable_gradients(field, problem.lagrangian, 0.0, x)
    if cert.diameter > singular_tol:
        return 0.0, {"clamped": False, "cut": True, "certificate": cert}
    p0 = _interp_gradient(v, x)
    tau, sol = _calibrated_flow(problem, v, x, p0, horizon, calib_tol, +1)
    return tau, {"clamped": tau >= horizon, "cut": False, "flow": sol,
                 "certificate": cert}


@dataclass
class CutTimeField:
    """Sampled cut times with the continuous majorant used by the retraction."""

    tau: GridFunction
    alpha: GridFunction
    horizon: float
    calib_tol: float

    def __post_init__(self):
        if not np.all(self.alpha.values > self.tau.values):
            raise ValueError("majorant must exceed tau everywhere")
        if np.any(self.tau.values < 0):
            raise ValueError("cut times must be nonnegative")

    def write(self, tau_path, alpha_path, comments=()):
        self.tau.write(tau_path, comments=comments)
        with open(tau_path, "a") as fh:
            fh.write(f"clamped {repr(float(self.horizon))}\n")
        self.alpha.write(alpha_path, comments=comments)


def _mollified_majorant(tau_values: np.ndarray, bump: float = 0.1) -> np.ndarray:
    """Per-axis 3-node max then 3-node average, plus a constant bump."""
    padded = tau_values
    for ax in range(tau_values.ndim):
        up = np.roll(padded, -1, axis=ax)
        dn = np.roll(padded, 1, axis=ax)
        # edge rolls wrap; for the majorant that only ever raises values
        padded = np.maximum(np.maximum(up, dn), padded)
    out = padded.copy()
    for ax in range(tau_values.ndim):
        up = np.roll(padded, -1, axis=ax)
        dn = np.roll(padded, 1, axis=ax)
        out = (up + dn + padded) / 3.0
        padded = out
    return np.maximum(out, tau_values) + bump


def cut_times(problem: DiscountedProblem, v: GridFunction, nodes,
              horizon: float, calib_tol: float = 1e-3,
              singular_tol: float = 1e-2, jobs: int = 1) -> np.ndarray:
    """Cut times at the queried points, optionally across worker processes."""
    pts = np.atleast_2d(np.asarray(nodes, dtype=float))
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            taus = list(pool.map(_CutTimeWorker(problem, v, horizon, calib_tol,
                                                singular_tol, pts),
                                 range(len(pts))))
    else:
        taus = [cut_time(problem, v, pts[i], horizon, calib_tol,
                         singular_tol)[0] for i in range(len(pts))]
    return np.asarray(taus)


def cut_time_field(problem: DiscountedProblem, v: GridFunction, horizon: float,
                   calib_tol: float = 1e-3, singular_tol: float = 1e-2,
                   jobs: int = 1) -> CutTimeField:
    """Cut times on the whole grid plus the mollified strict majorant."""
    taus = cut_times(problem, v, v.nodes(), horizon, calib_tol, singular_tol,
                     jobs=jobs)
    tau_vals = taus.reshape(v.resolution)
    alpha_vals = _mollified_majorant(tau_vals)
    tau_grid = GridFunction(v.box, tau_vals, v.periodic)
    alpha_grid = GridFunction(v.box, alpha_vals, v.periodic)
    return CutTimeField(tau=tau_grid, alpha=alpha_grid, horizon=horizon,
                        calib_tol=calib_tol)


class _CutTimeWorker:
    """Picklable per-node cut-time evaluator for process pools."""

    def __init__(self, problem, v, horizon, calib_tol, singular_tol, pts):
        self.args = (problem, v, horizon, calib_tol, singular_tol)
        self.pts = pts

    def __call__(self, i):
        problem, v, horizon, calib_tol, singular_tol = self.args
        tau, _ = cut_time(problem, v, self.pts[i], horizon, calib_tol,
                          singular_tol)
        return tau


def aubry_candidates(field, horizon: float, calib_tol: float = 1e-3,
                     singular_tol: float = 1e-2, nodes=None, forward_tau=None):
    """Grid nodes that stay calibrated to the horizon in both time directions.

    Only defined for discounted fields; evolutionary fields raise
    :class:`InvalidProblem`.  ``forward_tau`` (per queried node) skips the
    forward flow when a cut-time field has already been computed.  Returns
    (points, mask-over-queried-nodes).
    """
    if getattr(field, "kind", None) != "discounted":
        raise InvalidProblem("the Aubry set is defined for discounted problems only")
    problem, v = field.problem, field.v
    pts = v.nodes() if nodes is None else np.atleast_2d(nodes)
    if forward_tau is not None:
        forward_tau = np.asarray(forward_tau, dtype=float).reshape(-1)
        if forward_tau.shape[0] != len(pts):
            raise ValueError("forward_tau must align with the queried nodes")
    mask = np.zeros(len(pts), dtype=bool)
    for i, x in enumerate(pts):
        if forward_tau is not None:
            if forward_tau[i] < horizon:
                continue
        else:
            cert = reachable_gradients(field, problem.lagrangian, 0.0, x)
            if cert.diameter > singular_tol:
                continue
            p0 = _interp_gradient(v, x)
            tau_f, _ = _calibrated_flow(problem, v, x, p0, horizon, calib_tol, +1)
            if tau_f < horizon:
                continue
        p0 = _interp_gradient(v, x)
        tau_b, _ = _calibrated_flow(problem, v, x, p0, horizon, calib_tol, -1)
        mask[i] = tau_b >= horizon
    return pts[mask], mask


# ---------------------------------------------------------------------------
# homotopy / retraction

def homotopy(field, model, x, s: float, calib_tol: float = 1e-3,
             singular_tol: float = 1e-2, trace_block: float = 1.0):
    """F(x, s): calibrated flow while it lasts, singular continuation after.

    For s = 0 this is x exactly; once the flow's calibration defect breaks
    (at the cut time), the point continues along the traced singular curve.
    Only defined for discounted fields.
    """
    if getattr(field, "kind", None) != "discounted":
        raise InvalidProblem("the retraction homotopy runs on discounted fields")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if s <= 0.0:
        return x.copy()
    problem, v = field.problem, field.v
    cert = reachable_gradients(field, problem.lagrangian, 0.0, x)
    if cert.diameter > singular_tol:
        tau_hit, y_hit = 0.0, x
    else:
        p0 = _interp_gradient(v, x)
        tau_hit, sol = _calibrated_flow(problem, v, x, p0, s, calib_tol, +1)
        n = x.size
        if tau_hit >= s:
            return np.atleast_1d(sol.sol(s)[:n]).copy()
        y_hit = np.atleast_1d(sol.sol(tau_hit)[:n]).copy()
    t_start = 1.0 + tau_hit
    span = s - tau_hit
    if span <= 1e-6:
        return y_hit
    # cap the annulus block by the span so the ladder reaches exactly s
    curve = trace_singular_curve(field, problem.lagrangian, t_start, y_hit,
                                 t_start + span, block=min(trace_block, span),
                                 certify=False, singular_tol=singular_tol,
                                 require_singular=False)
    idx = int(np.searchsorted(curve.times, t_start + span + 1e-12, side="right") - 1)
    return curve.points[max(idx, 1 if len(curve.times) > 1 else 0)].copy()


def retraction(field, model, cut_field: CutTimeField, x, s: float, **kwargs):
    """G(x, s) = F(x, s * alpha(x)) with the continuous majorant alpha."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if s <= 0.0:
        return x.copy()
    alpha = float(cut_field.alpha(x))
    return homotopy(field, model, x, s * alpha, **kwargs)


# ---------------------------------------------------------------------------
# strong critical points

def gradient_limits(v: GridFunction, x, merge_tol: float = 1e-4) -> ReachableGradientSet:
    """Reachable gradients of a grid field as limits of one-sided slopes.

    This source works on arbitrary sampled fields (no backward
    representation needed): along each axis the two one-sided interpolant
    slopes at x are limiting gradients; in one dimension that recovers the
    kink slopes exactly.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    sides = []
    for ax in range(v.dimension):
        e = np.zeros(v.dimension)
        e[ax] = v.spacing[ax]
        minus = (float(v(x)) - float(v(x - e))) / v.spacing[ax]
        plus = (float(v(x + e)) - float(v(x))) / v.spacing[ax]
        sides.append((minus, plus))
    elems = []
    for corner in range(1 << v.dimension):
        p = np.array([sides[ax][(corner >> ax) & 1] for ax in range(v.dimension)])
        if all(np.linalg.norm(p - q) > merge_tol for q in elems):
            elems.append(p)
    momenta = np.array(elems)
    diam = 0.0
    if len(momenta) > 1:
        diam = float(max(np.linalg.norm(a - b)
                         for i, a in enumerate(momenta) for b in momenta[i + 1:]))
    return ReachableGradientSet(point=x.copy(), time=None, elements=elems,
                                diameter=diam, source="limit-of-gradients")


def strong_critical_test(problem: DiscountedProblem, v: GridFunction, x,
                         samples: int = 33, tol: float = 1e-9):
    """Whether the drift set lam*v(x) + H_p(x, D+v(x)) contains zero.

    One-dimensional form: the superdifferential is the hull of the
    limiting gradients and the test is an interval membership.  In higher
    dimension the scalar lam*v(x) cannot be added to the vector field; the
    test then checks 0 against the hull of H_p over the momentum hull and
    reports the scalar separately.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    cert = gradient_limits(v, x)
    momenta = cert.momenta()
    if momenta.shape[0] == 0:
        raise NoMinimizer("empty gradient set")
    lam_v = problem.lam * float(v(x))
    H_p = problem.hamiltonian.H_p
    if v.dimension == 1:
        lo, hi = float(momenta.min()), float(momenta.max())
        vals = [lam_v + float(np.atleast_1d(H_p(0.0, x, np.array([p])))[0])
                for p in np.linspace(lo, hi, samples)]
        return min(vals) <= tol and max(vals) >= -tol
    # interpretation-dependent beyond 1D: test the drift hull componentwise
    weights = np.random.default_rng(0).dirichlet(np.ones(len(momenta)), size=samples)
    drifts = np.array([np.atleast_1d(H_p(0.0, x, w @ momenta)) for w in weights])
    inside = np.all(drifts.min(axis=0) <= tol) and np.all(drifts.max(axis=0) >= -tol)
    logger.info("strong-critical test in dimension %d: drift hull test %s, "
                "lam*v = %.3g reported separately", v.dimension, inside, lam_v)
    return bool(inside)
