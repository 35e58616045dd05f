"""Minimal-action computations: flows, fundamental solutions, regularity probes.

The least-action value between endpoints is computed by a direct method
(midpoint discretization of the curve, damped Newton on the stacked
interior nodes) and then refined, either by Richardson extrapolation in
the segment count or by shooting on the Hamiltonian two-point boundary
problem.  The direct method is batched: many endpoint pairs sharing one
time interval are solved simultaneously as independent tridiagonal
systems, which is what makes grid-wide inf-convolutions affordable.

Time quadrature uses exact per-segment weights when the Lagrangian is an
exponential-in-time rescaling of an autonomous one, so constant curves
integrate exactly under discounting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import solve_ivp

from .errors import BlowUp, DegenerateSample, NoConvergence
from .model import HamiltonianModel, LagrangianModel, hamiltonian_from_lagrangian

_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


# ---------------------------------------------------------------------------
# trajectories

@dataclass
class Trajectory:
    """A discretized extremal curve with dual arc and energy."""

    times: np.ndarray              # (N+1,)
    states: np.ndarray             # (N+1, n)
    velocities: np.ndarray         # (N+1, n)
    duals: np.ndarray              # (N+1, n), p = L_v(t, state, velocity)
    action: float
    energies: np.ndarray           # (N+1,), E = <p, v> - L
    grad_residual: float = 0.0     # sup-norm of the discrete stationarity residual
    source: str = "direct"         # "direct" | "flow"
    multiple_minimizers: bool = False
    diagnostics: dict = field(default_factory=dict)

    @property
    def start(self):
        return self.states[0]

    @property
    def end(self):
        return self.states[-1]


def _node_velocities(states, dt):
    """Second-order velocity estimates at the nodes of a uniform-step path."""
    v = np.empty_like(states)
    v[1:-1] = (states[2:] - states[:-2]) / (2.0 * dt)
    v[0] = (-3.0 * states[0] + 4.0 * states[1] - states[2]) / (2.0 * dt)
    v[-1] = (3.0 * states[-1] - 4.0 * states[-2] + states[-3]) / (2.0 * dt)
    return v


def _trajectory_from_nodes(model: LagrangianModel, times, states, action,
                           grad_residual) -> Trajectory:
    dt = times[1] - times[0]
    if len(times) >= 3:
        vel = _node_velocities(states, dt)
    else:
        vel = np.broadcast_to((states[-1] - states[0]) / (times[-1] - times[0]),
                              states.shape).copy()
    duals = np.asarray(model.L_v(times, states, vel), dtype=float)
    lvals = np.asarray(model.L(times, states, vel), dtype=float)
    energies = np.sum(duals * vel, axis=-1) - lvals
    return Trajectory(times=np.asarray(times, dtype=float), states=states,
                      velocities=vel, duals=duals, action=float(action),
                      energies=energies, grad_residual=float(grad_residual))


# ---------------------------------------------------------------------------
# quadrature

def _quadrature(model: LagrangianModel, times):
    """Per-segment weights and the evaluation callables for the discrete action.

    Returns (weights, mid_times, L, L_v, L_x, L_vv_diag); for exponential
    rescalings of autonomous models the weights integrate the time factor
    exactly and the callables are the autonomous ones.
    """
    times = np.asarray(times, dtype=float)
    if model.exp_rate is not None and model.base is not None:
        lam = model.exp_rate
        weights = (np.exp(lam * times[1:]) - np.exp(lam * times[:-1])) / lam
        base = model.base
        mid = 0.5 * (times[1:] + times[:-1])
        return weights, mid, base.L, base.L_v, base.L_x, base.L_vv
    dt = np.diff(times)
    mid = 0.5 * (times[1:] + times[:-1])
    return dt, mid, model.L, model.L_v, model.L_x, model.L_vv


def _solve_tridiagonal(lower, diag, upper, rhs):
    """Thomas algorithm vectorized over the batch axis.

    Shapes: lower/upper (P, M-1), diag/rhs (P, M).  Overwrites nothing.
    """
    P, M = diag.shape
    cp = np.empty((P, M - 1)) if M > 1 else np.empty((P, 0))
    dp = np.empty((P, M))
    inv = 1.0 / diag[:, 0]
    if M > 1:
        cp[:, 0] = upper[:, 0] * inv
    dp[:, 0] = rhs[:, 0] * inv
    for k in range(1, M):
        denom = diag[:, k] - lower[:, k - 1] * cp[:, k - 1]
        inv = 1.0 / denom
        if k < M - 1:
            cp[:, k] = upper[:, k] * inv
        dp[:, k] = (rhs[:, k] - lower[:, k - 1] * dp[:, k - 1]) * inv
    out = np.empty((P, M))
    out[:, -1] = dp[:, -1]
    for k in range(M - 2, -1, -1):
        out[:, k] = dp[:, k] - cp[:, k] * out[:, k + 1]
    return out


def straight_line_actions(model: LagrangianModel, s: float, t: float,
                          starts, ends, segments: int = 8):
    """Discrete action of the straight segment between endpoint batches.

    Upper-bound flavored estimate used to rank candidates before the
    optimizing pass; exact for kinetic-only models.
    """
    starts = np.asarray(starts, dtype=float)
    ends = np.asarray(ends, dtype=float)
    times = np.linspace(s, t, segments + 1)
    w, mid, L, _, _, _ = _quadrature(model, times)
    frac = ((mid - s) / (t - s))[:, None]
    # (P, N, n) points along each straight segment
    pts = starts[:, None, :] + frac[None, :, :] * (ends - starts)[:, None, :]
    vel = ((ends - starts) / (t - s))[:, None, :]
    vel = np.broadcast_to(vel, pts.shape)
    lvals = L(mid[None, :], pts, vel)
    return lvals @ w


def minimize_paths(model: LagrangianModel, s: float, t: float, starts, ends,
                   segments: int = 16, grad_tol: float = 1e-9,
                   max_iter: int = 60, init_nodes=None):
    """Batched direct method for least action between endpoint pairs.

    All pairs share the interval [s, t].  Returns a dict with stacked node
    arrays, actions, stationarity residuals and a convergence mask.  The
    quasi-Newton step uses the exact kinetic block of the Hessian
    (tridiagonal per axis), which is the full Hessian for mechanical
    models.
    """
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    ends = np.atleast_2d(np.asarray(ends, dtype=float))
    if ends.shape[0] == 1 and starts.shape[0] > 1:
        ends = np.broadcast_to(ends, starts.shape).copy()
    if starts.shape[0] == 1 and ends.shape[0] > 1:
        starts = np.broadcast_to(starts, ends.shape).copy()
    P, n = starts.shape
    N = int(segments)
    times = np.linspace(s, t, N + 1)
    dt = (t - s) / N
    w, mid, L, L_v, L_x, L_vv = _quadrature(model, times)

    if init_nodes is not None:
        W = np.array(init_nodes, dtype=float)
    else:
        frac = np.linspace(0.0, 1.0, N + 1)[None, :, None]
        W = starts[:, None, :] * (1 - frac) + ends[:, None, :] * frac
    W[:, 0] = starts
    W[:, -1] = ends

    def action_of(nodes):
        m = 0.5 * (nodes[:, 1:] + nodes[:, :-1])
        vel = (nodes[:, 1:] - nodes[:, :-1]) / dt
        return L(mid[None, :], m, vel) @ w

    act = action_of(W)
    if N == 1:
        return {"nodes": W, "action": act, "grad_inf": np.zeros(P),
                "converged": np.ones(P, dtype=bool), "times": times}

    def gradient(nodes):
        m = 0.5 * (nodes[:, 1:] + nodes[:, :-1])
        vel = (nodes[:, 1:] - nodes[:, :-1]) / dt
        smid = mid[None, :]
        lx = np.asarray(L_x(smid, m, vel), dtype=float)
        lv = np.asarray(L_v(smid, m, vel), dtype=float)
        lvv = np.asarray(L_vv(smid, m, vel), dtype=float)
        wc = w[None, :, None]
        g = (wc[:, :-1] * (0.5 * lx[:, :-1] + lv[:, :-1] / dt)
             + wc[:, 1:] * (0.5 * lx[:, 1:] - lv[:, 1:] / dt))
        return g, lvv

    frozen = np.zeros(P, dtype=bool)   # stalled at a numerical stationary point
    grad_inf = np.full(P, np.inf)
    for _ in range(max_iter):
        g, lvv = gradient(W)
        grad_inf = np.max(np.abs(g), axis=(1, 2))
        scale = 1.0 + np.abs(act)
        active = (grad_inf > grad_tol * scale) & ~frozen
        if not active.any():
            break
        # kinetic tridiagonal blocks, one per axis
        step = np.zeros_like(g)
        for ax in range(n):
            a = w[None, :] * lvv[:, :, ax, ax] / dt ** 2     # (P, N)
            diag = a[:, :-1] + a[:, 1:]
            off = -a[:, 1:-1]
            step[:, :, ax] = -_solve_tridiagonal(off, diag, off, g[:, :, ax])
        # backtracking line search, re-evaluating only the paths still rejected
        pending = np.where(active)[0]
        alpha = np.ones(P)
        for _ in range(12):
            trial = W[pending].copy()
            trial[:, 1:-1] += alpha[pending, None, None] * step[pending]
            act_trial = action_of(trial)
            better = act_trial <= act[pending] - 1e-14 * scale[pending]
            idx_ok = pending[better]
            W[idx_ok, 1:-1] += alpha[idx_ok, None, None] * step[idx_ok]
            act[idx_ok] = act_trial[better]
            pending = pending[~better]
            if pending.size == 0:
                break
            alpha[pending] *= 0.5
        frozen[pending] = True

    act = action_of(W)
    g, _ = gradient(W)
    grad_inf = np.max(np.abs(g), axis=(1, 2))
    return {"nodes": W, "action": act, "grad_inf": grad_inf,
            "converged": grad_inf <= 100 * grad_tol * (1.0 + np.abs(act)),
            "times": times}


def _refine_nodes(W):
    """Insert midpoints: warm start for a doubled segment count."""
    P, M, n = W.shape
    out = np.empty((P, 2 * M - 1, n))
    out[:, ::2] = W
    out[:, 1::2] = 0.5 * (W[:, 1:] + W[:, :-1])
    return out


def refined_action(model: LagrangianModel, s: float, t: float, starts, ends,
                   segments: int = 16):
    """Richardson-extrapolated least action for endpoint batches.

    Solves at ``segments`` and ``2*segments`` and removes the leading
    quadratic discretization error.
    """
    first = minimize_paths(model, s, t, starts, ends, segments=segments)
    second = minimize_paths(model, s, t, starts, ends, segments=2 * segments,
                            init_nodes=_refine_nodes(first["nodes"]))
    value = second["action"] + (second["action"] - first["action"]) / 3.0
    return value, second


# ---------------------------------------------------------------------------
# Hamiltonian flow

def hamiltonian_flow(model: HamiltonianModel, s: float, x, p0, t: float,
                     nodes: int = 129, rtol: float = 1e-11, atol: float = 1e-12,
                     bound: float = 1e6) -> Trajectory:
    """Integrate dx = H_p, dp = -H_x from (x, p0) on [s, t].

    The running action integral rides along as an extra state, using
    L = <p, H_p> - H on the flow.  Raises :class:`BlowUp` when the state
    leaves the configured bound before ``t``.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    p0 = np.atleast_1d(np.asarray(p0, dtype=float))
    n = x.size

    def rhs(tau, y):
        xx, pp = y[:n], y[n:2 * n]
        hp = np.atleast_1d(np.asarray(model.H_p(tau, xx, pp), dtype=float))
        hx = np.atleast_1d(np.asarray(model.H_x(tau, xx, pp), dtype=float))
        lrun = float(pp @ hp - model.H(tau, xx, pp))
        return np.concatenate([hp, -hx, [lrun]])

    def escape(tau, y):
        return bound - max(np.max(np.abs(y[:n])), np.max(np.abs(y[n:2 * n])))

    escape.terminal = True
    escape.direction = -1

    y0 = np.concatenate([x, p0, [0.0]])
    t_eval = np.linspace(s, t, nodes)
    sol = solve_ivp(rhs, (s, t), y0, method="DOP853", t_eval=t_eval,
                    rtol=rtol, atol=atol, events=escape, dense_output=True)
    if sol.status == 1:
        raise BlowUp(f"flow left |state| <= {bound:g} at t = {sol.t_events[0][0]:.6g}")
    if not sol.success:
        raise NoConvergence(f"flow integration failed: {sol.message}")

    states = sol.y[:n].T.copy()
    duals = sol.y[n:2 * n].T.copy()
    actions = sol.y[2 * n]
    vel = np.empty_like(states)
    energies = np.empty(len(sol.t))
    for k, tau in enumerate(sol.t):
        vel[k] = np.atleast_1d(np.asarray(model.H_p(tau, states[k], duals[k]), dtype=float))
        energies[k] = float(model.H(tau, states[k], duals[k]))
    traj = Trajectory(times=sol.t.copy(), states=states, velocities=vel,
                      duals=duals, action=float(actions[-1]), energies=energies,
                      source="flow")
    traj.diagnostics["dense"] = sol.sol
    return traj


# ---------------------------------------------------------------------------
# fundamental solution

def _hamiltonian_for(model: LagrangianModel) -> HamiltonianModel:
    if model.hamiltonian is not None:
        return model.hamiltonian
    model.hamiltonian = hamiltonian_from_lagrangian(model)
    return model.hamiltonian


def _shoot(model: LagrangianModel, s, t, x, y, p0, max_iter: int = 12):
    """Newton on p0 -> flow endpoint; returns a flow Trajectory or None."""
    hmodel = _hamiltonian_for(model)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    n = x.size
    target_tol = 1e-9 * (1.0 + float(np.linalg.norm(y)))

    def endpoint(p):
        traj = hamiltonian_flow(hmodel, s, x, p, t, nodes=2, rtol=1e-11, atol=1e-12)
        return traj.end

    p = np.atleast_1d(np.asarray(p0, dtype=float)).copy()
    try:
        res = endpoint(p) - y
    except (BlowUp, NoConvergence):
        return None
    for _ in range(max_iter):
        nrm = float(np.linalg.norm(res))
        if nrm <= target_tol:
            traj = hamiltonian_flow(hmodel, s, x, p, t, nodes=max(65, 2 * n + 1))
            return traj
        jac = np.empty((n, n))
        h = 1e-7 * (1.0 + np.abs(p))
        try:
            for j in range(n):
                dp = np.zeros(n)
                dp[j] = h[j]
                jac[:, j] = (endpoint(p + dp) - endpoint(p - dp)) / (2 * h[j])
            step = np.linalg.solve(jac, -res)
        except (BlowUp, NoConvergence, np.linalg.LinAlgError):
            return None
        alpha = 1.0
        for _ in range(10):
            try:
                trial_res = endpoint(p + alpha * step) - y
            except (BlowUp, NoConvergence):
                alpha *= 0.5
                continue
            if np.linalg.norm(trial_res) < nrm:
                p = p + alpha * step
                res = trial_res
                break
            alpha *= 0.5
        else:
            return None
    return None


def fundamental_solution(model: LagrangianModel, s: float, t: float, x, y,
                         segments: int = 64, value_tol: float = 1e-8,
                         refine: bool = True, restarts: int = 0, seed: int = 0):
    """Least action between (s, x) and (t, y) with its minimizing trajectory.

    Direct method with segment doubling until the action settles below
    ``value_tol``, then (``refine=True``) a shooting pass on the Hamiltonian
    system; if shooting diverges the extrapolated direct answer stands.
    ``restarts > 0`` reruns the direct method from perturbed initial curves
    and flags ``multiple_minimizers`` when distinct local optima appear.
    """
    if not t > s:
        raise ValueError("need t > s")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))

    N = int(segments)
    sol = minimize_paths(model, s, t, x[None, :], y[None, :], segments=N)
    coarse = float(sol["action"][0])
    for _ in range(5):
        N *= 2
        sol = minimize_paths(model, s, t, x[None, :], y[None, :], segments=N,
                             init_nodes=_refine_nodes(sol["nodes"]))
        cur = float(sol["action"][0])
        if abs(cur - coarse) < value_tol:
            break
        coarse = cur
    fine = float(sol["action"][0])
    value = fine + (fine - coarse) / 3.0
    times = sol["times"]
    traj = _trajectory_from_nodes(model, times, sol["nodes"][0], value,
                                  sol["grad_inf"][0])

    multiple = False
    if restarts > 0:
        rng = np.random.default_rng(seed)
        span = float(np.linalg.norm(y - x)) + (t - s)
        best_alt = None
        for _ in range(restarts):
            wiggle = rng.normal(scale=0.25 * span, size=(1, len(times) // 2 + 1, x.size))
            frac = np.linspace(0, 1, len(times) // 2 + 1)[None, :, None]
            bump = wiggle * np.sin(np.pi * frac)
            init = x[None, None, :] * (1 - frac) + y[None, None, :] * frac + bump
            alt = minimize_paths(model, s, t, x[None, :], y[None, :],
                                 segments=len(times) // 2,
                                 init_nodes=init)
            a = float(alt["action"][0])
            if a < value - 1e-6:
                best_alt = alt
                multiple = True
            elif abs(a - value) > 1e-6 and alt["converged"][0]:
                multiple = True
        if best_alt is not None:
            ref = minimize_paths(model, s, t, x[None, :], y[None, :],
                                 segments=2 * (len(best_alt["times"]) - 1),
                                 init_nodes=_refine_nodes(best_alt["nodes"]))
            value = float(ref["action"][0])
            traj = _trajectory_from_nodes(model, ref["times"], ref["nodes"][0],
                                          value, ref["grad_inf"][0])

    if refine:
        dt = times[1] - times[0]
        v0 = (-3.0 * traj.states[0] + 4.0 * traj.states[1] - traj.states[2]) / (2 * dt)
        p0 = np.atleast_1d(np.asarray(model.L_v(s, x, v0), dtype=float))
        flow = _shoot(model, s, t, x, y, p0)
        if flow is not None and flow.action <= value + 1e-6 * (1 + abs(value)):
            flow.multiple_minimizers = multiple
            return flow.action, flow
    traj.multiple_minimizers = multiple
    return value, traj


def action_gradients(minimizer: Trajectory):
    """(D_x A, D_y A, D_t A) read off the minimizer's dual arc and energy."""
    dxa = -minimizer.duals[0]
    dya = minimizer.duals[-1]
    dta = -float(minimizer.energies[-1])
    return dxa, dya, dta


# ---------------------------------------------------------------------------
# regularity constants

@dataclass
class ConvexityConstants:
    """Sampled second-difference bounds of the action on a space-time cone."""

    c0: float                      # upper bound: semiconcavity in (t, y)
    c1: float                      # lower bound: semiconvexity in (t, y)
    c2: float                      # spatial uniform-convexity modulus
    c3: float                      # time modulus of the endpoint gradient
    apex_time: float
    apex: np.ndarray
    slope: float
    height: float

    def __post_init__(self):
        if not (self.c2 <= self.c0 + 1e-12):
            raise ValueError("spatial convexity modulus exceeded the concavity bound")


def estimate_constants(model: LagrangianModel, s: float, x, T: float, R: float,
                       lam_slope: float, levels: int = 3,
                       directions: int = 2, segments: int = 16) -> ConvexityConstants:
    """Probe second differences of A on the cone of apex (s, x) and slope lam_slope.

    ``c0`` is the largest (t, y)-second-difference ratio, ``c1`` the largest
    negative one (floored at 1e-8), ``c2`` the smallest spatial ratio, and
    ``c3`` the largest time increment of the endpoint gradient, all scaled
    by (t - s) as in the cone estimates they feed.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n = x.size
    height = T - s
    if height <= 0 or lam_slope <= 0:
        raise ValueError("degenerate cone")

    dirs = [np.eye(n)[k] for k in range(min(n, directions))]
    if n > 1 and directions > n:
        dirs.append(np.ones(n) / math.sqrt(n))

    ratios_c0, ratios_c1, ratios_c2, ratios_c3 = [], [], [], []
    seen_signal = False
    for frac in np.linspace(0.45, 0.95, levels):
        t = s + frac * height
        dt_cone = t - s
        h = 0.2 * dt_cone
        radius = lam_slope * dt_cone

        def A_batch(ends, t_at):
            val, _ = refined_action(model, s, t_at, np.broadcast_to(x, ends.shape),
                                    ends, segments=segments)
            return val

        for d in dirs:
            for rho in (0.15, 0.45):
                y = x + rho * radius * d
                z = 0.25 * radius * d
                ends = np.stack([y + z, y - z, y, y + z, y - z])
                base = A_batch(ends[:3], t)
                plus = A_batch(ends[3:4], t + h)[0]
                minus = A_batch(ends[4:5], t - h)[0]
                a_pz, a_mz, a_c = base
                zz = float(z @ z)
                spatial = (a_pz + a_mz - 2 * a_c) * dt_cone / zz
                mixed = (plus + minus - 2 * a_c) * dt_cone / (h * h + zz)
                pure_plus = A_batch(ends[2:3], t + h)[0]
                pure_minus = A_batch(ends[2:3], t - h)[0]
                temporal = (pure_plus + pure_minus - 2 * a_c) * dt_cone / (h * h)
                if max(abs(spatial), abs(mixed), abs(temporal)) > 1e-12:
                    seen_signal = True
                ratios_c2.append(spatial)
                for r in (spatial, mixed, temporal):
                    ratios_c0.append(r)
                    ratios_c1.append(-r)
                # endpoint-gradient increment in time
                _, tr_t = refined_action(model, s, t, x[None, :], y[None, :],
                                         segments=segments)
                _, tr_h = refined_action(model, s, t + h, x[None, :], y[None, :],
                                         segments=segments)
                g_t = _trajectory_from_nodes(model, tr_t["times"], tr_t["nodes"][0],
                                             tr_t["action"][0], 0.0).duals[-1]
                g_h = _trajectory_from_nodes(model, tr_h["times"], tr_h["nodes"][0],
                                             tr_h["action"][0], 0.0).duals[-1]
                ratios_c3.append(float(np.linalg.norm(g_h - g_t)) * dt_cone / h)

    if not seen_signal:
        raise DegenerateSample("all second-difference probes vanished")
    c2 = float(min(ratios_c2))
    c0 = float(max(max(ratios_c0), c2))
    c1 = float(max(max(ratios_c1), 1e-8))
    c3 = float(max(max(ratios_c3), 1e-12))
    return ConvexityConstants(c0=c0, c1=c1, c2=c2, c3=c3, apex_time=s,
                              apex=x.copy(), slope=lam_slope, height=height)


def speed_envelope(model: LagrangianModel, T: float, ratios=None, margin: float = 0.2):
    """Empirical bound kappa(T, |x-y|/(t-s)) on minimizer speeds.

    Measures sup-speeds over an endpoint-separation ladder and returns a
    nondecreasing interpolant inflated by ``margin``.
    """
    if ratios is None:
        ratios = np.array([0.25, 0.5, 1.0, 2.0, 4.0, 8.0])
    ratios = np.asarray(ratios, dtype=float)
    n = model.dimension
    sups = []
    for r in ratios:
        x = np.zeros(n)
        y = np.full(n, r * T / math.sqrt(n))
        sol = minimize_paths(model, 0.0, T, x[None, :], y[None, :], segments=32)
        traj = _trajectory_from_nodes(model, sol["times"], sol["nodes"][0],
                                      sol["action"][0], sol["grad_inf"][0])
        sups.append(float(np.max(np.linalg.norm(traj.velocities, axis=-1))))
    sups = np.maximum.accumulate(np.asarray(sups))
    bound = (1.0 + margin) * sups

    def kappa(ratio):
        return float(np.interp(ratio, ratios, bound,
                               left=bound[0], right=bound[-1] * (1 + ratio / ratios[-1])))

    return kappa
