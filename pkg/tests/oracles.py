"""Independent reference computations used by the tests.

Everything here stays away from the library's own search / optimization
paths: brute-force lattice minimization, closed forms, and plain
quadrature only.
"""

import numpy as np
from scipy.integrate import quad


def free_action(s, t, x, y):
    """Straight-line action of the kinetic-only model."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    return float(np.sum((y - x) ** 2) / (2.0 * (t - s)))


def hopf_lax_brute(u0_fn, t, x, z_lo, z_hi, n=200001):
    """min_z u0(z) + |x-z|^2/(2t) by dense scan."""
    z = np.linspace(z_lo, z_hi, n)
    vals = u0_fn(z) + (x - z) ** 2 / (2.0 * t)
    k = int(np.argmin(vals))
    return float(vals[k]), float(z[k])


def discrete_least_action(L_of_x_v, s, t, x, y, n_nodes=513, time_weight=None):
    """Least action with midpoint quadrature, minimized by scipy L-BFGS.

    Deliberately independent of the package's custom Newton path.
    """
    from scipy.optimize import minimize as scipy_minimize

    x = float(np.atleast_1d(x)[0])
    y = float(np.atleast_1d(y)[0])
    tau = np.linspace(s, t, n_nodes)
    dt = tau[1] - tau[0]
    w = np.full(n_nodes - 1, dt) if time_weight is None else time_weight(tau)

    def act_and_grad(interior):
        path = np.concatenate([[x], interior, [y]])
        mid = 0.5 * (path[1:] + path[:-1])
        vel = (path[1:] - path[:-1]) / dt
        h = 1e-7
        lx = (L_of_x_v(mid + h, vel) - L_of_x_v(mid - h, vel)) / (2 * h)
        lv = (L_of_x_v(mid, vel + h) - L_of_x_v(mid, vel - h)) / (2 * h)
        grad = np.zeros(n_nodes)
        grad[1:] += w * (0.5 * lx + lv / dt)
        grad[:-1] += w * (0.5 * lx - lv / dt)
        return float(np.sum(w * L_of_x_v(mid, vel))), grad[1:-1]

    start = np.linspace(x, y, n_nodes)[1:-1]
    res = scipy_minimize(act_and_grad, start, jac=True, method="L-BFGS-B",
                         options={"maxiter": 4000, "ftol": 1e-14, "gtol": 1e-10})
    path = np.concatenate([[x], res.x, [y]])
    return float(res.fun), path


def sine_kink_cut_time(x):
    """Quadrature of dx / cos x from 0 to x: travel time of the characteristic."""
    val, _ = quad(lambda u: 1.0 / np.cos(u), 0.0, x)
    return val


def shock_speed(p_left, p_right):
    """Rankine-Hugoniot speed for the quadratic Hamiltonian."""
    return 0.5 * (p_left + p_right)
