"""Built-in model catalog and expression-defined models.

Keys
----
``free_particle``
    kinetic energy alone, any dimension.
``pendulum``
    L = v^2/2 + cos x, H = p^2/2 - cos x (1D).
``sine_kink``
    L = v^2/2 + f(x) with f = cos(x)^2/2 - |sin x| (1D).  The potential has
    kinks at multiples of pi; pass ``eps > 0`` to smooth |.| into
    sqrt(.^2+eps^2)-eps.
``double_well``
    L = v^2/2 + (x^2-1)^2/4 (1D).  The upper growth bound is only valid on
    a bounded box (|x| <= 2 by default), which is all the grid solvers use.

User models come in as expression strings: either a full Lagrangian in
``(s, x, v)`` or a mechanical potential ``V(x)`` meaning L = |v|^2/2 - V.
Expression partials are central finite differences with step 1e-6.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .expressions import scalar_field
from .model import (
    DiscountedProblem,
    GrowthData,
    HamiltonianModel,
    LagrangianModel,
    hamiltonian_from_lagrangian,
    quadratic_growth,
)

FD_STEP = 1e-6


def _eye_like(x, dimension):
    shape = np.asarray(x).shape[:-1] + (dimension, dimension)
    out = np.zeros(shape)
    out[...] = np.eye(dimension)
    return out


def free_particle(dimension: int = 1) -> LagrangianModel:
    """L = |v|^2/2 with H = |p|^2/2."""
    n = dimension

    model = LagrangianModel(
        dimension=n,
        L=lambda s, x, v: 0.5 * np.sum(np.asarray(v, dtype=float) ** 2, axis=-1),
        L_v=lambda s, x, v: np.asarray(v, dtype=float).copy(),
        L_x=lambda s, x, v: np.zeros_like(np.asarray(x, dtype=float)),
        L_t=lambda s, x, v: np.zeros(np.asarray(v, dtype=float).shape[:-1]),
        L_vv=lambda s, x, v: _eye_like(v, n),
        growth=quadratic_growth(),
        name=f"free_particle_{n}d",
    )
    model.hamiltonian = HamiltonianModel(
        dimension=n,
        H=lambda s, x, p: 0.5 * np.sum(np.asarray(p, dtype=float) ** 2, axis=-1),
        H_p=lambda s, x, p: np.asarray(p, dtype=float).copy(),
        H_x=lambda s, x, p: np.zeros_like(np.asarray(x, dtype=float)),
        H_t=lambda s, x, p: np.zeros(np.asarray(p, dtype=float).shape[:-1]),
        name=model.name,
    )
    return model


def mechanical(f, f_grad, name: str, f_min: float, f_max: float) -> LagrangianModel:
    """1D model L = v^2/2 + f(x), H = p^2/2 - f(x); f bounded in [f_min, f_max]."""

    def L(s, x, v):
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        return 0.5 * v[..., 0] ** 2 + f(x[..., 0])

    def L_x(s, x, v):
        x = np.asarray(x, dtype=float)
        return f_grad(x[..., 0])[..., None]

    growth = GrowthData(
        c_T=max(0.0, -f_min),
        theta_lower=lambda r: 0.5 * r * r,
        theta_upper=lambda r: 0.5 * r * r + max(0.0, f_max),
        theta_lower_conjugate=lambda s: 0.5 * s * s,
    )
    model = LagrangianModel(
        dimension=1,
        L=L,
        L_v=lambda s, x, v: np.asarray(v, dtype=float).copy(),
        L_x=L_x,
        L_t=lambda s, x, v: np.zeros(np.asarray(v, dtype=float).shape[:-1]),
        L_vv=lambda s, x, v: _eye_like(v, 1),
        growth=growth,
        name=name,
    )
    model.hamiltonian = HamiltonianModel(
        dimension=1,
        H=lambda s, x, p: 0.5 * np.asarray(p, dtype=float)[..., 0] ** 2
        - f(np.asarray(x, dtype=float)[..., 0]),
        H_p=lambda s, x, p: np.asarray(p, dtype=float).copy(),
        H_x=lambda s, x, p: -f_grad(np.asarray(x, dtype=float)[..., 0])[..., None],
        H_t=lambda s, x, p: np.zeros(np.asarray(p, dtype=float).shape[:-1]),
        name=name,
    )
    return model


def pendulum() -> LagrangianModel:
    """L = v^2/2 + cos x (1D), so H = p^2/2 - cos x."""
    return mechanical(np.cos, lambda x: -np.sin(x), "pendulum", f_min=-1.0, f_max=1.0)


def sine_kink(eps: float = 0.0) -> LagrangianModel:
    """L = v^2/2 + cos(x)^2/2 - |sin x| (1D), optionally smoothed near the kinks."""
    if eps < 0:
        raise ValueError("eps must be >= 0")

    if eps == 0.0:
        def smooth_abs(u):
            return np.abs(u)

        def smooth_abs_d(u):
            return np.sign(u)
    else:
        def smooth_abs(u):
            return np.sqrt(u * u + eps * eps) - eps

        def smooth_abs_d(u):
            return u / np.sqrt(u * u + eps * eps)

    def f(x):
        return 0.5 * np.cos(x) ** 2 - smooth_abs(np.sin(x))

    def f_grad(x):
        return -np.cos(x) * np.sin(x) - smooth_abs_d(np.sin(x)) * np.cos(x)

    name = "sine_kink" if eps == 0.0 else f"sine_kink(eps={eps:g})"
    return mechanical(f, f_grad, name, f_min=-1.0, f_max=0.5)


def double_well(box_halfwidth: float = 2.0) -> LagrangianModel:
    """L = v^2/2 + (x^2-1)^2/4 (1D); upper growth bound valid on |x| <= box_halfwidth."""
    cap = (box_halfwidth ** 2 - 1.0) ** 2 / 4.0

    def f(x):
        return (x * x - 1.0) ** 2 / 4.0

    def f_grad(x):
        return x * (x * x - 1.0)

    return mechanical(f, f_grad, "double_well", f_min=0.0, f_max=cap)


def lagrangian_from_expression(expr: str, dimension: int = 1,
                               growth: GrowthData | None = None,
                               name: str = "", time_dependent: bool = False) -> LagrangianModel:
    """Model whose L is an expression of (s, x, v); partials by central differences."""
    L = scalar_field(expr, dimension)
    h = FD_STEP

    def L_v(s, x, v):
        v = np.asarray(v, dtype=float)
        cols = []
        for i in range(dimension):
            dv = np.zeros_like(v)
            dv[..., i] = h
            cols.append((L(s, x, v + dv) - L(s, x, v - dv)) / (2 * h))
        return np.stack(cols, axis=-1)

    def L_x(s, x, v):
        x = np.asarray(x, dtype=float)
        cols = []
        for i in range(dimension):
            dx = np.zeros_like(x)
            dx[..., i] = h
            cols.append((L(s, x + dx, v) - L(s, x - dx, v)) / (2 * h))
        return np.stack(cols, axis=-1)

    def L_t(s, x, v):
        s = np.asarray(s, dtype=float)
        return (L(s + h, x, v) - L(s - h, x, v)) / (2 * h)

    def L_vv(s, x, v):
        v = np.asarray(v, dtype=float)
        # second differences with a wider step so the quotient stays stable
        hh = 1e-4
        out = np.zeros(v.shape[:-1] + (dimension, dimension))
        base = L(s, x, v)
        for i in range(dimension):
            ei = np.zeros_like(v)
            ei[..., i] = hh
            out[..., i, i] = (L(s, x, v + ei) + L(s, x, v - ei) - 2 * base) / hh ** 2
            for j in range(i + 1, dimension):
                ej = np.zeros_like(v)
                ej[..., j] = hh
                cross = (L(s, x, v + ei + ej) - L(s, x, v + ei - ej)
                         - L(s, x, v - ei + ej) + L(s, x, v - ei - ej)) / (4 * hh ** 2)
                out[..., i, j] = cross
                out[..., j, i] = cross
        return out

    model = LagrangianModel(
        dimension=dimension,
        L=L, L_v=L_v, L_x=L_x, L_t=L_t, L_vv=L_vv,
        growth=growth if growth is not None else quadratic_growth(),
        time_dependent=time_dependent,
        name=name or f"expr({expr})",
    )
    model.hamiltonian = hamiltonian_from_lagrangian(model)
    return model


def lagrangian_from_potential(expr: str, name: str = "",
                              sample_box=(-10.0, 10.0)) -> LagrangianModel:
    """Mechanical model L = v^2/2 - V(x) from a 1D potential expression.

    The growth offsets come from sampling V over ``sample_box``; pass custom
    GrowthData through :func:`lagrangian_from_expression` when sampling is
    not good enough.
    """
    V = scalar_field(expr, 1)
    h = FD_STEP

    def f(x):
        return -V(0.0, np.asarray(x, dtype=float)[..., None], np.zeros_like(x)[..., None])

    def f_grad(x):
        x = np.asarray(x, dtype=float)
        return (f(x + h) - f(x - h)) / (2 * h)

    probe = np.linspace(sample_box[0], sample_box[1], 4097)
    fvals = f(probe)
    return mechanical(f, f_grad, name or f"potential({expr})",
                      f_min=float(fvals.min()), f_max=float(fvals.max()))


_LAGRANGIANS = {
    "free_particle": free_particle,
    "pendulum": pendulum,
    "sine_kink": sine_kink,
    "double_well": double_well,
}


def lagrangian_by_key(key: str, dimension: int = 1, **kwargs) -> LagrangianModel:
    if key not in _LAGRANGIANS:
        raise ConfigError(f"unknown model key {key!r}; known: {sorted(_LAGRANGIANS)}")
    if key == "free_particle":
        return free_particle(dimension=dimension, **kwargs)
    if dimension != 1:
        raise ConfigError(f"model {key!r} is one-dimensional")
    return _LAGRANGIANS[key](**kwargs)


# growth constants (c1, c2) paired with theta12(r) = r^2/2 for each key
_DISCOUNT_CONSTANTS = {
    "free_particle": (0.0, 0.0),
    "pendulum": (1.0, 1.0),
    "sine_kink": (1.0, 0.5),
    "double_well": (0.0, 2.25),
}


def discounted_problem(key: str, lam: float, dimension: int = 1,
                       **kwargs) -> DiscountedProblem:
    """Discounted problem for a catalog key, with its growth constants."""
    model = lagrangian_by_key(key, dimension=dimension, **kwargs)
    c1, c2 = _DISCOUNT_CONSTANTS[key]
    return DiscountedProblem(
        lam=lam,
        lagrangian=model,
        hamiltonian=model.hamiltonian,
        c1=c1,
        c2=c2,
        theta1=lambda r: 0.5 * r * r,
        theta2=lambda r: 0.5 * r * r,
        name=key,
    )


def discounted_from_model(model: LagrangianModel, lam: float, c1: float, c2: float,
                          name: str = "") -> DiscountedProblem:
    """Wrap a time-independent model as a discounted problem with given offsets."""
    return DiscountedProblem(
        lam=lam,
        lagrangian=model,
        hamiltonian=model.hamiltonian or hamiltonian_from_lagrangian(model),
        c1=c1,
        c2=c2,
        theta1=lambda r: 0.5 * r * r,
        theta2=lambda r: 0.5 * r * r,
        name=name or model.name,
    )
