import numpy as np
import pytest

from hjsing import GridFunction, catalog, solver


@pytest.fixture(scope="session")
def free_particle_1d():
    return catalog.free_particle(1)


@pytest.fixture(scope="session")
def sine_problem():
    return catalog.discounted_problem("sine_kink", lam=1.0)


@pytest.fixture(scope="session")
def counterexample_problem():
    return catalog.discounted_problem("free_particle", lam=1.0)


@pytest.fixture(scope="session")
def sine_exact_grid():
    """The closed-form solution -|sin x| sampled periodically on [-2pi, 2pi)."""
    return GridFunction.from_callable(
        lambda p: -np.abs(np.sin(p[..., 0])),
        [(-2 * np.pi, 2 * np.pi)], 512, periodic=True)


@pytest.fixture(scope="session")
def hopf_kink_field(free_particle_1d):
    """u0 = -|x| on a wide grid with 0 a node; free particle."""
    u0 = GridFunction.from_callable(lambda p: -np.abs(p[..., 0]),
                                    [(-12.0, 12.0)], 1537)
    return solver.EvolutionaryField(free_particle_1d, u0)


@pytest.fixture(scope="session")
def shock_field(free_particle_1d):
    """u0 = min(-x, 2x) on a wide grid with 0 a node; free particle."""
    u0 = GridFunction.from_callable(
        lambda p: np.minimum(-p[..., 0], 2 * p[..., 0]), [(-18.0, 18.0)], 2305)
    return solver.EvolutionaryField(free_particle_1d, u0)
