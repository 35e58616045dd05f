"""Hamilton-Jacobi solvers with singularity propagation and retraction.

Modules: ``model`` (problem data, Legendre transform), ``catalog``
(built-in problems), ``action`` (flows and fundamental solutions),
``laxoleinik`` (grids and inf/sup-convolution operators), ``solver``
(discounted and evolutionary solutions), ``singular`` (singularity
machinery), ``cli`` (command line).
"""

__version__ = "0.1.0"

from .action import (
    ConvexityConstants,
    Trajectory,
    action_gradients,
    estimate_constants,
    fundamental_solution,
    hamiltonian_flow,
    speed_envelope,
)
from .errors import (
    BlowUp,
    BoundaryClipped,
    ConcavityFailure,
    ConfigError,
    DegenerateSample,
    ExponentOverflow,
    InvalidProblem,
    NoConvergence,
    NoMinimizer,
    NonUniqueArgmax,
    NotConvex,
    NumericsError,
    ScheduleStall,
)
from .laxoleinik import (
    ArgBall,
    GridFunction,
    discounted_lax_oleinik,
    lax_oleinik_minus,
    lax_oleinik_plus,
    localization_radius,
    set_localization_collector,
    solution_lipschitz_bound,
)
from .model import (
    DiscountedProblem,
    GrowthData,
    HamiltonianModel,
    LagrangianModel,
    TonelliReport,
    check_tonelli,
    convex_conjugate,
    hamiltonian_from_lagrangian,
    legendre,
    to_evolutionary,
)
from .singular import (
    CutTimeField,
    ReachableGradientSet,
    SingularCurve,
    aubry_candidates,
    cut_time,
    cut_time_field,
    cut_times,
    gradient_limits,
    homotopy,
    is_singular,
    lipschitz_certificate,
    propagation_step,
    reachable_gradients,
    retraction,
    strong_critical_test,
    trace_singular_curve,
)
from .solver import (
    DiscountedField,
    EvolutionaryField,
    ResidualReport,
    SolveReport,
    bounds_K,
    residual_check,
    solve_discounted,
    solve_evolutionary,
)

__all__ = [name for name in dir() if not name.startswith("_")]
