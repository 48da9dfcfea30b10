"""Mean-field optimal charging control of an electric-vehicle fleet."""

__version__ = "0.1.0"

from .grid import Grid, ModeSet, build_grid, build_modes, discretize_initial  # noqa: E402,F401
from .dynamics import ConstraintSpec, DynamicsOperator, forward_rollout  # noqa: E402,F401
from .costs import CostSpec, PerspectiveParams, total_objective  # noqa: E402,F401
from .solver import CpParams, build_saddle_problem, extract_alpha, slater_certificate, solve  # noqa: E402,F401
from .fleet import DeploymentMesh, fleet_stats, interpolate_control, simulate  # noqa: E402,F401
from .scenarios import Scenario, build_case1, build_case2, load_scenario  # noqa: E402,F401
