"""Constrained multi-agent trajectory games solved as a single optimal control problem.

When every agent's cost depends only on its own states and controls, the
game is a constrained dynamic potential game: a generalized Nash
equilibrium is obtained by minimizing the sum of the agents' costs subject
to the joint dynamics and the shared constraints.
"""

from potgame.constraints import (
    AffineConstraint,
    ConstraintSet,
    ControlBound,
    CylinderCollision,
    FunctionConstraint,
    PairwiseCollision,
    RodEquality,
    SpeedLimit,
    build_constraints,
)
from potgame.dynamics import (
    HumanUnicycleModel,
    Integrator6DOFModel,
    IntegratorModel,
    JointDynamics,
    LinearModel,
    UnicycleModel,
    make_model,
)
from potgame.exceptions import (
    DivergenceError,
    GridTooLargeError,
    MissingMultipliersError,
    PotgameError,
    ScenarioError,
    StructureError,
)
from potgame.estimator import PotentialGameSolver
from potgame.game import (
    FunctionCost,
    GameSpec,
    QuadraticCost,
    Trajectory,
    audit_separability,
    max_violation,
    rollout,
    validate_spec,
)
from potgame.mpc import ClosedLoopLog, MPCConfig, run_mpc
from potgame.nash import NashCertificate, best_response_gap, brute_force_nash, certify, kkt_residuals
from potgame.potential import PotentialOCP, assemble, restrict, verify_potential_condition
from potgame.solver import SolveResult, SolverOptions, solve

__version__ = "0.1.0"
