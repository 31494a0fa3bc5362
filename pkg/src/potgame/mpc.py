"""Receding-horizon (MPC) execution of the potential-game planner."""

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from potgame.constraints import CylinderCollision, RodEquality, SpeedLimit
from potgame.dynamics import JointDynamics
from potgame.exceptions import DivergenceError
from potgame.game import GameSpec, QuadraticCost
from potgame.potential import PotentialOCP
from potgame.solver import MultiplierState, SolverOptions, solve

logger = logging.getLogger(__name__)

WARM_START_MODES = ("shift", "zero")


@dataclass
class MPCConfig:
    """Receding-horizon settings.

    ``scripted`` maps an agent index to a control script of shape
    ``(steps, m_i)``; scripted agents replay it (holding the last row past
    its end) instead of being optimized.
    """

    total_steps: int
    horizon: float = 0.5
    step_size: float = 0.1
    warm_start: str = "shift"
    replan_every: int = 1
    scripted: dict = field(default_factory=dict)
    solver: SolverOptions = field(default_factory=SolverOptions)
    stop_on_failure: bool = True

    def __post_init__(self):
        if self.warm_start not in WARM_START_MODES:
            raise ValueError(f"warm_start must be one of {WARM_START_MODES}, got {self.warm_start!r}")
        if not (np.isfinite(self.step_size) and self.step_size > 0):
            raise ValueError(f"step_size must be positive, got {self.step_size!r}")
        ratio = self.horizon / self.step_size
        if round(ratio) < 1 or abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise ValueError(
                f"horizon {self.horizon} is not a positive integer multiple of step_size {self.step_size}"
            )
        if int(self.total_steps) != self.total_steps or self.total_steps < 1:
            raise ValueError(f"total_steps must be a positive integer, got {self.total_steps!r}")
        if int(self.replan_every) != self.replan_every or self.replan_every < 1:
            raise ValueError(f"replan_every must be a positive integer, got {self.replan_every!r}")
        if self.replan_every > self.steps_per_horizon:
            raise ValueError("replan_every cannot exceed the planning horizon")
        self.total_steps = int(self.total_steps)
        self.replan_every = int(self.replan_every)
        self.scripted = {int(k): np.atleast_2d(np.asarray(v, dtype=float)) for k, v in self.scripted.items()}

    @property
    def steps_per_horizon(self):
        return int(round(self.horizon / self.step_size))

    def to_dict(self):
        return {
            "total_steps": self.total_steps,
            "horizon": self.horizon,
            "step_size": self.step_size,
            "warm_start": self.warm_start,
            "replan_every": self.replan_every,
            "scripted": {str(k): v.tolist() for k, v in sorted(self.scripted.items())},
            "solver": self.solver.to_dict(),
            "stop_on_failure": self.stop_on_failure,
        }


@dataclass
class ReplanRecord:
    step: int
    state: np.ndarray
    applied: np.ndarray
    converged: bool
    status: str
    outer_iterations: int
    inner_iterations: int
    max_violation: float
    objective: float
    solve_time_ms: float
    planned_first_control: np.ndarray

    def to_dict(self):
        return {
            "step": self.step,
            "state": self.state.tolist(),
            "applied": self.applied.tolist(),
            "converged": self.converged,
            "status": self.status,
            "outer_iterations": self.outer_iterations,
            "inner_iterations": self.inner_iterations,
            "max_violation": self.max_violation,
            "objective": self.objective,
            "solve_time_ms": self.solve_time_ms,
        }


@dataclass
class ClosedLoopLog:
    """Everything that happened in one receding-horizon run."""

    states: np.ndarray
    controls: np.ndarray
    records: list
    failure: dict = None
    min_pair_distance: float = float("inf")
    rod_length_error: np.ndarray = None
    goal_error: np.ndarray = None
    realized_violation: np.ndarray = None
    max_speed: dict = field(default_factory=dict)
    min_cylinder_clearance: float = float("inf")

    @property
    def failed(self):
        return self.failure is not None

    @property
    def steps(self):
        return self.controls.shape[0]

    def to_dict(self):
        return {
            "states": self.states.tolist(),
            "controls": self.controls.tolist(),
            "records": [r.to_dict() for r in self.records],
            "failure": self.failure,
            "summary": {
                "steps": self.steps,
                "min_pair_distance": _finite_or_none(self.min_pair_distance),
                "max_rod_length_error": _max_or_none(self.rod_length_error),
                "rod_length_error": None if self.rod_length_error is None else self.rod_length_error.tolist(),
                "goal_error": None if self.goal_error is None else self.goal_error.tolist(),
                "max_realized_violation": _max_or_none(self.realized_violation),
                "max_speed": {str(k): v for k, v in sorted(self.max_speed.items())},
                "min_cylinder_clearance": _finite_or_none(self.min_cylinder_clearance),
            },
        }


def _finite_or_none(v):
    return float(v) if np.isfinite(v) else None


def _max_or_none(a):
    return None if a is None or a.size == 0 else float(np.max(a))


def _script_window(script, start, length):
    idx = np.minimum(np.arange(start, start + length), script.shape[0] - 1)
    return script[idx]


def _shift(a, n):
    """Drop the first ``n`` rows and repeat the last row ``n`` times."""
    return np.concatenate([a[n:], np.repeat(a[-1:], n, axis=0)], axis=0)


def _summaries(spec, X, U):
    dyn = spec.dynamics
    out = {}
    best = np.inf
    for i, j in itertools.combinations(range(spec.num_agents), 2):
        pi, pj = dyn.models[i].position_indices, dyn.models[j].position_indices
        d = min(len(pi), len(pj))
        if d == 0:
            continue
        a = X[:, dyn.state_slices[i].start + np.array(pi[:d])]
        b = X[:, dyn.state_slices[j].start + np.array(pj[:d])]
        best = min(best, float(np.linalg.norm(a - b, axis=1).min()))
    out["min_pair_distance"] = best

    rods = [c for c in spec.constraints if isinstance(c, RodEquality)]
    if rods:
        out["rod_length_error"] = np.max(np.abs(np.hstack([c.evaluate(X) for c in rods])), axis=1)
    cyl = [c for c in spec.constraints if isinstance(c, CylinderCollision)]
    if cyl:
        out["min_cylinder_clearance"] = float(-np.max(np.hstack([c.evaluate(X) for c in cyl])))

    speeds = {}
    if U.shape[0]:
        for c in spec.constraints:
            if isinstance(c, SpeedLimit):
                a = c.agents[0]
                v = float(np.linalg.norm(U[:, c.index], axis=1).max())
                speeds[a] = max(speeds.get(a, 0.0), v)
    out["max_speed"] = speeds

    goal = np.full(spec.num_agents, np.nan)
    for i, cost in enumerate(spec.costs):
        if isinstance(cost, QuadraticCost):
            pos = np.array(dyn.models[i].position_indices, dtype=int)
            if pos.size:
                goal[i] = float(np.linalg.norm(X[-1, dyn.state_slices[i]][pos] - cost.goal[pos]))
    out["goal_error"] = goal

    cs = spec.constraints
    if U.shape[0] and cs.num_stage_rows:
        g = cs.stage_values(X[:-1], U, np.arange(U.shape[0]))
        out["realized_violation"] = cs.violation(g, cs.stage_is_eq).max(axis=1)
    else:
        out["realized_violation"] = np.zeros(U.shape[0])
    return out


def run_mpc(spec, config):
    """Plan, apply the first ``replan_every`` controls, advance, repeat.

    Each replan solves the potential OCP from the current realized state
    over ``horizon / step_size`` steps. In ``shift`` mode the previous plan
    is shifted forward and its last control repeated as the warm start
    (constraint multipliers and penalties are shifted the same way); in ``zero`` mode
    every solve starts from zero controls and zero multipliers. A replan that
    diverges or fails to converge ends the run with a failure record
    (unless ``stop_on_failure`` is False, in which case non-converged plans
    are still applied).
    """
    if not isinstance(config, MPCConfig):
        raise TypeError("config must be an MPCConfig")
    T = config.steps_per_horizon
    dyn = spec.dynamics
    if abs(dyn.step_size - config.step_size) > 1e-12:
        dyn = JointDynamics(dyn.models, config.step_size)
        spec = GameSpec(dyn, spec.costs, spec.constraints, spec.horizon, spec.x0, spec.names)
    N = spec.num_agents
    for a, script in config.scripted.items():
        if not 0 <= a < N:
            raise ValueError(f"scripted agent {a} out of range")
        if script.shape[1] != dyn.control_dims[a]:
            raise ValueError(f"script for agent {a} has {script.shape[1]} columns, expected {dyn.control_dims[a]}")
    free = [i for i in range(N) if i not in config.scripted]
    if not free:
        raise ValueError("at least one agent must be optimized")

    x = np.array(spec.x0, dtype=float)
    states = [x.copy()]
    applied = []
    records = []
    failure = None
    plan = np.zeros((T, spec.m))
    plan_mult = None
    k = 0
    while k < config.total_steps:
        window = spec.with_initial_state(x, T)
        frozen = np.zeros((T, spec.m))
        for a, script in config.scripted.items():
            frozen[:, dyn.control_slices[a]] = _script_window(script, k, T)
        ocp = PotentialOCP(window) if not config.scripted else PotentialOCP(window, free, frozen)
        init = plan if config.warm_start == "shift" else np.zeros((T, spec.m))
        init_mult = plan_mult if config.warm_start == "shift" else None
        try:
            res = solve(ocp, config.solver, init=ocp.local_controls(init), init_multipliers=init_mult)
        except DivergenceError as exc:
            failure = {"step": k, "replan": len(records), "status": "diverged", "message": str(exc)}
            logger.warning("replan at step %d diverged: %s", k, exc)
            break
        U_plan = ocp.full_controls(res.controls)
        n_apply = min(config.replan_every, config.total_steps - k)
        if not res.converged:
            failure = {
                "step": k,
                "replan": len(records),
                "status": res.status,
                "max_violation": res.max_violation,
                "message": f"replan did not converge ({res.status}), max violation {res.max_violation:.3e}",
            }
            logger.warning("replan at step %d failed: %s", k, failure["message"])
            if config.stop_on_failure:
                records.append(_record(k, x, U_plan[0], res))
                break
            failure = None
        records.append(_record(k, x, U_plan[0], res))
        for j in range(n_apply):
            u = U_plan[j]
            x = dyn.step(x, u, k + j)
            applied.append(u.copy())
            states.append(x.copy())
        k += n_apply
        if config.warm_start == "shift":
            plan = _shift(U_plan, n_apply)
            m = res.multipliers
            plan_mult = MultiplierState(
                _shift(m.stage, n_apply), _shift(m.stage_penalty, n_apply), m.terminal.copy(), m.terminal_penalty.copy()
            )

    X = np.array(states)
    U = np.array(applied).reshape(len(applied), spec.m)
    summ = _summaries(spec, X, U)
    return ClosedLoopLog(
        states=X,
        controls=U,
        records=records,
        failure=failure,
        min_pair_distance=summ["min_pair_distance"],
        rod_length_error=summ.get("rod_length_error"),
        goal_error=summ["goal_error"],
        realized_violation=summ["realized_violation"],
        max_speed=summ["max_speed"],
        min_cylinder_clearance=summ.get("min_cylinder_clearance", float("inf")),
    )


def _record(k, x, u0, res):
    return ReplanRecord(
        step=k,
        state=np.array(x),
        applied=np.array(u0),
        converged=bool(res.converged),
        status=res.status,
        outer_iterations=int(res.outer_iterations),
        inner_iterations=int(res.inner_iterations),
        max_violation=float(res.max_violation),
        objective=float(res.objective),
        solve_time_ms=float(res.solve_time_ms),
        planned_first_control=np.array(u0),
    )
