"""Game description, trajectories, rollout and structural audits.

Joint vectors use a fixed block layout: agent ``i`` owns
``dynamics.state_slices[i]`` of the state and ``dynamics.control_slices[i]``
of the control.
"""

from dataclasses import dataclass, field

import numpy as np

from potgame._numdiff import fd_gradient, fd_hessian
from potgame.constraints import ConstraintSet
from potgame.dynamics import JointDynamics
from potgame.exceptions import DivergenceError


# ---------------------------------------------------------------------------
# costs

class AgentCost:
    """Running cost ``L(x, u, k)`` and terminal cost ``S(x)`` of one agent.

    By default the callables receive only the agent's own state and control
    blocks. Costs with ``reads_joint = True`` receive the full joint vectors
    instead; such costs break the separable structure and are rejected by
    :func:`potgame.potential.assemble`.
    """

    reads_joint = False

    def running(self, x, u, k):
        raise NotImplementedError

    def terminal(self, x):
        raise NotImplementedError

    def running_batch(self, X, U, ks):
        return np.array([self.running(X[t], U[t], int(ks[t])) for t in range(X.shape[0])])

    def running_expansion(self, X, U, ks):
        """Gradients and Hessians of ``running`` stacked over the time axis."""
        K, nx = X.shape
        nu = U.shape[1]
        lx = np.empty((K, nx))
        lu = np.empty((K, nu))
        lxx = np.empty((K, nx, nx))
        luu = np.empty((K, nu, nu))
        lux = np.empty((K, nu, nx))
        for t in range(K):
            k = int(ks[t])

            def fun(z, k=k):
                return self.running(z[:nx], z[nx:], k)

            z = np.concatenate([X[t], U[t]])
            g = fd_gradient(fun, z)
            H = fd_hessian(fun, z)
            lx[t], lu[t] = g[:nx], g[nx:]
            lxx[t], luu[t], lux[t] = H[:nx, :nx], H[nx:, nx:], H[nx:, :nx]
        return lx, lu, lxx, luu, lux

    def terminal_expansion(self, x):
        return fd_gradient(self.terminal, x), fd_hessian(self.terminal, x)


def _as_weight(w, dim, name):
    w = np.asarray(w, dtype=float)
    if w.ndim <= 1:
        w = np.diag(np.broadcast_to(w, (dim,)))
    if w.shape != (dim, dim):
        raise ValueError(f"{name} must be {dim}x{dim} or a length-{dim} diagonal, got shape {w.shape}")
    return w


class QuadraticCost(AgentCost):
    """Goal-tracking quadratic cost.

    ``L = 1/2 (x - goal)' Q (x - goal) + 1/2 u' C u`` and
    ``S = 1/2 (x - goal)' Q_f (x - goal)``. Weights may be given as full
    matrices or as diagonals.
    """

    def __init__(self, Q, C, Q_f, goal):
        self.goal = np.asarray(goal, dtype=float).ravel()
        n = self.goal.size
        self.Q = _as_weight(Q, n, "Q")
        self.Q_f = _as_weight(Q_f, n, "Q_f")
        C = np.asarray(C, dtype=float)
        m = C.shape[0] if C.ndim else 1
        self.C = _as_weight(C, m, "C")

    @property
    def state_dim(self):
        return self.goal.size

    @property
    def control_dim(self):
        return self.C.shape[0]

    def running(self, x, u, k=0):
        e = np.asarray(x, dtype=float) - self.goal
        u = np.asarray(u, dtype=float)
        return 0.5 * e @ self.Q @ e + 0.5 * u @ self.C @ u

    def terminal(self, x):
        e = np.asarray(x, dtype=float) - self.goal
        return 0.5 * e @ self.Q_f @ e

    def running_batch(self, X, U, ks=None):
        E = X - self.goal
        return 0.5 * np.einsum("ki,ij,kj->k", E, self.Q, E) + 0.5 * np.einsum("ki,ij,kj->k", U, self.C, U)

    def running_expansion(self, X, U, ks=None):
        K = X.shape[0]
        E = X - self.goal
        lx = E @ self.Q.T
        lu = U @ self.C.T
        lxx = np.broadcast_to(self.Q, (K,) + self.Q.shape)
        luu = np.broadcast_to(self.C, (K,) + self.C.shape)
        lux = np.zeros((K, self.C.shape[0], self.Q.shape[0]))
        return lx, lu, lxx, luu, lux

    def terminal_expansion(self, x):
        return self.Q_f @ (np.asarray(x, dtype=float) - self.goal), self.Q_f.copy()

    def __repr__(self):
        return f"QuadraticCost(goal={self.goal.tolist()})"


class FunctionCost(AgentCost):
    """Cost from plain callables; derivatives by finite differences."""

    def __init__(self, running, terminal=None, reads_joint=False):
        self._running = running
        self._terminal = terminal
        self.reads_joint = bool(reads_joint)

    def running(self, x, u, k):
        return float(self._running(x, u, k))

    def terminal(self, x):
        return 0.0 if self._terminal is None else float(self._terminal(x))


# ---------------------------------------------------------------------------
# game specification

@dataclass(frozen=True)
class GameSpec:
    """Complete description of an open-loop trajectory game."""

    dynamics: JointDynamics
    costs: tuple
    constraints: ConstraintSet
    horizon: int
    x0: np.ndarray
    names: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "costs", tuple(self.costs))
        x0 = np.array(self.x0, dtype=float).ravel()
        x0.setflags(write=False)
        object.__setattr__(self, "x0", x0)
        if not self.names:
            object.__setattr__(self, "names", tuple(f"agent{i}" for i in range(self.num_agents)))

    @property
    def num_agents(self):
        return self.dynamics.num_agents

    @property
    def step_size(self):
        return self.dynamics.step_size

    @property
    def n(self):
        return self.dynamics.n

    @property
    def m(self):
        return self.dynamics.m

    def with_initial_state(self, x0, horizon=None):
        return GameSpec(
            self.dynamics, self.costs, self.constraints,
            self.horizon if horizon is None else horizon, x0, self.names,
        )

    def agent_running(self, i, X, U, ks):
        """Agent ``i``'s running cost at each row of the joint ``X``, ``U``."""
        cost = self.costs[i]
        if cost.reads_joint:
            return np.array([cost.running(X[t], U[t], int(ks[t])) for t in range(X.shape[0])])
        sx, su = self.dynamics.state_slices[i], self.dynamics.control_slices[i]
        return cost.running_batch(X[:, sx], U[:, su], ks)

    def agent_terminal(self, i, x):
        cost = self.costs[i]
        if cost.reads_joint:
            return float(cost.terminal(x))
        return float(cost.terminal(x[self.dynamics.state_slices[i]]))

    def agent_costs(self, states, controls):
        """Total cost of every agent along a joint trajectory."""
        ks = np.arange(controls.shape[0])
        return np.array(
            [
                float(np.sum(self.agent_running(i, states[:-1], controls, ks))) + self.agent_terminal(i, states[-1])
                for i in range(self.num_agents)
            ]
        )

    def step_violations(self, states, controls):
        """Per-step max violation, length ``T + 1`` (last entry is terminal)."""
        cs = self.constraints
        T = controls.shape[0]
        out = np.zeros(T + 1)
        if cs.num_stage_rows:
            g = cs.stage_values(states[:-1], controls, np.arange(T))
            out[:-1] = cs.violation(g, cs.stage_is_eq).max(axis=1)
        if cs.num_terminal_rows:
            gT = cs.terminal_values(states[-1], T)
            out[-1] = cs.violation(gT, cs.terminal_is_eq).max()
        return out


@dataclass
class ValidationReport:
    issues: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.issues

    def __len__(self):
        return len(self.issues)

    def __iter__(self):
        return iter(self.issues)


def _is_int(v):
    return isinstance(v, (int, np.integer)) and not isinstance(v, bool)


def validate_spec(spec):
    """Collect every structural problem of ``spec``; an empty report means well-formed."""
    issues = []
    dyn = spec.dynamics
    N = dyn.num_agents
    if N < 1:
        issues.append("num_agents: need at least one agent")
    if not _is_int(spec.horizon) or spec.horizon < 1:
        issues.append(f"horizon: must be a positive integer, got {spec.horizon!r}")
    h = dyn.step_size
    if not (np.isfinite(h) and h > 0):
        issues.append(f"step_size: must be finite and > 0, got {h!r}")
    if len(spec.costs) != N:
        issues.append(f"costs: {len(spec.costs)} costs for {N} agents")
    if spec.x0.size != dyn.n:
        issues.append(f"x0: dimension mismatch, length {spec.x0.size} but sum of state dims is {dyn.n}")
    elif not np.all(np.isfinite(spec.x0)):
        issues.append("x0: non-finite entries")
    for i, cost in enumerate(spec.costs[:N]):
        if cost is None:
            issues.append(f"costs[{i}]: missing cost")
            continue
        if isinstance(cost, QuadraticCost):
            mdl = dyn.models[i]
            if cost.state_dim != mdl.state_dim:
                issues.append(f"costs[{i}]: goal has length {cost.state_dim}, agent state dim is {mdl.state_dim}")
            if cost.control_dim != mdl.control_dim:
                issues.append(f"costs[{i}]: C is {cost.control_dim}x{cost.control_dim}, agent control dim is {mdl.control_dim}")
            for name in ("Q", "C", "Q_f", "goal"):
                val = getattr(cost, name)
                if not np.all(np.isfinite(val)):
                    issues.append(f"costs[{i}].{name}: non-finite entries")
                elif name != "goal":
                    if not np.allclose(val, val.T):
                        issues.append(f"costs[{i}].{name}: not symmetric")
                    elif np.linalg.eigvalsh(val).min() < -1e-12:
                        issues.append(f"costs[{i}].{name}: not positive semidefinite")
    for c_idx, con in enumerate(spec.constraints):
        for a in con.agents:
            if not 0 <= a < N:
                issues.append(f"constraints[{c_idx}]: agent index {a} out of range")
    return ValidationReport(issues)


# ---------------------------------------------------------------------------
# trajectories

def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Trajectory:
    """States ``x_0..x_T``, controls ``u_0..u_{T-1}`` and their evaluation."""

    states: np.ndarray
    controls: np.ndarray
    violation: np.ndarray
    cost_per_agent: np.ndarray
    potential_value: float

    def __post_init__(self):
        for name in ("states", "controls", "violation", "cost_per_agent"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(self, "potential_value", float(self.potential_value))

    @property
    def horizon(self):
        return self.controls.shape[0]

    @property
    def max_violation(self):
        return float(self.violation.max()) if self.violation.size else 0.0


def simulate(dynamics, x0, controls):
    """Roll the joint dynamics forward; raises :class:`DivergenceError` on non-finite states."""
    controls = np.asarray(controls, dtype=float)
    T = controls.shape[0]
    X = np.empty((T + 1, dynamics.n))
    X[0] = x0
    for k in range(T):
        try:
            X[k + 1] = dynamics.step(X[k], controls[k], k)
        except ValueError as exc:
            raise DivergenceError(f"rollout diverged at step {k}: {exc}", step=k) from None
        if not np.all(np.isfinite(X[k + 1])):
            raise DivergenceError(f"rollout diverged at step {k + 1}: non-finite state", step=k + 1)
    return X


def evaluate_trajectory(spec, states, controls):
    states = np.asarray(states, dtype=float)
    controls = np.asarray(controls, dtype=float)
    costs = spec.agent_costs(states, controls)
    return Trajectory(states, controls, spec.step_violations(states, controls), costs, float(np.sum(costs)))


def rollout(spec, x0, controls):
    """Simulate ``controls`` from ``x0`` and evaluate costs and violations."""
    x0 = np.asarray(x0, dtype=float).ravel()
    controls = np.asarray(controls, dtype=float)
    if controls.ndim == 1 and spec.m == 1:
        controls = controls[:, None]
    if x0.size != spec.n:
        raise ValueError(f"x0 has length {x0.size}, expected {spec.n}")
    if controls.shape != (spec.horizon, spec.m):
        raise ValueError(f"controls must have shape {(spec.horizon, spec.m)}, got {controls.shape}")
    return evaluate_trajectory(spec, simulate(spec.dynamics, x0, controls), controls)


def max_violation(spec, traj):
    """Largest ``max(g, 0)`` over all steps and rows, equality rows as paired inequalities."""
    T = spec.horizon
    if traj.states.shape != (T + 1, spec.n) or traj.controls.shape != (T, spec.m):
        raise ValueError("trajectory dimensions do not match the game")
    v = spec.step_violations(traj.states, traj.controls)
    return float(v.max()) if v.size else 0.0


# ---------------------------------------------------------------------------
# separability audit

@dataclass
class SeparabilityReport:
    passed: bool
    max_cross_sensitivity: float
    offending: list = field(default_factory=list)
    tolerance: float = 1e-7


def _central(fun, z, j):
    step = 1e-5 * (1.0 + abs(z[j]))
    zp = z.copy()
    zm = z.copy()
    zp[j] += step
    zm[j] -= step
    return (fun(zp) - fun(zm)) / (2.0 * step)


def audit_separability(spec, samples=20, seed=0, tol=1e-7):
    """Check numerically that each agent's cost ignores every other agent's blocks.

    For ``samples`` random joint points, central differences of ``L^i`` and
    ``S^i`` are taken with respect to every coordinate of every other
    agent. The report lists offending ``(i, j)`` agent pairs.
    """
    rng = np.random.default_rng(seed)
    dyn = spec.dynamics
    N = spec.num_agents
    n = dyn.n
    worst = 0.0
    offending = set()
    for _ in range(samples):
        x = rng.normal(size=n)
        u = rng.normal(size=dyn.m)
        k = int(rng.integers(0, max(spec.horizon, 1)))
        for i in range(N):

            def run(z, i=i, k=k):
                return float(spec.agent_running(i, z[None, :n], z[None, n:], np.array([k]))[0])

            def term(xx, i=i):
                return spec.agent_terminal(i, xx)

            z = np.concatenate([x, u])
            for j in range(N):
                if j == i:
                    continue
                sx, su = dyn.state_slices[j], dyn.control_slices[j]
                cols = list(range(sx.start, sx.stop)) + [n + c for c in range(su.start, su.stop)]
                sens = [abs(_central(run, z, c)) for c in cols]
                sens += [abs(_central(term, x, c)) for c in range(sx.start, sx.stop)]
                s = max(sens) if sens else 0.0
                worst = max(worst, s)
                if s > tol:
                    offending.add((i, j))
    return SeparabilityReport(not offending, worst, sorted(offending), tol)
