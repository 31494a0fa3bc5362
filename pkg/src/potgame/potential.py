"""Reduction of a separable game to one constrained optimal control problem.

With separable costs the potential running cost is ``P = sum_i L^i`` and the
terminal potential ``R = sum_i S^i``; dynamics and constraints pass through
unchanged. :class:`PotentialOCP` can also be restricted to a subset of
agents with the remaining agents' controls frozen, which gives a single
agent's best-response problem or a game with scripted participants.
"""

from dataclasses import dataclass, field

import numpy as np

from potgame._numdiff import fd_gradient, fd_hessian
from potgame.constraints import ConstraintSet
from potgame.dynamics import JointDynamics
from potgame.exceptions import StructureError
from potgame.game import QuadraticCost, audit_separability, simulate


def _row_index(constraints, kept):
    idx = []
    offset = 0
    for c in constraints:
        if id(c) in kept:
            idx.extend(range(offset, offset + c.rows))
        offset += c.rows
    return np.array(idx, dtype=int)


class _EmbeddedConstraints:
    """Constraint rows seen from a subset of agents.

    Free blocks are written into a full joint trajectory whose frozen
    blocks come from a fixed rollout; Jacobian columns are restricted to
    the free blocks.
    """

    def __init__(self, base, ocp, constraints):
        self._cs = ConstraintSet(constraints)
        kept = {id(c) for c in constraints}
        self.stage_rows = _row_index(base.constraints, kept)
        self.terminal_rows = _row_index(base.terminal_constraints, kept)
        self._ocp = ocp
        self.stage_is_eq = self._cs.stage_is_eq
        self.terminal_is_eq = self._cs.terminal_is_eq
        self.constraints = self._cs.constraints
        self.violation = ConstraintSet.violation
        self.paired_inequalities = ConstraintSet.paired_inequalities

    @property
    def num_stage_rows(self):
        return self._cs.num_stage_rows

    @property
    def num_terminal_rows(self):
        return self._cs.num_terminal_rows

    def stage_labels(self):
        return self._cs.stage_labels()

    def terminal_labels(self):
        return self._cs.terminal_labels()

    def stage_values(self, X, U, ks=None):
        Xf, Uf, ks = self._ocp.embed(X, U, ks)
        return self._cs.stage_values(Xf, Uf, ks)

    def stage_jacobians(self, X, U, ks=None):
        Xf, Uf, ks = self._ocp.embed(X, U, ks)
        Gx, Gu = self._cs.stage_jacobians(Xf, Uf, ks)
        return Gx[:, :, self._ocp.state_index], Gu[:, :, self._ocp.control_index]

    @property
    def has_curvature(self):
        return self._cs.has_curvature

    def stage_curvature(self, X, U, ks, weights):
        Xf, Uf, ks = self._ocp.embed(X, U, ks)
        Hxx, Huu, Hux = self._cs.stage_curvature(Xf, Uf, ks, weights)
        si, ci = self._ocp.state_index, self._ocp.control_index
        return Hxx[:, si[:, None], si[None, :]], Huu[:, ci[:, None], ci[None, :]], Hux[:, ci[:, None], si[None, :]]

    def terminal_curvature(self, x, k, weights):
        H = self._cs.terminal_curvature(self._ocp.embed_terminal(x), k, weights)
        si = self._ocp.state_index
        return H[si[:, None], si[None, :]]

    def terminal_values(self, x, k=None):
        return self._cs.terminal_values(self._ocp.embed_terminal(x), k)

    def terminal_jacobian(self, x, k=None):
        return self._cs.terminal_jacobian(self._ocp.embed_terminal(x), k)[:, self._ocp.state_index]


class PotentialOCP:
    """Single optimal control problem ``min R(x_T) + sum_k P(x_k, u_k, k)``.

    Parameters
    ----------
    spec : GameSpec
    agents : sequence of int, optional
        Agents whose controls are decision variables (default: all).
    frozen_controls : array (T, m), optional
        Joint control sequence supplying the controls of agents not in
        ``agents``. Required when ``agents`` is a strict subset.
    """

    def __init__(self, spec, agents=None, frozen_controls=None):
        self.spec = spec
        dyn = spec.dynamics
        N = spec.num_agents
        self.agents = tuple(range(N)) if agents is None else tuple(sorted(int(a) for a in agents))
        self.is_full = self.agents == tuple(range(N))
        self.T = int(spec.horizon)
        self.state_index = np.concatenate(
            [np.arange(dyn.state_slices[i].start, dyn.state_slices[i].stop) for i in self.agents]
        ).astype(int)
        self.control_index = np.concatenate(
            [np.arange(dyn.control_slices[i].start, dyn.control_slices[i].stop) for i in self.agents]
        ).astype(int)

        if self.is_full:
            self.dynamics = dyn
            self.constraints = spec.constraints
            self._base_X = None
            self._base_U = None
            self.stage_rows = np.arange(spec.constraints.num_stage_rows)
            self.terminal_rows = np.arange(spec.constraints.num_terminal_rows)
        else:
            if frozen_controls is None:
                raise ValueError("frozen_controls is required when optimizing over a subset of agents")
            self.dynamics = JointDynamics([dyn.models[i] for i in self.agents], dyn.step_size)
            base_U = np.array(frozen_controls, dtype=float).reshape(self.T, spec.m)
            self._base_U = base_U
            self._base_X = simulate(dyn, spec.x0, base_U)
            free = set(self.agents)
            kept = [c for c in spec.constraints if not c.agents or free.intersection(c.agents)]
            self.constraints = _EmbeddedConstraints(spec.constraints, self, kept)
            self.stage_rows = self.constraints.stage_rows
            self.terminal_rows = self.constraints.terminal_rows

        self.n = int(self.state_index.size)
        self.m = int(self.control_index.size)
        self.x0 = np.array(spec.x0[self.state_index], dtype=float)
        self._local_slices = []
        xo = uo = 0
        for i in self.agents:
            nx, nu = dyn.state_dims[i], dyn.control_dims[i]
            self._local_slices.append((i, slice(xo, xo + nx), slice(uo, uo + nu)))
            xo += nx
            uo += nu
        self._quadratic = all(
            isinstance(spec.costs[i], QuadraticCost) and not spec.costs[i].reads_joint for i in self.agents
        )

    # -- embedding ---------------------------------------------------------

    def embed(self, X, U, ks=None):
        """Full joint ``(X, U)`` from decision-variable blocks at stages ``ks``."""
        K = X.shape[0]
        ks = np.arange(K) if ks is None else np.asarray(ks, dtype=int)
        if self.is_full:
            return X, U, ks
        Xf = self._base_X[ks].copy()
        Uf = self._base_U[np.minimum(ks, self.T - 1)].copy()
        Xf[:, self.state_index] = X
        Uf[:, self.control_index] = U
        return Xf, Uf, ks

    def embed_terminal(self, x):
        if self.is_full:
            return np.asarray(x, dtype=float)
        xf = self._base_X[-1].copy()
        xf[self.state_index] = x
        return xf

    def full_controls(self, U):
        """Joint control sequence with the decision blocks replaced by ``U``."""
        if self.is_full:
            return np.array(U, dtype=float)
        Uf = self._base_U.copy()
        Uf[:, self.control_index] = U
        return Uf

    def local_controls(self, U_full):
        return np.asarray(U_full, dtype=float)[:, self.control_index]

    # -- objective ---------------------------------------------------------

    def running_cost(self, X, U, ks=None):
        """``P`` evaluated at each row; shape ``(K,)``."""
        Xf, Uf, ks = self.embed(X, U, ks)
        total = np.zeros(X.shape[0])
        for i in self.agents:
            total = total + self.spec.agent_running(i, Xf, Uf, ks)
        return total

    def terminal_cost(self, x):
        xf = self.embed_terminal(x)
        return float(sum(self.spec.agent_terminal(i, xf) for i in self.agents))

    def objective(self, X, U):
        return float(np.sum(self.running_cost(X[:-1], U))) + self.terminal_cost(X[-1])

    def rollout(self, U):
        return simulate(self.dynamics, self.x0, U)

    def cost_expansion(self, X, U, ks=None):
        """Stacked ``(lx, lu, lxx, luu, lux)`` of ``P`` along the time axis.

        Closed form when every agent cost is quadratic, otherwise central
        differences with symmetrized Hessians.
        """
        K = X.shape[0]
        ks = np.arange(K) if ks is None else np.asarray(ks, dtype=int)
        n, m = self.n, self.m
        lx = np.zeros((K, n))
        lu = np.zeros((K, m))
        lxx = np.zeros((K, n, n))
        luu = np.zeros((K, m, m))
        lux = np.zeros((K, m, n))
        if self._quadratic:
            for i, sx, su in self._local_slices:
                gx, gu, hxx, huu, hux = self.spec.costs[i].running_expansion(X[:, sx], U[:, su], ks)
                lx[:, sx] = gx
                lu[:, su] = gu
                lxx[:, sx, sx] = hxx
                luu[:, su, su] = huu
                lux[:, su, sx] = hux
            return lx, lu, lxx, luu, lux
        for t in range(K):
            k = int(ks[t])

            def fun(z, t=t, k=k):
                return float(self.running_cost(z[None, :n], z[None, n:], np.array([k]))[0])

            z = np.concatenate([X[t], U[t]])
            g = fd_gradient(fun, z)
            H = fd_hessian(fun, z)
            lx[t], lu[t] = g[:n], g[n:]
            lxx[t], luu[t], lux[t] = H[:n, :n], H[n:, n:], H[n:, :n]
        return lx, lu, lxx, luu, lux

    def terminal_expansion(self, x):
        if self._quadratic:
            gx = np.zeros(self.n)
            gxx = np.zeros((self.n, self.n))
            for i, sx, _ in self._local_slices:
                g, H = self.spec.costs[i].terminal_expansion(x[sx])
                gx[sx] = g
                gxx[sx, sx] = H
            return gx, gxx
        return fd_gradient(self.terminal_cost, x), fd_hessian(self.terminal_cost, x)

    def local_slices(self):
        """``(agent, state_slice, control_slice)`` of each agent inside the decision vectors."""
        return list(self._local_slices)


def assemble(spec, samples=10, seed=0):
    """Build the potential OCP of a separable game.

    Raises :class:`StructureError` naming the offending ``(agent, other)``
    blocks when the separability audit fails.
    """
    report = audit_separability(spec, samples=samples, seed=seed)
    if not report.passed:
        pairs = ", ".join(f"agent {i} depends on agent {j}" for i, j in report.offending)
        raise StructureError(f"costs are not separable: {pairs}", offending=report.offending)
    return PotentialOCP(spec)


def restrict(spec, agents, frozen_controls):
    """OCP over ``agents`` only, all other agents playing ``frozen_controls``."""
    return PotentialOCP(spec, agents=agents, frozen_controls=frozen_controls)


# ---------------------------------------------------------------------------

@dataclass
class ConditionReport:
    passed: bool
    trials: int
    max_residual: float
    failures: list = field(default_factory=list)


def _agent_cost(spec, i, U):
    X = simulate(spec.dynamics, spec.x0, U)
    ks = np.arange(U.shape[0])
    return float(np.sum(spec.agent_running(i, X[:-1], U, ks))) + spec.agent_terminal(i, X[-1])


def verify_potential_condition(spec, ocp, trials=100, seed=0, rtol=1e-9, scale=1.0):
    """Test the potential identity on random unilateral deviations.

    For each trial an agent ``i``, a joint strategy and an alternative
    strategy for ``i`` are drawn; the change in ``J^i`` must equal the
    change in the OCP objective within ``rtol * (1 + |change|)``.
    """
    rng = np.random.default_rng(seed)
    dyn = spec.dynamics
    T = spec.horizon
    worst = 0.0
    failures = []
    for t in range(trials):
        i = int(rng.integers(spec.num_agents))
        gamma = scale * rng.normal(size=(T, spec.m))
        nu = gamma.copy()
        nu[:, dyn.control_slices[i]] = scale * rng.normal(size=(T, dyn.control_dims[i]))
        d_agent = _agent_cost(spec, i, gamma) - _agent_cost(spec, i, nu)
        Xg = simulate(dyn, spec.x0, gamma)
        Xn = simulate(dyn, spec.x0, nu)
        d_pot = ocp.objective(Xg, gamma) - ocp.objective(Xn, nu)
        resid = abs(d_agent - d_pot) / (1.0 + abs(d_pot))
        worst = max(worst, resid)
        if resid > rtol:
            failures.append({"trial": t, "agent": i, "agent_change": d_agent, "potential_change": d_pot})
    return ConditionReport(not failures, trials, worst, failures)
