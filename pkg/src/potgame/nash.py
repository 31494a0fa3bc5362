"""Generalized Nash equilibrium certificates.

Two independent lines of evidence are produced for a candidate
trajectory: per-agent KKT residuals using the dynamics and constraint
multipliers of the potential problem (shared by all agents), and
best-response gaps obtained by re-optimizing each agent against the
others' frozen controls. :func:`brute_force_nash` enumerates equilibria of
tiny gridded games as a solver-free oracle.
"""

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from potgame.exceptions import DivergenceError, GridTooLargeError, MissingMultipliersError
from potgame.game import QuadraticCost, simulate
from potgame.potential import PotentialOCP, restrict
from potgame.solver import MultiplierState, SolverOptions, solve

logger = logging.getLogger(__name__)


@dataclass
class NashCertificate:
    state_stationarity: np.ndarray
    control_stationarity: np.ndarray
    terminal_stationarity: np.ndarray
    potential_stationarity: float
    primal_feasibility: float
    complementarity: float
    dual_feasibility: float
    multipliers_consistent: bool
    consistency_error: float
    best_response_gaps: np.ndarray = None
    agent_costs: np.ndarray = None
    kkt_tol: float = 1e-3
    gap_tol: float = 1e-3
    feasibility_tol: float = 1e-4

    @property
    def max_stationarity(self):
        return float(
            max(
                np.max(self.state_stationarity, initial=0.0),
                np.max(self.control_stationarity, initial=0.0),
                np.max(self.terminal_stationarity, initial=0.0),
            )
        )

    @property
    def kkt_passed(self):
        return bool(
            self.max_stationarity <= self.kkt_tol
            and self.complementarity <= self.kkt_tol
            and self.dual_feasibility <= self.kkt_tol
            and self.primal_feasibility <= self.feasibility_tol
        )

    def gap_bounds(self):
        return self.gap_tol * (1.0 + np.abs(self.agent_costs))

    @property
    def gaps_passed(self):
        if self.best_response_gaps is None:
            return None
        gaps = np.asarray(self.best_response_gaps, dtype=float)
        bound = self.gap_bounds()
        return bool(np.all(np.isfinite(gaps)) and np.all(np.abs(gaps) <= bound))

    @property
    def passed(self):
        return self.kkt_passed and self.gaps_passed is not False

    def to_dict(self):
        return {
            "state_stationarity": [float(v) for v in self.state_stationarity],
            "control_stationarity": [float(v) for v in self.control_stationarity],
            "terminal_stationarity": [float(v) for v in self.terminal_stationarity],
            "potential_stationarity": float(self.potential_stationarity),
            "max_stationarity": float(self.max_stationarity),
            "primal_feasibility": float(self.primal_feasibility),
            "complementarity": float(self.complementarity),
            "dual_feasibility": float(self.dual_feasibility),
            "multipliers_consistent": bool(self.multipliers_consistent),
            "consistency_error": float(self.consistency_error),
            "best_response_gaps": None if self.best_response_gaps is None
            else [None if not np.isfinite(g) else float(g) for g in self.best_response_gaps],
            "agent_costs": None if self.agent_costs is None else [float(c) for c in self.agent_costs],
            "kkt_tol": self.kkt_tol,
            "gap_tol": self.gap_tol,
            "kkt_passed": self.kkt_passed,
            "gaps_passed": self.gaps_passed,
            "passed": self.passed,
        }


def _scaled(terms):
    """``||sum(terms)||_inf / (1 + max_t ||term_t||_inf)`` per row of the stacked terms."""
    total = sum(terms)
    scale = 1.0 + np.max(np.stack([np.abs(t) for t in terms]), axis=0).max(axis=-1)
    return np.abs(total).max(axis=-1) / scale


def _agent_gradients(spec, i, X, U):
    """Own-block gradients of agent ``i``'s running and terminal costs."""
    dyn = spec.dynamics
    sx, su = dyn.state_slices[i], dyn.control_slices[i]
    T = U.shape[0]
    ks = np.arange(T)
    cost = spec.costs[i]
    if cost.reads_joint:
        ocp_like = _JointAgentCost(spec, i)
        lx, lu = ocp_like.running_gradients(X[:-1], U, ks)
        gT = ocp_like.terminal_gradient(X[-1])
        return lx[:, sx], lu[:, su], gT[sx]
    lx, lu = cost.running_expansion(X[:-1, sx], U[:, su], ks)[:2]
    gT = cost.terminal_expansion(X[-1, sx])[0]
    return np.asarray(lx), np.asarray(lu), np.asarray(gT)


class _JointAgentCost:
    def __init__(self, spec, i):
        self.spec, self.i = spec, i

    def running_gradients(self, X, U, ks):
        from potgame._numdiff import fd_gradient

        n = X.shape[1]
        lx = np.empty_like(X)
        lu = np.empty_like(U)
        for t in range(X.shape[0]):
            z = np.concatenate([X[t], U[t]])
            g = fd_gradient(lambda z_: self.spec.costs[self.i].running(z_[:n], z_[n:], int(ks[t])), z)
            lx[t], lu[t] = g[:n], g[n:]
        return lx, lu

    def terminal_gradient(self, x):
        from potgame._numdiff import fd_gradient

        return fd_gradient(self.spec.costs[self.i].terminal, x)


def kkt_residuals(spec, result, states=None, controls=None, ocp=None, kkt_tol=1e-3, feasibility_tol=1e-4):
    """Per-agent KKT residuals of a candidate using the potential problem's multipliers.

    Agent ``i``'s dynamics multipliers are taken equal to the costates
    ``xi`` of the potential problem (restricted to agent ``i``'s block, the
    only block agent ``i`` controls) and its constraint multipliers equal to
    the shared constraint multipliers. Each stationarity residual is the
    infinity norm of the equation divided by ``1 +`` the largest term.

    ``states``/``controls`` override the candidate trajectory while keeping
    the result's multipliers.
    """
    mult = getattr(result, "multipliers", None)
    if mult is None or mult.costates is None:
        raise MissingMultipliersError("result carries no multipliers; run solve() first")
    ocp = ocp or PotentialOCP(spec)
    dyn = spec.dynamics
    if controls is None:
        controls = result.trajectory.controls
    U = np.asarray(controls, dtype=float)
    X = simulate(dyn, spec.x0, U) if states is None else np.asarray(states, dtype=float)
    T = U.shape[0]
    ks = np.arange(T)
    cs = spec.constraints
    xi = mult.costates
    lam = mult.stage
    lamT = mult.terminal

    A, B = dyn.jacobians(X[:-1], U)
    Gx, Gu = cs.stage_jacobians(X[:-1], U, ks)
    GT = cs.terminal_jacobian(X[-1], T)
    dyn_x = np.einsum("kji,kj->ki", A, xi)  # A_k' xi_k
    dyn_u = np.einsum("kji,kj->ki", B, xi)
    con_x = np.einsum("kri,kr->ki", Gx, lam)
    con_u = np.einsum("kri,kr->ki", Gu, lam)
    con_T = GT.T @ lamT

    N = spec.num_agents
    r_state = np.zeros(N)
    r_ctrl = np.zeros(N)
    r_term = np.zeros(N)
    agent_raw = []
    for i in range(N):
        sx, su = dyn.state_slices[i], dyn.control_slices[i]
        lx, lu, gT = _agent_gradients(spec, i, X, U)
        if T > 1:
            terms = [lx[1:], dyn_x[1:, sx], con_x[1:, sx], -xi[:-1, sx]]
            r_state[i] = float(_scaled(terms).max())
            raw_state = sum(terms)
        else:
            raw_state = np.zeros((0, sx.stop - sx.start))
        terms_u = [lu, dyn_u[:, su], con_u[:, su]]
        r_ctrl[i] = float(_scaled(terms_u).max())
        terms_T = [gT[None], con_T[None, sx], -xi[-1:, sx]]
        r_term[i] = float(_scaled(terms_T).max())
        agent_raw.append((raw_state, sum(terms_u), sum(terms_T)[0]))

    # same equations with the gradient of the potential in place of L^i
    Px, Pu = ocp.cost_expansion(X[:-1], U, ks)[:2]
    Rx = ocp.terminal_expansion(X[-1])[0]
    pot_state = Px[1:] + dyn_x[1:] + con_x[1:] - xi[:-1]
    pot_ctrl = Pu + dyn_u + con_u
    pot_term = Rx + con_T - xi[-1]
    pot_res = 0.0
    if T > 1:
        pot_res = float(_scaled([Px[1:], dyn_x[1:], con_x[1:], -xi[:-1]]).max())
    pot_res = max(pot_res, float(_scaled([Pu, dyn_u, con_u]).max()),
                  float(_scaled([Rx[None], con_T[None], -xi[-1:]]).max()))

    consistency = 0.0
    for i, (rs, ru, rt) in enumerate(agent_raw):
        sx, su = dyn.state_slices[i], dyn.control_slices[i]
        consistency = max(
            consistency,
            float(np.max(np.abs(rs - pot_state[:, sx]), initial=0.0)),
            float(np.max(np.abs(ru - pot_ctrl[:, su]), initial=0.0)),
            float(np.max(np.abs(rt - pot_term[sx]), initial=0.0)),
        )

    g = cs.stage_values(X[:-1], U, ks)
    gT_val = cs.terminal_values(X[-1], T)
    viol = 0.0
    if g.size:
        viol = float(cs.violation(g, cs.stage_is_eq).max())
    if gT_val.size:
        viol = max(viol, float(cs.violation(gT_val, cs.terminal_is_eq).max()))
    defect = float(np.max(np.abs(X[1:] - dyn.step(X[:-1], U)), initial=0.0))
    ineq = ~cs.stage_is_eq
    ineqT = ~cs.terminal_is_eq
    comp = 0.0
    dual = 0.0
    if g.size:
        comp = float(np.max((np.abs(lam * g) / (1.0 + np.abs(lam)))[:, ineq], initial=0.0))
        dual = float(np.max(-lam[:, ineq], initial=0.0)) + 0.0
    if gT_val.size:
        comp = max(comp, float(np.max((np.abs(lamT * gT_val) / (1.0 + np.abs(lamT)))[ineqT], initial=0.0)))
        dual = max(dual, float(np.max(-lamT[ineqT], initial=0.0)))

    costs = spec.agent_costs(X, U)
    return NashCertificate(
        state_stationarity=r_state,
        control_stationarity=r_ctrl,
        terminal_stationarity=r_term,
        potential_stationarity=pot_res,
        primal_feasibility=max(viol, defect),
        complementarity=comp,
        dual_feasibility=dual,
        multipliers_consistent=bool(consistency <= 1e-10 * (1.0 + np.max(np.abs(xi), initial=0.0))),
        consistency_error=consistency,
        agent_costs=costs,
        kkt_tol=kkt_tol,
        feasibility_tol=feasibility_tol,
    )


# ---------------------------------------------------------------------------
# best responses

@dataclass
class BestResponse:
    agent: int
    gap: float
    candidate_cost: float
    best_cost: float
    result: object = None
    status: str = "ok"


def best_response(spec, result, agent, opts=None):
    """Re-optimize ``agent`` against the others' frozen controls.

    The agent's problem is warm-started from its candidate controls and
    from the candidate's constraint multipliers. A diverged or infeasible
    re-solve yields ``gap = nan`` with the reason in ``status``.
    """
    opts = opts or SolverOptions()
    U = np.asarray(result.trajectory.controls, dtype=float)
    ocp = restrict(spec, [agent], U)
    candidate_cost = float(result.trajectory.cost_per_agent[agent])
    init_mult = None
    mult = getattr(result, "multipliers", None)
    if mult is not None and mult.stage.shape == (spec.horizon, spec.constraints.num_stage_rows):
        init_mult = MultiplierState(
            mult.stage[:, ocp.stage_rows], mult.stage_penalty[:, ocp.stage_rows],
            mult.terminal[ocp.terminal_rows], mult.terminal_penalty[ocp.terminal_rows],
        )
    try:
        br = solve(ocp, opts, init=ocp.local_controls(U), init_multipliers=init_mult)
    except DivergenceError as exc:
        logger.warning("best-response solve for agent %d diverged: %s", agent, exc)
        return BestResponse(agent, float("nan"), candidate_cost, float("nan"), None, f"diverged: {exc}")
    best_cost = float(br.trajectory.cost_per_agent[agent])
    if not br.converged:
        logger.warning("best-response solve for agent %d did not converge (%s)", agent, br.status)
        return BestResponse(agent, float("nan"), candidate_cost, best_cost, br, f"infeasible: {br.status}")
    return BestResponse(agent, candidate_cost - best_cost, candidate_cost, best_cost, br)


def best_response_gap(spec, result, agent, opts=None):
    """``J^i(candidate) - J^i(best response)``; ``nan`` when indeterminate."""
    return best_response(spec, result, agent, opts).gap


def certify(spec, result, opts=None, kkt_tol=1e-3, gap_tol=1e-3, best_responses=True):
    """Full certificate: KKT residuals plus (optionally) every agent's best-response gap."""
    opts = opts or SolverOptions()
    cert = kkt_residuals(spec, result, kkt_tol=kkt_tol, feasibility_tol=opts.constraint_tol)
    cert.gap_tol = gap_tol
    if best_responses:
        cert.best_response_gaps = np.array(
            [best_response_gap(spec, result, i, opts) for i in range(spec.num_agents)]
        )
    return cert


# ---------------------------------------------------------------------------
# brute-force oracle

@dataclass
class EquilibriumProfile:
    controls: np.ndarray
    costs: np.ndarray
    potential: float


@dataclass
class BruteForceResult:
    equilibria: list
    sequences: list
    costs: np.ndarray
    feasible: np.ndarray
    profiles: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.equilibria)

    def __iter__(self):
        return iter(self.equilibria)

    def contains(self, controls, atol=1e-12):
        controls = np.asarray(controls, dtype=float)
        return any(np.allclose(e.controls, controls, atol=atol, rtol=0) for e in self.equilibria)


def brute_force_nash(spec, grids, max_profiles=10_000_000, feas_tol=1e-9, rtol=1e-10, chunk=200_000):
    """Enumerate generalized Nash equilibria of a tiny game on a control grid.

    Every agent picks each of its ``T`` scalar controls from ``grids[i]``.
    A profile is an equilibrium when it is feasible and no agent has a
    feasible unilateral grid deviation with strictly lower cost.

    Restricted to ``N <= 2``, ``T <= 3``, scalar controls and grids of at
    most 15 points; more than ``max_profiles`` profiles raises
    :class:`GridTooLargeError`.
    """
    dyn = spec.dynamics
    N, T = spec.num_agents, spec.horizon
    if N > 2 or T > 3:
        raise ValueError(f"brute force supports N <= 2 and T <= 3, got N={N}, T={T}")
    if any(d != 1 for d in dyn.control_dims):
        raise ValueError("brute force requires scalar controls")
    if len(grids) != N:
        raise ValueError(f"need one grid per agent, got {len(grids)}")
    grids = [np.asarray(g, dtype=float).ravel() for g in grids]
    if any(g.size > 15 for g in grids):
        raise ValueError("grids are limited to 15 points per dimension")
    seqs = [np.array(list(itertools.product(g, repeat=T))) for g in grids]
    sizes = [s.shape[0] for s in seqs]
    total = int(np.prod(sizes))
    if total > max_profiles:
        raise GridTooLargeError(f"{total} profiles exceed the limit of {max_profiles}", total)

    # joint controls for every profile, agent 0 varying slowest
    idx = np.indices(sizes).reshape(N, -1).T
    costs = np.empty((total, N))
    feasible = np.empty(total, dtype=bool)
    cs = spec.constraints
    ks_one = np.arange(T)
    for start in range(0, total, chunk):
        sel = idx[start:start + chunk]
        P = sel.shape[0]
        U = np.empty((P, T, spec.m))
        for i in range(N):
            U[:, :, dyn.control_slices[i].start] = seqs[i][sel[:, i]]
        X = np.empty((P, T + 1, spec.n))
        X[:, 0] = spec.x0
        for k in range(T):
            X[:, k + 1] = dyn.step(X[:, k], U[:, k], k)
        Xs = X[:, :-1].reshape(P * T, spec.n)
        Us = U.reshape(P * T, spec.m)
        ks = np.tile(ks_one, P)
        for i in range(N):
            run = spec.agent_running(i, Xs, Us, ks).reshape(P, T).sum(axis=1)
            cost = spec.costs[i]
            if isinstance(cost, QuadraticCost) and not cost.reads_joint:
                sx = dyn.state_slices[i]
                E = X[:, -1, sx] - cost.goal
                term = 0.5 * np.einsum("pi,ij,pj->p", E, cost.Q_f, E)
            else:
                term = np.array([spec.agent_terminal(i, X[p, -1]) for p in range(P)])
            costs[start:start + P, i] = run + term
        viol = np.zeros(P)
        if cs.num_stage_rows:
            g = cs.stage_values(Xs, Us, ks)
            viol = cs.violation(g, cs.stage_is_eq).reshape(P, T, -1).max(axis=(1, 2))
        if cs.num_terminal_rows:
            gT = cs.terminal_values(X[:, -1], T)
            viol = np.maximum(viol, cs.violation(gT, cs.terminal_is_eq).max(axis=1))
        feasible[start:start + P] = viol <= feas_tol

    J = costs.reshape(tuple(sizes) + (N,))
    F = feasible.reshape(sizes)
    is_eq = F.copy()
    for i in range(N):
        Ji = np.where(F, J[..., i], np.inf)
        best = Ji.min(axis=i, keepdims=True)
        is_eq &= J[..., i] <= best + rtol * (1.0 + np.abs(best))

    equilibria = []
    for flat in np.flatnonzero(is_eq.ravel()):
        choice = idx[flat]
        U = np.empty((T, spec.m))
        for i in range(N):
            U[:, dyn.control_slices[i].start] = seqs[i][choice[i]]
        equilibria.append(EquilibriumProfile(U, costs[flat].copy(), float(costs[flat].sum())))
    return BruteForceResult(equilibria, seqs, J, F, total, {"grid_sizes": [g.size for g in grids]})
