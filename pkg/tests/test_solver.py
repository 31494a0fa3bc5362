import numpy as np
import pytest
from scipy.linalg import block_diag

from builders import double_integrator_game, line_game, random_lq_game, stacked_riccati_inputs
from oracles import batch_qp, box_qp_enumerate, condensed_matrices, lqr_gains, riccati_tracking
from potgame import (
    AffineConstraint,
    ConstraintSet,
    ControlBound,
    DivergenceError,
    FunctionCost,
    GameSpec,
    IntegratorModel,
    JointDynamics,
    PairwiseCollision,
    PotentialOCP,
    QuadraticCost,
    RodEquality,
    SolverOptions,
    solve,
)
from potgame.constraints import EQUALITY
from potgame.solver import (
    BackwardPassError,
    Expansion,
    MultiplierState,
    augmented_objective,
    backward_pass,
    expand,
    forward_pass,
    projection_polish,
    update_multipliers,
)


def test_options_validation():
    with pytest.raises(ValueError):
        SolverOptions(penalty_scale=1.0)
    with pytest.raises(ValueError):
        SolverOptions(constraint_tol=-1)
    with pytest.raises(ValueError):
        SolverOptions.from_dict({"tolerance": 1})
    opts = SolverOptions.from_dict({"max_outer": 5.0})
    assert opts.max_outer == 5 and isinstance(opts.max_outer, int)
    assert SolverOptions().to_dict()["penalty_init"] == 1.0


class TestRiccatiEquivalence:
    def test_double_integrator(self):
        spec = double_integrator_game(T=30)
        mdl, c = spec.dynamics.models[0], spec.costs[0]
        U = riccati_tracking(mdl.A, mdl.B, c.Q, c.C, c.Q_f, c.goal, spec.x0, 30)
        res = solve(PotentialOCP(spec))
        assert res.converged
        assert np.max(np.abs(res.controls - U)) <= 1e-8

    def test_random_instances(self, rng):
        for _ in range(5):
            spec, stacked = random_lq_game(rng)
            U = riccati_tracking(*stacked_riccati_inputs(stacked))
            Ub, _ = batch_qp(*stacked_riccati_inputs(stacked))
            # the two oracles agree with each other first
            assert np.max(np.abs(U - Ub)) <= 1e-8
            res = solve(PotentialOCP(spec))
            assert np.max(np.abs(res.controls - U)) <= 1e-8

    def test_backward_pass_gains_equal_lqr_gains(self, rng):
        spec, s = random_lq_game(rng, max_T=15)
        ocp = PotentialOCP(spec)
        U = np.zeros((s["T"], spec.m))
        X = ocp.rollout(U)
        mult = MultiplierState.initial(s["T"], 0, 0, 1.0)
        bp = backward_pass(expand(ocp, X, U, mult), regularization=0.0)
        for k, K in enumerate(lqr_gains(s["A"], s["B"], s["Q"], s["R"], s["Qf"], s["T"])):
            np.testing.assert_allclose(bp.gains[k], -K, atol=1e-10)

    def test_one_full_step_reaches_the_optimum(self, rng):
        spec, s = random_lq_game(rng, max_T=20)
        ocp = PotentialOCP(spec)
        U = np.zeros((s["T"], spec.m))
        X = ocp.rollout(U)
        mult = MultiplierState.initial(s["T"], 0, 0, 1.0)
        bp = backward_pass(expand(ocp, X, U, mult), regularization=0.0)
        _, Un, _, alpha = forward_pass(ocp, X, U, bp.feedforward, bp.gains, mult)
        assert alpha == 1.0
        np.testing.assert_allclose(Un, riccati_tracking(*stacked_riccati_inputs(s)), atol=1e-10)


class TestBackwardPass:
    def _zero_expansion(self, T=4, n=2, m=1):
        return Expansion(
            A=np.tile(np.eye(n), (T, 1, 1)), B=np.ones((T, n, m)),
            lx=np.zeros((T, n)), lu=np.zeros((T, m)),
            lxx=np.zeros((T, n, n)), luu=np.zeros((T, m, m)), lux=np.zeros((T, m, n)),
            Vx=np.zeros(n), Vxx=np.zeros((n, n)),
        )

    def test_zero_cost(self):
        bp = backward_pass(self._zero_expansion())
        assert not bp.feedforward.any()
        assert not bp.expected_decrease.any()

    def test_indefinite_hessian_needs_regularization(self):
        e = self._zero_expansion()
        e.luu[:] = -0.5
        e.lu[:] = 1.0
        bp = backward_pass(e, regularization=1e-6)
        assert bp.retries > 0 and bp.regularization > 0.5

    def test_regularization_limit(self):
        e = self._zero_expansion()
        e.luu[:] = -1e12
        with pytest.raises(BackwardPassError):
            backward_pass(e, regularization=1e-6, reg_max=1e3)


class TestForwardPass:
    def test_zero_step_keeps_trajectory(self):
        spec = double_integrator_game(T=5)
        ocp = PotentialOCP(spec)
        U = np.full((5, 1), 0.3)
        X = ocp.rollout(U)
        mult = MultiplierState.initial(5, 0, 0, 1.0)
        Xn, Un, _, _ = forward_pass(ocp, X, U, np.zeros((5, 1)), np.zeros((5, 1, 2)), mult)
        np.testing.assert_array_equal(Un, U)
        np.testing.assert_array_equal(Xn, X)

    def test_nonconvex_cost_backtracks(self):
        dyn = JointDynamics([IntegratorModel(1)], 1.0)
        cost = FunctionCost(lambda x, u, k: float(np.cos(3 * u[0]) + 0.01 * u[0] ** 2), lambda x: 0.0)
        spec = GameSpec(dyn, [cost], ConstraintSet([]), 1, [0.0])
        ocp = PotentialOCP(spec)
        U = np.array([[0.2]])
        X = ocp.rollout(U)
        mult = MultiplierState.initial(1, 0, 0, 1.0)
        # a Newton-sized step on this concave-looking patch overshoots
        _, Un, J, alpha = forward_pass(ocp, X, U, np.array([[2.0]]), np.zeros((1, 1, 1)), mult)
        assert 0 < alpha < 1
        assert J <= augmented_objective(ocp, X, U, mult)


class TestMultiplierUpdate:
    @staticmethod
    def _update(lam, mu, g, eq=False, opts=None):
        state = MultiplierState(np.array([[lam]]), np.array([[mu]]), np.zeros(0), np.zeros(0))
        new = update_multipliers(state, np.array([[g]]), np.zeros(0), np.array([eq]), np.zeros(0, bool), opts or SolverOptions())
        return new.stage[0, 0], new.stage_penalty[0, 0]

    def test_inactive_row(self):
        assert self._update(0.0, 1.0, -0.5) == (0.0, 1.0)

    def test_violated_row(self):
        lam, mu = self._update(0.0, 1.0, 0.3)
        assert lam == pytest.approx(0.3) and mu == pytest.approx(10.0)

    def test_slack_row_decreases(self):
        assert self._update(2.0, 10.0, -0.1) == (pytest.approx(1.0), 10.0)

    def test_equality_row_is_unprojected(self):
        lam, _ = self._update(0.0, 1.0, -0.3, eq=True)
        assert lam == pytest.approx(-0.3)

    def test_penalty_is_capped(self):
        _, mu = self._update(0.0, 5e7, 1.0, opts=SolverOptions(penalty_max=1e8))
        assert mu == 1e8


class TestSolve:
    def test_inactive_constraints_reduce_to_plain_ilqr(self):
        plain = solve(PotentialOCP(double_integrator_game(T=20)))
        loose = double_integrator_game(T=20, constraints=[ControlBound(0, [0], 100.0)])
        res = solve(PotentialOCP(loose))
        assert res.converged and res.outer_iterations == 1
        np.testing.assert_allclose(res.controls, plain.controls, atol=1e-12)
        assert not res.multipliers.stage.any()

    def test_box_constrained_qp(self):
        spec = double_integrator_game(T=2, constraints=[ControlBound(0, [0], 0.2)])
        mdl, c = spec.dynamics.models[0], spec.costs[0]
        free, Gam = condensed_matrices(mdl.A, mdl.B, spec.x0, 2)
        Qb = block_diag(c.Q, c.Q_f)
        H = Gam.T @ Qb @ Gam + block_diag(c.C, c.C)
        f = Gam.T @ Qb @ (free - np.tile(c.goal, 2))
        z = box_qp_enumerate(H, f, np.full(2, -0.2), np.full(2, 0.2))
        res = solve(PotentialOCP(spec))
        assert res.converged and res.polished
        np.testing.assert_allclose(res.controls.ravel(), z, atol=1e-8)

    def test_equality_constrained_qp(self):
        # terminal velocity pinned: h * sum_k u_k = 0.4 starting from rest
        T = 6
        spec = double_integrator_game(T=T, constraints=[_SumConstraint(T, 0.4, 0.1)])
        mdl, c = spec.dynamics.models[0], spec.costs[0]
        E = np.full((1, T), mdl.B[1, 0])
        U_ref, _ = batch_qp(mdl.A, mdl.B, c.Q, c.C, c.Q_f, c.goal, spec.x0, T, E, np.array([0.4]))
        res = solve(PotentialOCP(spec), SolverOptions(constraint_tol=1e-6))
        assert res.converged
        np.testing.assert_allclose(res.controls, U_ref, atol=1e-6)

    def test_four_agent_exchange(self, exchange_spec, exchange_result):
        res = exchange_result
        assert res.converged and res.max_violation <= 1e-4
        X = res.trajectory.states
        for i, cost in enumerate(exchange_spec.costs):
            assert np.linalg.norm(X[-1, 3 * i:3 * i + 2] - cost.goal[:2]) <= 0.1

    def test_feasibility_trend(self, exchange_result):
        hist = exchange_result.history
        for prev, cur in zip(hist, hist[1:]):
            assert cur["violation"] <= prev["violation"] or cur["max_penalty"] > prev["max_penalty"]

    def test_multipliers_nonnegative(self, exchange_result):
        assert (exchange_result.multipliers.stage >= 0).all()
        assert (exchange_result.multipliers.stage_penalty >= 1.0).all()

    def test_budget_exhaustion_returns_best_iterate(self, exchange_spec):
        res = solve(PotentialOCP(exchange_spec), SolverOptions(max_outer=1, max_inner=3))
        assert not res.converged and res.status == "max_outer"
        assert np.isfinite(res.max_violation) and res.max_violation > 1e-4

    def test_non_finite_objective_raises(self):
        dyn = JointDynamics([IntegratorModel(1)], 0.1)
        cost = FunctionCost(lambda x, u, k: float("nan"), lambda x: 0.0)
        spec = GameSpec(dyn, [cost], ConstraintSet([]), 3, [0.0])
        with pytest.raises(DivergenceError):
            solve(PotentialOCP(spec))

    def test_infeasible_initial_state_is_flagged(self):
        spec = line_game(T=2, d=0.5, x0=(0.0, 0.1))
        res = solve(PotentialOCP(spec))
        assert not res.converged and res.status == "infeasible_initial_state"

    def test_warm_start_and_determinism(self, exchange_spec, exchange_result):
        ocp = PotentialOCP(exchange_spec)
        again = solve(ocp, init=exchange_result.controls)
        assert again.converged and again.inner_iterations <= exchange_result.inner_iterations
        twice = solve(ocp)
        assert twice.controls.tobytes() == exchange_result.controls.tobytes()


class _SumConstraint(AffineConstraint):
    """Equality on the running sum of controls, written through a step-indexed row."""

    def __init__(self, T, target, gain):
        super().__init__(np.zeros((1, 2)), np.zeros((1, 1)), 0.0, kind=EQUALITY)
        self.T, self.target, self.gain = T, target, gain

    def evaluate(self, X, U=None, ks=None):
        # active on the last stage only: x_{T-1}[1] + gain u_{T-1} - target
        val = X[:, 1] + self.gain * U[:, 0] - self.target
        return np.where(np.asarray(ks) == self.T - 1, val, 0.0)[:, None]

    def jacobian(self, X, U=None, ks=None):
        last = (np.asarray(ks) == self.T - 1).astype(float)
        Gx = np.zeros((X.shape[0], 1, 2))
        Gx[:, 0, 1] = last
        Gu = np.zeros((X.shape[0], 1, 1))
        Gu[:, 0, 0] = self.gain * last
        return Gx, Gu


class TestPolish:
    def test_no_active_rows_returns_input(self):
        spec = double_integrator_game(T=5, constraints=[ControlBound(0, [0], 100.0)])
        ocp = PotentialOCP(spec)
        U = np.full((5, 1), 0.1)
        X = ocp.rollout(U)
        Xp, Up, info = projection_polish(ocp, X, U)
        assert Up is U and info["active_rows"] == 0 and not info["improved"]

    def test_linear_equality_in_one_step(self):
        T = 4
        spec = double_integrator_game(T=T, constraints=[_SumConstraint(T, 0.4, 0.1)])
        ocp = PotentialOCP(spec)
        U = np.full((T, 1), 1.0)
        U[-1] = 1.0 + (0.4 - 0.1 * 4) / 0.1 + 1e-3 / 0.1  # residual 1e-3
        X = ocp.rollout(U)
        g0 = ocp.constraints.stage_values(X[:-1], U, np.arange(T))[-1, 0]
        assert g0 == pytest.approx(1e-3)
        Xp, Up, info = projection_polish(ocp, X, U, SolverOptions(polish_max_iter=1))
        g = ocp.constraints.stage_values(Xp[:-1], Up, np.arange(T))[-1, 0]
        assert info["steps"] == 1 and abs(g) <= 1e-8

    def test_rank_deficient_jacobian_warns(self):
        # the same equality twice gives linearly dependent active rows
        T = 3
        spec = double_integrator_game(T=T, constraints=[_SumConstraint(T, 0.4, 0.1), _SumConstraint(T, 0.4, 0.1)])
        ocp = PotentialOCP(spec)
        U = np.ones((T, 1))
        X = ocp.rollout(U)
        Xp, Up, info = projection_polish(ocp, X, U)
        assert info["warning"] and "rank" in info["warning"]
        assert Up is U

    def test_rod_residual_after_polish(self):
        dyn = JointDynamics([IntegratorModel(3), IntegratorModel(3)], 0.1)
        costs = [QuadraticCost([1, 1, 1], [0.1] * 3, [10] * 3, g) for g in ([2, 0, 1], [2.5, 0, 1])]
        rod = RodEquality(0, 1, 0.5, [0, 1, 2], [3, 4, 5])
        spec = GameSpec(dyn, costs, ConstraintSet([rod]), 10, [0, 0, 1, 0.5, 0, 1])
        res = solve(PotentialOCP(spec))
        X = res.trajectory.states
        err = np.abs(np.linalg.norm(X[:, :3] - X[:, 3:], axis=1) - 0.5)
        assert res.converged and err.max() <= 1e-6

    def test_collision_pair_stays_feasible(self):
        spec = line_game(T=3, d=0.5)
        res = solve(PotentialOCP(spec))
        X = res.trajectory.states
        assert res.converged and np.min(np.abs(X[:, 0] - X[:, 1])) >= 0.5 - 1e-8
