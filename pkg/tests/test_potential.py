import numpy as np
import pytest

from builders import line_game
from potgame import (
    ConstraintSet,
    FunctionCost,
    GameSpec,
    IntegratorModel,
    JointDynamics,
    QuadraticCost,
    StructureError,
    UnicycleModel,
    assemble,
    restrict,
    rollout,
    verify_potential_condition,
)
from potgame.potential import PotentialOCP


def test_single_agent_objective_is_agent_cost(rng):
    dyn = JointDynamics([UnicycleModel()], 0.1)
    spec = GameSpec(dyn, [QuadraticCost([1, 2, 0], [1, 1], [5, 5, 0], [1, 1, 0])], ConstraintSet([]), 8, [0, 0, 0.2])
    ocp = assemble(spec)
    for _ in range(10):
        U = rng.normal(size=(8, 2))
        traj = rollout(spec, spec.x0, U)
        assert ocp.objective(traj.states, U) == pytest.approx(traj.cost_per_agent[0], rel=1e-13)


def test_objective_is_sum_of_agent_costs(exchange_spec, rng):
    ocp = assemble(exchange_spec)
    worst = 0.0
    for _ in range(1000):
        U = 2 * rng.normal(size=(exchange_spec.horizon, exchange_spec.m))
        traj = rollout(exchange_spec, exchange_spec.x0, U)
        obj = ocp.objective(traj.states, U)
        worst = max(worst, abs(obj - traj.cost_per_agent.sum()) / (1 + abs(obj)))
    assert worst <= 1e-10


def test_costs_three_and_five_sum_to_eight():
    dyn = JointDynamics([IntegratorModel(1), IntegratorModel(1)], 1.0)
    costs = [FunctionCost(lambda x, u, k: 0.0, lambda x: 3.0), FunctionCost(lambda x, u, k: 0.0, lambda x: 5.0)]
    spec = GameSpec(dyn, costs, ConstraintSet([]), 2, [0, 0])
    ocp = assemble(spec)
    U = np.zeros((2, 2))
    assert ocp.objective(ocp.rollout(U), U) == 8.0


def test_gradients_match_agent_gradients(exchange_spec, rng):
    """Each agent's own-block derivatives of the potential equal those of its cost."""
    ocp = assemble(exchange_spec)
    T = exchange_spec.horizon
    X = rng.normal(size=(T, exchange_spec.n))
    U = rng.normal(size=(T, exchange_spec.m))
    lx, lu, lxx, luu, _ = ocp.cost_expansion(X, U, np.arange(T))
    dyn = exchange_spec.dynamics
    for i, cost in enumerate(exchange_spec.costs):
        sx, su = dyn.state_slices[i], dyn.control_slices[i]
        gx, gu, *_ = cost.running_expansion(X[:, sx], U[:, su], np.arange(T))
        np.testing.assert_allclose(lx[:, sx], gx, rtol=1e-14)
        np.testing.assert_allclose(lu[:, su], gu, rtol=1e-14)
        np.testing.assert_allclose(lxx[:, sx, sx], np.broadcast_to(cost.Q, (T,) + cost.Q.shape))


def test_nonquadratic_costs_use_finite_differences(rng):
    dyn = JointDynamics([IntegratorModel(2), IntegratorModel(1)], 0.1)
    costs = [
        FunctionCost(lambda x, u, k: float(np.sin(x[0]) * x[1] + u @ u), lambda x: float(np.cosh(x[0]))),
        QuadraticCost([1], [1], [1], [0]),
    ]
    spec = GameSpec(dyn, costs, ConstraintSet([]), 3, np.zeros(3))
    ocp = assemble(spec)
    X, U = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    lx, lu, lxx, luu, lux = ocp.cost_expansion(X, U, np.arange(3))
    np.testing.assert_allclose(lx[:, 0], np.cos(X[:, 0]) * X[:, 1], atol=1e-6)
    np.testing.assert_allclose(lu[:, :2], 2 * U[:, :2], atol=1e-6)
    np.testing.assert_allclose(lxx, np.transpose(lxx, (0, 2, 1)), atol=0)
    gT, HT = ocp.terminal_expansion(X[0])
    assert gT[0] == pytest.approx(np.sinh(X[0, 0]), abs=1e-6)


def test_assemble_rejects_coupled_costs():
    dyn = JointDynamics([IntegratorModel(1), IntegratorModel(1)], 0.1)
    coupled = FunctionCost(lambda x, u, k: float((x[0] - x[1]) ** 2 + u[0] ** 2), lambda x: 0.0, reads_joint=True)
    spec = GameSpec(dyn, [coupled, QuadraticCost([1], [1], [1], [0])], ConstraintSet([]), 3, [0.0, 1.0])
    with pytest.raises(StructureError, match="agent 0 depends on agent 1") as info:
        assemble(spec)
    assert (0, 1) in info.value.offending


class TestPotentialCondition:
    def test_identical_strategies(self, exchange_spec, rng):
        ocp = assemble(exchange_spec)
        gamma = rng.normal(size=(exchange_spec.horizon, exchange_spec.m))
        nu = gamma.copy()
        a, b = rollout(exchange_spec, exchange_spec.x0, gamma), rollout(exchange_spec, exchange_spec.x0, nu)
        assert (a.cost_per_agent - b.cost_per_agent == 0).all()
        assert ocp.objective(a.states, gamma) - ocp.objective(b.states, nu) == 0.0

    def test_exchange_scenario(self, exchange_spec):
        report = verify_potential_condition(exchange_spec, assemble(exchange_spec), trials=100, seed=3)
        assert report.passed and report.max_residual <= 1e-9

    def test_cross_agent_term_is_caught(self):
        dyn = JointDynamics([IntegratorModel(1), IntegratorModel(1)], 0.5)
        coupled = FunctionCost(lambda x, u, k: float((x[0] - x[1]) ** 2 + u[0] ** 2), lambda x: 0.0, reads_joint=True)
        spec = GameSpec(dyn, [coupled, QuadraticCost([1], [1], [1], [0])], ConstraintSet([]), 4, [0.0, 1.0])
        # bypass the structural gate to test the identity itself
        report = verify_potential_condition(spec, PotentialOCP(spec), trials=50, seed=0)
        assert not report.passed and report.failures


def test_restricted_ocp_freezes_other_agents(rng):
    spec = line_game(T=3, d=0.5)
    frozen = rng.normal(size=(3, 2))
    ocp = restrict(spec, [1], frozen)
    assert ocp.m == 1
    local = rng.normal(size=(3, 1))
    full = ocp.full_controls(local)
    np.testing.assert_array_equal(full[:, 0], frozen[:, 0])
    np.testing.assert_array_equal(full[:, 1], local[:, 0])
    X = ocp.rollout(local)
    # objective is agent 1's own cost only
    traj = rollout(spec, spec.x0, full)
    assert ocp.objective(X, local) == pytest.approx(traj.cost_per_agent[1], rel=1e-13)
