import numpy as np
import pytest

from oracles import central_jacobian, unicycle_step
from potgame import (
    HumanUnicycleModel,
    Integrator6DOFModel,
    IntegratorModel,
    JointDynamics,
    LinearModel,
    UnicycleModel,
    make_model,
)
from potgame.dynamics import AgentModel, jacobians, step


def test_unicycle_forward():
    dyn = JointDynamics([UnicycleModel()], 0.1)
    np.testing.assert_allclose(step(dyn, [0, 0, 0], [1, 0]), [0.1, 0, 0], atol=1e-15)


def test_unicycle_along_y():
    dyn = JointDynamics([UnicycleModel()], 0.1)
    np.testing.assert_allclose(step(dyn, [0, 0, np.pi / 2], [2, 0]), [0, 0.2, np.pi / 2], atol=1e-15)


def test_integrator6_speed_limit_step():
    dyn = JointDynamics([Integrator6DOFModel()], 0.1)
    np.testing.assert_allclose(step(dyn, np.zeros(6), [1.2, 0, 0, 0, 0, 0]), [0.12, 0, 0, 0, 0, 0], atol=1e-15)


def test_unicycle_matches_hand_written_model(rng):
    mdl = UnicycleModel()
    for _ in range(50):
        x, u = rng.normal(size=3), rng.normal(size=2)
        np.testing.assert_allclose(mdl.step(x, u, 0.1), unicycle_step(x, u, 0.1), rtol=1e-15, atol=1e-15)


def test_heading_is_not_wrapped():
    x = step(JointDynamics([UnicycleModel()], 1.0), [0, 0, 3.0], [0, 1.0])
    assert x[2] == pytest.approx(4.0)


def test_unicycle_heading_derivative_at_zero():
    A, _ = jacobians(JointDynamics([UnicycleModel()], 0.1), [0, 0, 0], [1, 0])
    assert A[0, 2] == 0.0


def test_unicycle_heading_derivative_at_quarter_turn():
    A, _ = jacobians(JointDynamics([UnicycleModel()], 0.1), [0, 0, np.pi / 4], [2, 0])
    assert A[0, 2] == pytest.approx(-0.2 * np.sin(np.pi / 4), abs=1e-15)
    assert A[0, 2] == pytest.approx(-0.14142, abs=1e-5)
    fd = central_jacobian(lambda z: unicycle_step(z[:3], z[3:], 0.1), [0, 0, np.pi / 4, 2, 0])
    assert A[0, 2] == pytest.approx(fd[0, 2], abs=1e-9)


def test_integrator6_jacobians_constant():
    A, B = jacobians(JointDynamics([Integrator6DOFModel()], 0.1), np.ones(6), np.ones(6))
    np.testing.assert_array_equal(A, np.eye(6))
    np.testing.assert_allclose(B, 0.1 * np.eye(6))


def test_human_height_frozen(rng):
    mdl = HumanUnicycleModel()
    uni = UnicycleModel()
    for _ in range(20):
        x, u = rng.normal(size=4), rng.normal(size=2)
        x[2] = 1.0
        nxt = mdl.step(x, u, 0.1)
        assert nxt[2] == 1.0
        np.testing.assert_allclose(nxt[[0, 1, 3]], uni.step(x[[0, 1, 3]], u, 0.1), atol=1e-15)
        A, B = mdl.jacobians(x, u, 0.1)
        np.testing.assert_array_equal(A[2], [0, 0, 1, 0])
        np.testing.assert_array_equal(B[2], [0, 0])


def test_joint_jacobian_is_block_diagonal(rng):
    dyn = JointDynamics([UnicycleModel(), HumanUnicycleModel(), Integrator6DOFModel(), UnicycleModel()], 0.1)
    x, u = rng.normal(size=dyn.n), rng.normal(size=dyn.m)
    A, B = dyn.jacobians(x, u)
    for i in range(4):
        for j in range(4):
            if i != j:
                assert not A[dyn.state_slices[i], dyn.state_slices[j]].any()
                assert not B[dyn.state_slices[i], dyn.control_slices[j]].any()


def test_batched_step_matches_loop(rng):
    dyn = JointDynamics([UnicycleModel(), UnicycleModel(), HumanUnicycleModel()], 0.1)
    X, U = rng.normal(size=(7, dyn.n)), rng.normal(size=(7, dyn.m))
    batched = dyn.step(X, U)
    for t in range(7):
        np.testing.assert_array_equal(batched[t], dyn.step(X[t], U[t]))
    A, B = dyn.jacobians(X, U)
    A3, B3 = dyn.jacobians(X[3], U[3])
    np.testing.assert_array_equal(A[3], A3)
    np.testing.assert_array_equal(B[3], B3)


@pytest.mark.parametrize("model", [UnicycleModel(), HumanUnicycleModel(), Integrator6DOFModel(), IntegratorModel(2)])
def test_analytic_jacobians_match_finite_differences(model, rng):
    dyn = JointDynamics([model], 0.1)
    for _ in range(100):
        x, u = rng.normal(size=dyn.n), 2 * rng.normal(size=dyn.m)
        A, B = dyn.jacobians(x, u)
        Afd, Bfd = dyn.fd_jacobians(x, u)
        J = np.hstack([A, B])
        assert np.max(np.abs(J - np.hstack([Afd, Bfd]))) <= 1e-6 * (1 + np.max(np.abs(J)))


def test_finite_difference_fallback():
    class Pendulum(AgentModel):
        state_dim = 2
        control_dim = 1

        def step(self, x, u, h):
            x = np.asarray(x, dtype=float)
            return np.stack([x[..., 0] + h * x[..., 1], x[..., 1] + h * (-np.sin(x[..., 0]) + u[..., 0])], axis=-1)

    dyn = JointDynamics([Pendulum()], 0.05)
    A, B = dyn.jacobians([0.3, -0.2], [0.5])
    np.testing.assert_allclose(A, [[1, 0.05], [-0.05 * np.cos(0.3), 1]], atol=1e-9)
    np.testing.assert_allclose(B, [[0], [0.05]], atol=1e-9)


def test_non_finite_input_rejected():
    with pytest.raises(ValueError):
        JointDynamics([UnicycleModel()], 0.1).step([np.nan, 0, 0], [0, 0])


def test_linear_model_ignores_step_size():
    mdl = LinearModel([[1, 1], [0, 1]], [[0], [1]])
    np.testing.assert_allclose(mdl.step([1, 2], [3], 123.0), [3, 5])


def test_model_registry():
    assert isinstance(make_model("unicycle"), UnicycleModel)
    assert isinstance(make_model("integrator6"), Integrator6DOFModel)
    assert isinstance(make_model("human_unicycle"), HumanUnicycleModel)
    with pytest.raises(ValueError, match="unknown model id"):
        make_model("bicycle")
