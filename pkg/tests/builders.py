"""Small game instances shared by the tests."""

import numpy as np
from scipy.linalg import block_diag

from potgame import (
    ConstraintSet,
    GameSpec,
    IntegratorModel,
    JointDynamics,
    LinearModel,
    PairwiseCollision,
    QuadraticCost,
)


def random_lq_game(rng, max_joint_state=12, max_T=50):
    """Random separable linear-quadratic game and its stacked matrices."""
    N = int(rng.integers(1, 4))
    ns = [int(rng.integers(1, 5)) for _ in range(N)]
    while sum(ns) > max_joint_state:
        ns[int(np.argmax(ns))] -= 1
    ms = [int(rng.integers(1, n + 1)) for n in ns]
    T = int(rng.integers(2, max_T + 1))
    models, costs = [], []
    for n, m in zip(ns, ms):
        A = np.eye(n) + 0.1 * rng.normal(size=(n, n))
        B = 0.3 * rng.normal(size=(n, m))
        models.append(LinearModel(A, B))
        Q = np.diag(rng.uniform(0.1, 2.0, n))
        R = np.diag(rng.uniform(0.1, 2.0, m))
        Qf = np.diag(rng.uniform(1.0, 10.0, n))
        costs.append(QuadraticCost(Q, R, Qf, rng.normal(size=n)))
    dyn = JointDynamics(models, 0.1)
    spec = GameSpec(dyn, costs, ConstraintSet([]), T, rng.normal(size=dyn.n))
    stacked = {
        "A": block_diag(*[mdl.A for mdl in models]),
        "B": block_diag(*[mdl.B for mdl in models]),
        "Q": block_diag(*[c.Q for c in costs]),
        "R": block_diag(*[c.C for c in costs]),
        "Qf": block_diag(*[c.Q_f for c in costs]),
        "goal": np.concatenate([c.goal for c in costs]),
        "x0": np.array(spec.x0),
        "T": T,
    }
    return spec, stacked


def double_integrator_game(T=20, constraints=()):
    """One double integrator driven to the origin."""
    h = 0.1
    A = np.array([[1.0, h], [0.0, 1.0]])
    B = np.array([[0.5 * h * h], [h]])
    dyn = JointDynamics([LinearModel(A, B)], h)
    cost = QuadraticCost(np.diag([1.0, 0.1]), [0.5], np.diag([10.0, 1.0]), [0.0, 0.0])
    return GameSpec(dyn, [cost], ConstraintSet(list(constraints)), T, [1.0, 0.0])


def line_game(T=2, d=0.5, x0=(0.0, 1.0), goals=(1.0, 0.0), weights=(1.0, 1.0), h=1.0):
    """Two 1-D single integrators that want to swap sides, with a separation constraint."""
    dyn = JointDynamics([IntegratorModel(1), IntegratorModel(1)], h)
    costs = [
        QuadraticCost([weights[0]], [1.0], [5.0], [goals[0]]),
        QuadraticCost([weights[1]], [1.0], [5.0], [goals[1]]),
    ]
    cons = [PairwiseCollision(0, 1, d, [0], [1])] if d else []
    return GameSpec(dyn, costs, ConstraintSet(cons), T, list(x0))


def stacked_riccati_inputs(stacked):
    s = stacked
    return s["A"], s["B"], s["Q"], s["R"], s["Qf"], s["goal"], s["x0"], s["T"]
