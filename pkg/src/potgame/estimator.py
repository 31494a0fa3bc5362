"""scikit-learn style facade over the potential-game solver."""

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from potgame._validation import check_game, check_initial_states
from potgame.nash import certify
from potgame.potential import PotentialOCP
from potgame.solver import SolverOptions, solve


class PotentialGameSolver(BaseEstimator):
    """Solve a constrained potential game with the estimator protocol.

    ``fit(game)`` solves the game from its own initial state and stores
    ``result_``, ``trajectory_``, ``converged_`` and (when ``certify`` is
    set) ``certificate_``. After fitting, ``transform`` maps a batch of
    joint initial states to flattened open-loop control plans and
    ``predict`` to the first control of each plan, i.e. the
    receding-horizon policy evaluated at those states. Each of those
    solves is warm-started from the fitted plan.

    Parameters mirror :class:`SolverOptions`, plus ``certify`` and
    ``best_responses`` for the certificate.
    """

    def __init__(
        self,
        constraint_tol=1e-4,
        cost_tol=1e-6,
        gradient_tol=1e-4,
        max_outer=30,
        max_inner=100,
        penalty_init=1.0,
        penalty_scale=10.0,
        penalty_max=1e8,
        polish=True,
        time_budget=None,
        certify=False,
        best_responses=True,
    ):
        self.constraint_tol = constraint_tol
        self.cost_tol = cost_tol
        self.gradient_tol = gradient_tol
        self.max_outer = max_outer
        self.max_inner = max_inner
        self.penalty_init = penalty_init
        self.penalty_scale = penalty_scale
        self.penalty_max = penalty_max
        self.polish = polish
        self.time_budget = time_budget
        self.certify = certify
        self.best_responses = best_responses

    def _options(self):
        names = {f.name for f in fields(SolverOptions)}
        return SolverOptions(**{k: v for k, v in self.get_params().items() if k in names})

    def fit(self, X, y=None):
        """Solve the game ``X`` (GameSpec, Scenario, path or shipped name); ``y`` is ignored."""
        spec = check_game(X)
        opts = self._options()
        res = solve(PotentialOCP(spec), opts)
        self.spec_ = spec
        self.options_ = opts
        self.result_ = res
        self.trajectory_ = res.trajectory
        self.converged_ = bool(res.converged)
        self.n_features_in_ = spec.n
        self.certificate_ = None
        if self.certify and res.converged:
            self.certificate_ = certify(spec, res, opts, best_responses=self.best_responses)
        return self

    def _plans(self, X):
        check_is_fitted(self, "result_")
        X0 = check_initial_states(X, self.spec_.n)
        init = self.result_.trajectory.controls
        plans = []
        for x0 in X0:
            ocp = PotentialOCP(self.spec_.with_initial_state(x0))
            plans.append(solve(ocp, self.options_, init=init).trajectory.controls)
        return np.array(plans)

    def transform(self, X):
        """Open-loop plans from each initial state, shape ``(n_samples, T * m)``."""
        plans = self._plans(X)
        return plans.reshape(plans.shape[0], -1)

    def predict(self, X):
        """First planned joint control from each initial state, shape ``(n_samples, m)``."""
        return self._plans(X)[:, 0, :]

    def score(self, X=None, y=None):
        """Negative potential value of the fitted plan (higher is better)."""
        check_is_fitted(self, "result_")
        return -float(self.trajectory_.potential_value)
