"""Augmented-Lagrangian iLQR for the potential optimal control problem.

The outer loop updates multipliers and penalties; the inner loop runs
iLQR on the augmented objective

    P + sum_rows psi(g; lambda, mu)

where inequality rows use the smooth form
``psi = (max(0, lambda + mu g)^2 - lambda^2) / (2 mu)`` (equal to
``mu/2 max(g, 0)^2`` at ``lambda = 0``) and equality rows use
``lambda e + mu/2 e^2``. After the constraint tolerance is reached an
active-set Gauss-Newton projection sharpens feasibility and the
multipliers are refit on the projected point.
"""

import time
import warnings
from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import lsq_linear

from potgame.exceptions import DivergenceError
from potgame.game import evaluate_trajectory, simulate


@dataclass(frozen=True)
class SolverOptions:
    constraint_tol: float = 1e-4
    cost_tol: float = 1e-6
    gradient_tol: float = 1e-4
    max_outer: int = 30
    max_inner: int = 100
    penalty_init: float = 1.0
    penalty_scale: float = 10.0
    penalty_max: float = 1e8
    reg_init: float = 1e-6
    reg_min: float = 1e-9
    reg_max: float = 1e9
    reg_factor: float = 10.0
    line_search_factor: float = 0.5
    min_step: float = 1e-8
    polish: bool = True
    polish_tol: float = 1e-8
    polish_max_iter: int = 10
    time_budget: float = None

    def __post_init__(self):
        for f in fields(self):
            val = getattr(self, f.name)
            if f.name in ("polish", "time_budget"):
                continue
            if not val > 0:
                raise ValueError(f"solver option {f.name} must be positive, got {val!r}")
        if self.penalty_scale <= 1:
            raise ValueError("penalty_scale must exceed 1")
        if not 0 < self.line_search_factor < 1:
            raise ValueError("line_search_factor must lie in (0, 1)")
        if self.time_budget is not None and not self.time_budget > 0:
            raise ValueError("time_budget must be positive")
        for name in ("max_outer", "max_inner", "polish_max_iter"):
            object.__setattr__(self, name, int(getattr(self, name)))

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown solver options: {sorted(unknown)}")
        return cls(**d)

    def updated(self, **changes):
        return replace(self, **changes)


@dataclass
class MultiplierState:
    """Multipliers and penalties for stage rows ``(T, c)`` and terminal rows ``(c_T,)``.

    ``costates`` holds the dynamics multipliers ``xi_0..xi_{T-1}`` recovered
    by an adjoint sweep on the final iterate.
    """

    stage: np.ndarray
    stage_penalty: np.ndarray
    terminal: np.ndarray
    terminal_penalty: np.ndarray
    costates: np.ndarray = None

    @classmethod
    def initial(cls, T, c, c_T, penalty):
        return cls(np.zeros((T, c)), np.full((T, c), float(penalty)), np.zeros(c_T), np.full(c_T, float(penalty)))

    def copy(self):
        return MultiplierState(
            self.stage.copy(), self.stage_penalty.copy(), self.terminal.copy(), self.terminal_penalty.copy(),
            None if self.costates is None else self.costates.copy(),
        )


@dataclass
class SolveResult:
    trajectory: object
    states: np.ndarray
    controls: np.ndarray
    multipliers: MultiplierState
    converged: bool
    status: str
    outer_iterations: int
    inner_iterations: int
    max_violation: float
    objective: float
    solve_time_ms: float
    history: list = field(default_factory=list)
    polished: bool = False
    polish_warning: str = None
    regularization_increases: int = 0


@dataclass
class BackwardPassResult:
    feedforward: np.ndarray
    gains: np.ndarray
    expected_decrease: np.ndarray
    regularization: float
    retries: int


class BackwardPassError(DivergenceError):
    pass


@dataclass
class Expansion:
    """Second-order expansion of the augmented objective along a trajectory."""

    A: np.ndarray
    B: np.ndarray
    lx: np.ndarray
    lu: np.ndarray
    lxx: np.ndarray
    luu: np.ndarray
    lux: np.ndarray
    Vx: np.ndarray
    Vxx: np.ndarray


# ---------------------------------------------------------------------------
# augmented Lagrangian terms

def _al_terms(values, lam, mu, is_eq):
    """Penalty value, effective multipliers and Gauss-Newton weights per row."""
    shifted = lam + mu * values
    w = np.where(is_eq, shifted, np.maximum(shifted, 0.0))
    value = np.where(is_eq, lam * values + 0.5 * mu * values**2, (w**2 - lam**2) / (2.0 * mu))
    weight = np.where(is_eq | (shifted > 0), mu, 0.0)
    return value, w, weight


def augmented_objective(ocp, X, U, mult):
    ks = np.arange(U.shape[0])
    total = float(np.sum(ocp.running_cost(X[:-1], U, ks))) + ocp.terminal_cost(X[-1])
    cs = ocp.constraints
    if cs.num_stage_rows:
        g = cs.stage_values(X[:-1], U, ks)
        total += float(np.sum(_al_terms(g, mult.stage, mult.stage_penalty, cs.stage_is_eq)[0]))
    if cs.num_terminal_rows:
        gT = cs.terminal_values(X[-1], U.shape[0])
        total += float(np.sum(_al_terms(gT, mult.terminal, mult.terminal_penalty, cs.terminal_is_eq)[0]))
    return total


def expand(ocp, X, U, mult):
    """Linearize dynamics and quadratize the augmented objective along ``(X, U)``."""
    T = U.shape[0]
    ks = np.arange(T)
    A, B = ocp.dynamics.jacobians(X[:-1], U)
    lx, lu, lxx, luu, lux = (np.array(a, dtype=float) for a in ocp.cost_expansion(X[:-1], U, ks))
    Vx, Vxx = ocp.terminal_expansion(X[-1])
    Vx = np.array(Vx, dtype=float)
    Vxx = np.array(Vxx, dtype=float)
    cs = ocp.constraints
    if cs.num_stage_rows:
        g = cs.stage_values(X[:-1], U, ks)
        Gx, Gu = cs.stage_jacobians(X[:-1], U, ks)
        _, w, wt = _al_terms(g, mult.stage, mult.stage_penalty, cs.stage_is_eq)
        lx += np.einsum("kr,krn->kn", w, Gx)
        lu += np.einsum("kr,krm->km", w, Gu)
        WGx = wt[:, :, None] * Gx
        WGu = wt[:, :, None] * Gu
        lxx += np.einsum("kri,krj->kij", Gx, WGx)
        luu += np.einsum("kri,krj->kij", Gu, WGu)
        lux += np.einsum("kri,krj->kij", Gu, WGx)
        if cs.has_curvature:
            hxx, huu, hux = cs.stage_curvature(X[:-1], U, ks, w)
            lxx += hxx
            luu += huu
            lux += hux
    if cs.num_terminal_rows:
        gT = cs.terminal_values(X[-1], T)
        GT = cs.terminal_jacobian(X[-1], T)
        _, w, wt = _al_terms(gT, mult.terminal, mult.terminal_penalty, cs.terminal_is_eq)
        Vx += GT.T @ w
        Vxx += GT.T @ (wt[:, None] * GT)
        if cs.has_curvature:
            Vxx += cs.terminal_curvature(X[-1], T, w)
    return Expansion(A, B, lx, lu, lxx, luu, lux, Vx, Vxx)


# ---------------------------------------------------------------------------
# iLQR passes

def backward_pass(expansion, regularization=1e-6, reg_max=1e9, reg_factor=10.0):
    """Riccati sweep producing feedforward terms and feedback gains.

    A non-positive-definite control Hessian triggers a retry with the
    regularization multiplied by ``reg_factor``; exceeding ``reg_max``
    raises :class:`BackwardPassError`.
    """
    e = expansion
    T, n, m = e.B.shape[0], e.B.shape[1], e.B.shape[2]
    reg = float(regularization)
    retries = 0
    eye = np.eye(m)
    while True:
        d = np.zeros((T, m))
        K = np.zeros((T, m, n))
        dV = np.zeros(2)
        Vx = e.Vx.copy()
        Vxx = e.Vxx.copy()
        ok = True
        for k in range(T - 1, -1, -1):
            A, B = e.A[k], e.B[k]
            BtVxx = B.T @ Vxx
            Qx = e.lx[k] + A.T @ Vx
            Qu = e.lu[k] + B.T @ Vx
            Qxx = e.lxx[k] + A.T @ Vxx @ A
            Quu = e.luu[k] + BtVxx @ B
            Qux = e.lux[k] + BtVxx @ A
            Quu = 0.5 * (Quu + Quu.T)
            try:
                L = np.linalg.cholesky(Quu + reg * eye)
            except np.linalg.LinAlgError:
                ok = False
                break
            rhs = np.empty((m, n + 1))
            rhs[:, 0] = Qu
            rhs[:, 1:] = Qux
            sol = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
            dk = -sol[:, 0]
            Kk = -sol[:, 1:]
            d[k] = dk
            K[k] = Kk
            dV[0] += dk @ Qu
            dV[1] += 0.5 * dk @ Quu @ dk
            KtQuu = Kk.T @ Quu
            Vx = Qx + KtQuu @ dk + Kk.T @ Qu + Qux.T @ dk
            Vxx = Qxx + KtQuu @ Kk + Kk.T @ Qux + Qux.T @ Kk
            Vxx = 0.5 * (Vxx + Vxx.T)
        if ok:
            return BackwardPassResult(d, K, dV, reg, retries)
        reg = max(reg * reg_factor, 1e-12)
        retries += 1
        if reg > reg_max:
            raise BackwardPassError(f"backward pass failed: regularization exceeded {reg_max:g}")


def forward_pass(ocp, X, U, feedforward, gains, mult, current=None, opts=None):
    """Backtracking rollout ``u = u_bar + alpha d + K (x - x_bar)``.

    Returns ``(X_new, U_new, objective, alpha)``; ``alpha == 0`` signals that
    no step length down to ``min_step`` decreased the augmented objective,
    in which case the input trajectory is returned.
    """
    opts = opts or SolverOptions()
    if current is None:
        current = augmented_objective(ocp, X, U, mult)
    T = U.shape[0]
    dyn = ocp.dynamics
    alpha = 1.0
    while alpha >= opts.min_step:
        Xn = np.empty_like(X)
        Un = np.empty_like(U)
        Xn[0] = X[0]
        finite = True
        for k in range(T):
            Un[k] = U[k] + alpha * feedforward[k] + gains[k] @ (Xn[k] - X[k])
            try:
                Xn[k + 1] = dyn.step(Xn[k], Un[k], k)
            except ValueError:
                finite = False
                break
        if finite and np.all(np.isfinite(Xn)):
            J = augmented_objective(ocp, Xn, Un, mult)
            if np.isfinite(J) and J <= current:
                return Xn, Un, J, alpha
        alpha *= opts.line_search_factor
    return X, U, current, 0.0


def update_multipliers(state, stage_values, terminal_values, is_eq, terminal_is_eq, opts):
    """Projected multiplier update and per-row penalty growth.

    ``lambda <- max(0, lambda + mu g)`` for inequalities (unprojected for
    equalities); ``mu <- min(phi mu, mu_max)`` on rows whose violation
    exceeds the constraint tolerance.
    """
    new = state.copy()
    new.costates = None
    for lam_name, mu_name, g, eq in (
        ("stage", "stage_penalty", stage_values, is_eq),
        ("terminal", "terminal_penalty", terminal_values, terminal_is_eq),
    ):
        lam = getattr(state, lam_name)
        mu = getattr(state, mu_name)
        g = np.asarray(g, dtype=float).reshape(lam.shape)
        shifted = lam + mu * g
        setattr(new, lam_name, np.where(eq, shifted, np.maximum(shifted, 0.0)))
        viol = np.where(eq, np.abs(g), np.maximum(g, 0.0))
        grow = viol > opts.constraint_tol
        setattr(new, mu_name, np.where(grow, np.minimum(mu * opts.penalty_scale, opts.penalty_max), mu))
    return new


# ---------------------------------------------------------------------------
# projection polish

def _sensitivities(A, B):
    """``S[k] = d x_k / d U`` for the flattened control sequence."""
    T, n, m = B.shape
    S = np.zeros((T + 1, n, T * m))
    for k in range(T):
        S[k + 1] = A[k] @ S[k]
        S[k + 1][:, k * m:(k + 1) * m] += B[k]
    return S


def _active_jacobian(ocp, X, U, act_s, act_t):
    """Total derivative of the active rows with respect to the flattened controls."""
    T = U.shape[0]
    cs = ocp.constraints
    ks = np.arange(T)
    A, B = ocp.dynamics.jacobians(X[:-1], U)
    S = _sensitivities(A, B)
    rows = []
    if act_s is not None:
        Gx, Gu = cs.stage_jacobians(X[:-1], U, ks)
        J = np.einsum("krn,knp->krp", Gx, S[:-1])
        for k in range(T):
            J[k][:, k * ocp.m:(k + 1) * ocp.m] += Gu[k]
        rows.append(J[act_s])
    if act_t is not None:
        GT = cs.terminal_jacobian(X[-1], T)
        rows.append((GT @ S[-1])[act_t])
    return np.concatenate(rows, axis=0) if rows else np.zeros((0, T * ocp.m))


def _active_residual(ocp, X, U, active_stage, active_term, backoff=0.0):
    """Active rows of ``g``; inequality rows are shifted by ``backoff`` so
    that zeroing the residual lands strictly inside the feasible set."""
    T = U.shape[0]
    cs = ocp.constraints
    ks = np.arange(T)
    parts = []
    if active_stage is not None:
        g = cs.stage_values(X[:-1], U, ks) + backoff * ~np.broadcast_to(cs.stage_is_eq, (T, cs.num_stage_rows))
        parts.append(g[active_stage])
    if active_term is not None:
        g = cs.terminal_values(X[-1], T) + backoff * ~cs.terminal_is_eq
        parts.append(g[active_term])
    return np.concatenate(parts) if parts else np.zeros(0)


def _max_violation(ocp, X, U):
    cs = ocp.constraints
    T = U.shape[0]
    v = 0.0
    if cs.num_stage_rows:
        g = cs.stage_values(X[:-1], U, np.arange(T))
        v = max(v, float(cs.violation(g, cs.stage_is_eq).max()))
    if cs.num_terminal_rows:
        gT = cs.terminal_values(X[-1], T)
        v = max(v, float(cs.violation(gT, cs.terminal_is_eq).max()))
    return v


def _active_masks(ocp, X, U, prev_s=None, prev_t=None, tol=0.0):
    """Equality rows, rows with ``g > tol``, and any previously active rows."""
    cs = ocp.constraints
    T = U.shape[0]
    act_s = act_t = None
    if cs.num_stage_rows:
        g = cs.stage_values(X[:-1], U, np.arange(T))
        act_s = cs.stage_is_eq[None, :] | (g > tol)
        if prev_s is not None:
            act_s |= prev_s
    if cs.num_terminal_rows:
        gT = cs.terminal_values(X[-1], T)
        act_t = cs.terminal_is_eq | (gT > tol)
        if prev_t is not None:
            act_t |= prev_t
    return act_s, act_t


def _drop_uncontrollable(J, act_s, act_t):
    """Remove active rows whose control Jacobian vanishes."""
    keep = np.linalg.norm(J, axis=1) > 1e-12
    n_s = 0
    if act_s is not None:
        n_s = int(act_s.sum())
        flat = act_s.ravel().copy()
        idx = np.flatnonzero(flat)
        flat[idx[~keep[:n_s]]] = False
        act_s = flat.reshape(act_s.shape)
    if act_t is not None:
        act_t = act_t.copy()
        idx = np.flatnonzero(act_t)
        act_t[idx[~keep[n_s:]]] = False
    return act_s, act_t, J[keep]


def _metric_factor(ocp, X, U, mult=None):
    """Cholesky factor of the condensed Lagrangian Hessian in control space.

    Constraint Jacobians enter with the current multipliers only through
    their curvature terms. A ridge keeps the factor positive definite.
    """
    T, m = U.shape
    ks = np.arange(T)
    A, B = ocp.dynamics.jacobians(X[:-1], U)
    S = _sensitivities(A, B)
    _, _, lxx, luu, lux = (np.array(a, dtype=float) for a in ocp.cost_expansion(X[:-1], U, ks))
    _, Vxx = ocp.terminal_expansion(X[-1])
    Vxx = np.array(Vxx, dtype=float)
    cs = ocp.constraints
    if mult is not None and cs.has_curvature:
        if cs.num_stage_rows:
            w = np.where(cs.stage_is_eq, mult.stage, np.maximum(mult.stage, 0.0))
            hxx, huu, hux = cs.stage_curvature(X[:-1], U, ks, w)
            lxx, luu, lux = lxx + hxx, luu + huu, lux + hux
        if cs.num_terminal_rows:
            wT = np.where(cs.terminal_is_eq, mult.terminal, np.maximum(mult.terminal, 0.0))
            Vxx = Vxx + cs.terminal_curvature(X[-1], T, wT)
    H = np.tensordot(S[:-1], lxx @ S[:-1], axes=([0, 1], [0, 1])) + S[-1].T @ Vxx @ S[-1]
    for k in range(T):
        sl = slice(k * m, (k + 1) * m)
        H[sl, sl] += luu[k]
        cross = lux[k] @ S[k]
        H[sl] += cross
        H[:, sl] += cross.T
    H = 0.5 * (H + H.T)
    ridge = 1e-8 * max(1.0, float(np.max(np.abs(np.diag(H)))))
    for _ in range(20):
        try:
            return cho_factor(H + ridge * np.eye(T * m))
        except np.linalg.LinAlgError:
            ridge *= 10.0
    return cho_factor(np.eye(T * m))


def projection_polish(ocp, X, U, opts=None, multipliers=None):
    """Project an AL iterate onto the manifold of its active constraints.

    The active set starts as the equality rows plus the violated rows and
    grows whenever a Gauss-Newton step violates another row. Rows the AL
    left slack stay free, so the projection moves the iterate only as far
    as feasibility requires. Rows the controls cannot influence are
    dropped. Each step is the smallest control correction, measured in
    the metric of the reduced Lagrangian Hessian, that zeroes the
    linearized active residual; the induced gradient change then lies in
    the span of the active constraint gradients and the multiplier refit
    absorbs it. Active inequality rows are driven to ``-polish_tol``
    rather than zero, so the stopping band sits on the feasible side.
    Steps backtrack on the residual. Returns ``(X, U, info)``; the input
    comes back unchanged when no improvement is found, and ``info["warning"]`` is set when the active
    Jacobian is rank deficient.
    """
    opts = opts or SolverOptions()
    info = {"steps": 0, "active_rows": 0, "warning": None, "improved": False,
            "active_stage": None, "active_terminal": None}
    base_viol = _max_violation(ocp, X, U)
    act_s, act_t = _active_masks(ocp, X, U)
    act_s, act_t, J = _drop_uncontrollable(_active_jacobian(ocp, X, U, act_s, act_t), act_s, act_t)
    if J.shape[0] == 0:
        return X, U, info

    metric = _metric_factor(ocp, X, U, multipliers)
    best = (X, U, base_viol, act_s, act_t)
    Xc, Uc = X, U
    for it in range(opts.polish_max_iter):
        r = _active_residual(ocp, Xc, Uc, act_s, act_t, opts.polish_tol)
        if np.max(np.abs(r), initial=0.0) <= opts.polish_tol and _max_violation(ocp, Xc, Uc) <= opts.polish_tol:
            break
        J = _active_jacobian(ocp, Xc, Uc, act_s, act_t)
        if J.shape[0] > J.shape[1]:
            info["warning"] = "rank-deficient active constraint Jacobian"
            break
        sv = np.linalg.svd(J, compute_uv=False)
        if sv.size == 0 or sv[-1] <= 1e-10 * max(sv[0], 1.0):
            info["warning"] = "rank-deficient active constraint Jacobian"
            break
        HiJt = cho_solve(metric, J.T)
        step = -HiJt @ np.linalg.solve(J @ HiJt, r)
        rnorm = np.max(np.abs(r))
        accepted = False
        alpha = 1.0
        while alpha >= 1e-3:
            Un = Uc + alpha * step.reshape(Uc.shape)
            try:
                Xn = ocp.rollout(Un)
            except DivergenceError:
                alpha *= 0.5
                continue
            if np.max(np.abs(_active_residual(ocp, Xn, Un, act_s, act_t, opts.polish_tol))) < rnorm:
                accepted = True
                break
            alpha *= 0.5
        info["steps"] = it + 1
        if not accepted:
            break
        Xc, Uc = Xn, Un
        viol = _max_violation(ocp, Xc, Uc)
        if viol < best[2]:
            best = (Xc, Uc, viol, act_s, act_t)
        # rows violated by the step join the active set
        act_s, act_t = _active_masks(ocp, Xc, Uc, act_s, act_t)
        act_s, act_t, _ = _drop_uncontrollable(_active_jacobian(ocp, Xc, Uc, act_s, act_t), act_s, act_t)

    info["active_rows"] = int(sum(int(a.sum()) for a in (best[3], best[4]) if a is not None))
    info["active_stage"], info["active_terminal"] = best[3], best[4]
    if best[2] < base_viol:
        info["improved"] = True
        return best[0], best[1], info
    return X, U, info


def control_stationarity(ocp, X, U, mult):
    """``dP/du_k + B_k' xi_k + Gu_k' lambda_k`` with costates from the adjoint sweep."""
    T = U.shape[0]
    ks = np.arange(T)
    _, B = ocp.dynamics.jacobians(X[:-1], U)
    lu = np.array(ocp.cost_expansion(X[:-1], U, ks)[1], dtype=float)
    xi = recover_costates(ocp, X, U, mult)
    out = lu + np.einsum("kji,kj->ki", B, xi)
    cs = ocp.constraints
    if cs.num_stage_rows:
        _, Gu = cs.stage_jacobians(X[:-1], U, ks)
        out += np.einsum("kr,krm->km", mult.stage, Gu)
    return out


def refit_multipliers(ocp, X, U, mult, act_s, act_t):
    """Least-squares multipliers of the active rows at a projected point.

    Minimizes the control-stationarity residual over multipliers supported
    on the active rows (nonnegative on inequality rows). The fit replaces
    ``mult`` only when it lowers the residual.
    """
    cs = ocp.constraints
    T = U.shape[0]
    zero = MultiplierState(
        np.zeros_like(mult.stage), mult.stage_penalty, np.zeros_like(mult.terminal), mult.terminal_penalty
    )
    J = _active_jacobian(ocp, X, U, act_s, act_t)
    if J.shape[0] == 0:
        return mult
    grad = control_stationarity(ocp, X, U, zero).ravel()
    eq = []
    if act_s is not None:
        eq.append(np.broadcast_to(cs.stage_is_eq, (T, cs.num_stage_rows))[act_s])
    if act_t is not None:
        eq.append(cs.terminal_is_eq[act_t])
    eq = np.concatenate(eq)
    lower = np.where(eq, -np.inf, 0.0)
    fit = lsq_linear(J.T, -grad, bounds=(lower, np.full(eq.size, np.inf)), method="bvls")
    new = zero.copy()
    n_s = 0
    if act_s is not None:
        n_s = int(act_s.sum())
        new.stage[act_s] = fit.x[:n_s]
    if act_t is not None:
        new.terminal[act_t] = fit.x[n_s:]
    old_res = np.max(np.abs(control_stationarity(ocp, X, U, mult)))
    new_res = np.max(np.abs(control_stationarity(ocp, X, U, new)))
    return new if new_res < old_res else mult


# ---------------------------------------------------------------------------
# costates

def recover_costates(ocp, X, U, mult):
    """Adjoint sweep for the dynamics multipliers ``xi_0..xi_{T-1}``.

    ``xi_{T-1} = dR/dx_T + G_T' nu_T`` and
    ``xi_{k-1} = dP/dx_k + A_k' xi_k + Gx_k' lambda_k``.
    """
    T = U.shape[0]
    ks = np.arange(T)
    A, _ = ocp.dynamics.jacobians(X[:-1], U)
    lx = ocp.cost_expansion(X[:-1], U, ks)[0]
    Vx = np.array(ocp.terminal_expansion(X[-1])[0], dtype=float)
    cs = ocp.constraints
    if cs.num_terminal_rows:
        Vx = Vx + cs.terminal_jacobian(X[-1], T).T @ mult.terminal
    gx = np.array(lx, dtype=float)
    if cs.num_stage_rows:
        Gx, _ = cs.stage_jacobians(X[:-1], U, ks)
        gx = gx + np.einsum("kr,krn->kn", mult.stage, Gx)
    xi = np.zeros((T, ocp.n))
    xi[T - 1] = Vx
    for k in range(T - 1, 0, -1):
        xi[k - 1] = gx[k] + A[k].T @ xi[k]
    return xi


# ---------------------------------------------------------------------------
# main loop

def _initial_infeasibility(ocp, X, U, tol):
    """Largest violation at stage 0 among rows the first control cannot affect."""
    cs = ocp.constraints
    if not cs.num_stage_rows:
        return 0.0
    g = cs.stage_values(X[:1], U[:1], np.arange(1))[0]
    _, Gu = cs.stage_jacobians(X[:1], U[:1], np.arange(1))
    fixed = np.linalg.norm(Gu[0], axis=1) == 0
    viol = cs.violation(g, cs.stage_is_eq)[fixed]
    return float(viol.max()) if viol.size else 0.0


def _inner(ocp, X, U, mult, opts, reg, deadline):
    J = augmented_objective(ocp, X, U, mult)
    if not np.isfinite(J):
        raise DivergenceError("non-finite augmented objective", trace=[J])
    iters = 0
    reg_increases = 0
    for _ in range(opts.max_inner):
        if deadline is not None and time.perf_counter() > deadline:
            break
        iters += 1
        exp = expand(ocp, X, U, mult)
        bp = backward_pass(exp, reg, opts.reg_max, opts.reg_factor)
        reg_increases += bp.retries
        reg = bp.regularization
        scale_u = 1.0 + np.max(np.abs(U), initial=0.0)
        if np.max(np.abs(bp.feedforward), initial=0.0) <= 1e-12 * scale_u:
            break
        Xn, Un, Jn, alpha = forward_pass(ocp, X, U, bp.feedforward, bp.gains, mult, J, opts)
        if alpha == 0.0:
            reg = reg * opts.reg_factor
            reg_increases += 1
            if reg > opts.reg_max:
                break
            continue
        decrease = J - Jn
        step_size = alpha * np.max(np.abs(bp.feedforward), initial=0.0) / scale_u
        X, U = Xn, Un
        reg = max(reg / opts.reg_factor, opts.reg_min)
        if not np.isfinite(Jn):
            raise DivergenceError("non-finite augmented objective", trace=[J, Jn])
        J = Jn
        # a small decrease alone can be a slow stretch; also require a small step
        if decrease <= opts.cost_tol * (1.0 + abs(J)) and step_size <= opts.gradient_tol:
            break
    return X, U, J, iters, reg, reg_increases


def solve(ocp, opts=None, init=None, init_multipliers=None):
    """Minimize the potential OCP with augmented-Lagrangian iLQR.

    Parameters
    ----------
    ocp : PotentialOCP
    opts : SolverOptions, optional
    init : array (T, m), optional
        Initial control sequence (zeros by default).
    init_multipliers : MultiplierState, optional
        Warm-start multipliers in this OCP's row layout. Penalties set to
        None restart from ``opts.penalty_init``.

    Returns
    -------
    SolveResult
        ``converged`` is True iff the final max violation is within
        ``opts.constraint_tol``. When the iteration budget runs out the
        least-violating outer iterate is returned with ``converged=False``.
    """
    opts = opts or SolverOptions()
    t0 = time.perf_counter()
    deadline = None if opts.time_budget is None else t0 + opts.time_budget
    T, m = ocp.T, ocp.m
    U = np.zeros((T, m)) if init is None else np.array(init, dtype=float).reshape(T, m)
    X = ocp.rollout(U)
    cs = ocp.constraints
    mult = MultiplierState.initial(T, cs.num_stage_rows, cs.num_terminal_rows, opts.penalty_init)
    if init_multipliers is not None:
        mult.stage[:] = init_multipliers.stage
        mult.terminal[:] = init_multipliers.terminal
        if init_multipliers.stage_penalty is not None:
            mult.stage_penalty[:] = np.clip(init_multipliers.stage_penalty, opts.penalty_init, opts.penalty_max)
        if init_multipliers.terminal_penalty is not None:
            mult.terminal_penalty[:] = np.clip(init_multipliers.terminal_penalty, opts.penalty_init, opts.penalty_max)
    ks = np.arange(T)

    history = []
    inner_total = 0
    reg = opts.reg_init
    reg_increases = 0
    status = "max_outer"
    converged = False
    best = None

    stuck = _initial_infeasibility(ocp, X, U, opts.constraint_tol)
    if stuck > opts.constraint_tol:
        status = "infeasible_initial_state"
        best = (X, U, mult, _max_violation(ocp, X, U))
        outer = 0
    else:
        for outer in range(1, opts.max_outer + 1):
            X, U, J_aug, iters, reg, inc = _inner(ocp, X, U, mult, opts, reg, deadline)
            inner_total += iters
            reg_increases += inc
            g = cs.stage_values(X[:-1], U, ks) if cs.num_stage_rows else np.zeros((T, 0))
            gT = cs.terminal_values(X[-1], T) if cs.num_terminal_rows else np.zeros(0)
            viol = _max_violation(ocp, X, U)
            mult = update_multipliers(mult, g, gT, cs.stage_is_eq, cs.terminal_is_eq, opts)
            history.append(
                {
                    "outer": outer,
                    "objective": ocp.objective(X, U),
                    "augmented": J_aug,
                    "violation": viol,
                    "max_penalty": float(
                        max(np.max(mult.stage_penalty, initial=0.0), np.max(mult.terminal_penalty, initial=0.0))
                    ),
                    "inner_iterations": iters,
                }
            )
            if best is None or viol <= best[3]:
                best = (X, U, mult, viol)
            if viol <= opts.constraint_tol:
                converged = True
                status = "converged"
                break
            if deadline is not None and time.perf_counter() > deadline:
                status = "time_budget"
                break

    if converged:
        X_fin, U_fin, mult_fin = X, U, mult
    else:
        X_fin, U_fin, mult_fin = best[0], best[1], best[2]

    polished = False
    polish_warning = None
    if converged and opts.polish:
        Xp, Up, info = projection_polish(ocp, X_fin, U_fin, opts, mult_fin)
        polish_warning = info["warning"]
        if polish_warning:
            warnings.warn(f"projection polish skipped: {polish_warning}", RuntimeWarning, stacklevel=2)
        if info["improved"]:
            X_fin, U_fin, polished = Xp, Up, True
            mult_fin = refit_multipliers(ocp, X_fin, U_fin, mult_fin, info["active_stage"], info["active_terminal"])

    mult_fin = mult_fin.copy()
    mult_fin.costates = recover_costates(ocp, X_fin, U_fin, mult_fin)
    viol = _max_violation(ocp, X_fin, U_fin)
    U_full = ocp.full_controls(U_fin)
    X_full = simulate(ocp.spec.dynamics, ocp.spec.x0, U_full)
    traj = evaluate_trajectory(ocp.spec, X_full, U_full)
    return SolveResult(
        trajectory=traj,
        states=X_fin,
        controls=U_fin,
        multipliers=mult_fin,
        converged=bool(converged and viol <= opts.constraint_tol),
        status=status,
        outer_iterations=len(history),
        inner_iterations=inner_total,
        max_violation=viol,
        objective=ocp.objective(X_fin, U_fin),
        solve_time_ms=1000.0 * (time.perf_counter() - t0),
        history=history,
        polished=polished,
        polish_warning=polish_warning,
        regularization_increases=reg_increases,
    )
