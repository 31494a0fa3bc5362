"""Reference computations written independently of the package internals.

Nothing here imports solver code; the oracles only share the problem
definition (dynamics matrices, weights, goals) with the code under test.
"""

import itertools

import numpy as np
from scipy.linalg import block_diag


def riccati_tracking(A, B, Q, R, Qf, goal, x0, T, costates=False):
    """Optimal controls of ``sum 1/2|x_k - g|_Q^2 + 1/2|u_k|_R^2 + 1/2|x_T - g|_Qf^2``.

    Value function ``V_k(x) = 1/2 x'P_k x + p_k'x + const``; the backward
    recursion carries the affine term produced by the goal offset. With
    ``costates`` the value gradients ``grad V_{k+1}(x_{k+1})`` along the
    optimal path are returned as well; they are the dynamics multipliers.
    """
    P = Qf.copy()
    p = -Qf @ goal
    gains = []
    values = [(P, p)]
    for _ in range(T):
        H = R + B.T @ P @ B
        K = np.linalg.solve(H, B.T @ P @ A)
        kff = np.linalg.solve(H, B.T @ p)
        gains.append((K, kff))
        Acl = A - B @ K
        P = Q + A.T @ P @ Acl
        P = 0.5 * (P + P.T)
        p = -Q @ goal + Acl.T @ p
        values.append((P, p))
    gains.reverse()
    values.reverse()
    x = np.array(x0, dtype=float)
    U = np.zeros((T, B.shape[1]))
    xi = np.zeros((T, A.shape[0]))
    for k, (K, kff) in enumerate(gains):
        U[k] = -K @ x - kff
        x = A @ x + B @ U[k]
        Pn, pn = values[k + 1]
        xi[k] = Pn @ x + pn
    return (U, xi) if costates else U


def lqr_gains(A, B, Q, R, Qf, T):
    """Time-varying gains ``K_k`` of ``u_k = -K_k x_k`` from the textbook recursion."""
    P = Qf.copy()
    gains = []
    for _ in range(T):
        K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        gains.append(K)
        P = Q + A.T @ P @ (A - B @ K)
        P = 0.5 * (P + P.T)
    return gains[::-1]


def condensed_matrices(A, B, x0, T):
    """``X_stack = Phi x0 + Gamma U_stack`` for ``x_1..x_T``."""
    n, m = B.shape
    Phi = np.zeros((T * n, n))
    Gam = np.zeros((T * n, T * m))
    Ak = np.eye(n)
    for k in range(T):
        Ak = A @ Ak
        Phi[k * n:(k + 1) * n] = Ak
        for j in range(k + 1):
            Gam[k * n:(k + 1) * n, j * m:(j + 1) * m] = np.linalg.matrix_power(A, k - j) @ B
    return Phi @ x0, Gam


def batch_qp(A, B, Q, R, Qf, goal, x0, T, E=None, e=None):
    """Same tracking problem as one dense QP, with optional ``E U_stack = e``.

    Solved through its KKT system; returns ``(U, multipliers)``.
    """
    n, m = B.shape
    free, Gam = condensed_matrices(A, B, x0, T)
    Qbar = block_diag(*([Q] * (T - 1) + [Qf]))
    Rbar = block_diag(*([R] * T))
    gbar = np.tile(goal, T)
    H = Gam.T @ Qbar @ Gam + Rbar
    f = Gam.T @ Qbar @ (free - gbar)
    if E is None:
        return np.linalg.solve(H, -f).reshape(T, m), np.zeros(0)
    c = E.shape[0]
    K = np.block([[H, E.T], [E, np.zeros((c, c))]])
    sol = np.linalg.solve(K, np.concatenate([-f, e]))
    return sol[:T * m].reshape(T, m), sol[T * m:]


def box_qp_enumerate(H, f, lo, hi):
    """``min 1/2 z'Hz + f'z`` over a box by enumerating active sets (tiny problems only)."""
    d = len(f)
    best = None
    for pattern in itertools.product((0, 1, 2), repeat=d):
        z = np.zeros(d)
        fixed = np.array([p != 0 for p in pattern])
        z[fixed] = [lo[i] if pattern[i] == 1 else hi[i] for i in range(d) if fixed[i]]
        free = ~fixed
        if free.any():
            rhs = -(f[free] + H[np.ix_(free, fixed)] @ z[fixed])
            z[free] = np.linalg.solve(H[np.ix_(free, free)], rhs)
        if np.any(z < lo - 1e-12) or np.any(z > hi + 1e-12):
            continue
        val = 0.5 * z @ H @ z + f @ z
        if best is None or val < best[0]:
            best = (val, z)
    return best[1]


def unicycle_step(x, u, h):
    """Planar unicycle written out by hand."""
    p, q, th = x
    v, w = u
    return np.array([p + h * v * np.cos(th), q + h * v * np.sin(th), th + h * w])


def central_jacobian(fun, z, step=1e-6):
    """Plain central differences with a relative step."""
    z = np.asarray(z, dtype=float)
    f0 = np.atleast_1d(fun(z))
    J = np.zeros((f0.size, z.size))
    for i in range(z.size):
        dz = step * max(1.0, abs(z[i]))
        zp, zm = z.copy(), z.copy()
        zp[i] += dz
        zm[i] -= dz
        J[:, i] = (np.atleast_1d(fun(zp)) - np.atleast_1d(fun(zm))) / (2 * dz)
    return J


def grid_nash(cost_fns, feasible, grids):
    """Pure-strategy Nash profiles of a 2-player game on explicit grids.

    ``cost_fns[i](a, b)`` is player ``i``'s cost for strategies ``a`` (player
    0) and ``b`` (player 1); ``feasible(a, b)`` masks the joint constraint.
    A profile is Nash when no feasible unilateral deviation on the grid
    lowers the deviating player's cost.
    """
    out = []
    for a in grids[0]:
        for b in grids[1]:
            if not feasible(a, b):
                continue
            c0, c1 = cost_fns[0](a, b), cost_fns[1](a, b)
            ok0 = all(cost_fns[0](a2, b) >= c0 - 1e-12 for a2 in grids[0] if feasible(a2, b))
            ok1 = all(cost_fns[1](a, b2) >= c1 - 1e-12 for b2 in grids[1] if feasible(a, b2))
            if ok0 and ok1:
                out.append((a, b))
    return out
