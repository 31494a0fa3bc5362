"""Shared constraint rows ``g(x, u, k) <= 0`` with analytic Jacobians.

Every evaluator is vectorized over a leading time axis: states ``X`` have
shape ``(K, n)`` and controls ``U`` shape ``(K, m)``. Values come back as
``(K, rows)`` and Jacobians as ``(K, rows, n)`` / ``(K, rows, m)``.
Equality rows carry ``kind == "equality"``; the paired-inequality view
``{e <= 0, -e <= 0}`` is produced by :meth:`ConstraintSet.paired_inequalities`.
"""

import itertools

import numpy as np

from potgame._numdiff import fd_jacobian

SMOOTHING = 1e-9

INEQUALITY = "inequality"
EQUALITY = "equality"


def _smooth_norm(diff):
    return np.sqrt(np.sum(diff * diff, axis=-1) + SMOOTHING**2)


class Constraint:
    """One block of constraint rows.

    ``uses_control`` is False for constraints that read only the state;
    those are also evaluated at the terminal state when ``terminal`` is set.
    """

    kind = INEQUALITY
    scope = "joint"
    uses_control = False
    terminal = True
    rows = 1
    agents = ()

    def evaluate(self, X, U=None, ks=None):
        raise NotImplementedError

    def jacobian(self, X, U=None, ks=None):
        raise NotImplementedError

    # Row types whose curvature helps the solver's quadratic model override
    # this; the others are treated by Gauss-Newton (curvature ignored).
    has_curvature = False

    def curvature(self, X, U, ks, weights):
        """``sum_r w_r * hessian(g_r)`` as ``(Hxx (K,n,n), Huu (K,m,m), Hux (K,m,n))``."""
        raise NotImplementedError

    def labels(self):
        base = f"{type(self).__name__}{tuple(self.agents)}"
        if self.rows == 1:
            return [base]
        return [f"{base}[{r}]" for r in range(self.rows)]

    def _zeros(self, X, U):
        K = X.shape[0]
        Gx = np.zeros((K, self.rows, X.shape[1]))
        Gu = None if U is None else np.zeros((K, self.rows, U.shape[1]))
        return Gx, Gu


def _norm_hessian(v):
    """Hessian of the smoothed norm, ``(I - v v' / r^2) / r``, stacked over rows of ``v``."""
    r = _smooth_norm(v)
    d = v.shape[1]
    return (np.eye(d) - np.einsum("ki,kj->kij", v, v) / (r**2)[:, None, None]) / r[:, None, None]


class PairwiseCollision(Constraint):
    """Minimum separation ``-d(p_i, p_j) + d_collision <= 0``."""

    scope = "pairwise"

    def __init__(self, i, j, d_collision, pos_i, pos_j):
        self.agents = (int(i), int(j))
        self.d_collision = float(d_collision)
        self.pos_i = np.asarray(pos_i, dtype=int)
        self.pos_j = np.asarray(pos_j, dtype=int)
        if self.pos_i.shape != self.pos_j.shape:
            raise ValueError("position subspaces of a pair must have equal dimension")

    def evaluate(self, X, U=None, ks=None):
        diff = X[:, self.pos_i] - X[:, self.pos_j]
        return (self.d_collision - _smooth_norm(diff))[:, None]

    def jacobian(self, X, U=None, ks=None):
        Gx, Gu = self._zeros(X, U)
        diff = X[:, self.pos_i] - X[:, self.pos_j]
        unit = diff / _smooth_norm(diff)[:, None]
        Gx[:, 0, self.pos_i] -= unit
        Gx[:, 0, self.pos_j] += unit
        return Gx, Gu


class ControlBound(Constraint):
    """Elementwise ``|u| - bound <= 0`` split as ``u - b <= 0`` and ``-u - b <= 0``."""

    scope = "agent"
    uses_control = True
    terminal = False

    def __init__(self, agent, control_indices, bounds):
        self.agents = (int(agent),)
        self.index = np.asarray(control_indices, dtype=int)
        self.bounds = np.broadcast_to(np.asarray(bounds, dtype=float), self.index.shape).copy()
        self.rows = 2 * self.index.size

    def evaluate(self, X, U=None, ks=None):
        u = U[:, self.index]
        return np.concatenate([u - self.bounds, -u - self.bounds], axis=1)

    def jacobian(self, X, U=None, ks=None):
        Gx, Gu = self._zeros(X, U)
        r = np.arange(self.index.size)
        Gu[:, r, self.index] = 1.0
        Gu[:, r + self.index.size, self.index] = -1.0
        return Gx, Gu


class SpeedLimit(Constraint):
    """Norm bound ``||u_sel|| - max_speed <= 0`` on selected control entries."""

    scope = "agent"
    uses_control = True
    terminal = False

    def __init__(self, agent, control_indices, max_speed):
        self.agents = (int(agent),)
        self.index = np.asarray(control_indices, dtype=int)
        self.max_speed = float(max_speed)

    def evaluate(self, X, U=None, ks=None):
        return (_smooth_norm(U[:, self.index]) - self.max_speed)[:, None]

    def jacobian(self, X, U=None, ks=None):
        Gx, Gu = self._zeros(X, U)
        v = U[:, self.index]
        Gu[:, 0, self.index] = v / _smooth_norm(v)[:, None]
        return Gx, Gu

    has_curvature = True

    def curvature(self, X, U, ks, weights):
        K, n, m = X.shape[0], X.shape[1], U.shape[1]
        v = U[:, self.index]
        H = _norm_hessian(v) * weights[:, 0, None, None]
        Huu = np.zeros((K, m, m))
        Huu[:, self.index[:, None], self.index[None, :]] = H
        return np.zeros((K, n, n)), Huu, np.zeros((K, m, n))


class RodEquality(Constraint):
    """Rigid link ``||p_i - p_j|| - length = 0``."""

    kind = EQUALITY
    scope = "pairwise"

    def __init__(self, i, j, length, pos_i, pos_j):
        self.agents = (int(i), int(j))
        self.length = float(length)
        self.pos_i = np.asarray(pos_i, dtype=int)
        self.pos_j = np.asarray(pos_j, dtype=int)

    def evaluate(self, X, U=None, ks=None):
        diff = X[:, self.pos_i] - X[:, self.pos_j]
        return (_smooth_norm(diff) - self.length)[:, None]

    def jacobian(self, X, U=None, ks=None):
        Gx, Gu = self._zeros(X, U)
        diff = X[:, self.pos_i] - X[:, self.pos_j]
        unit = diff / _smooth_norm(diff)[:, None]
        Gx[:, 0, self.pos_i] += unit
        Gx[:, 0, self.pos_j] -= unit
        return Gx, Gu

    has_curvature = True

    def curvature(self, X, U, ks, weights):
        K, n = X.shape
        m = 0 if U is None else U.shape[1]
        H = _norm_hessian(X[:, self.pos_i] - X[:, self.pos_j]) * weights[:, 0, None, None]
        Hxx = np.zeros((K, n, n))
        pi, pj = self.pos_i, self.pos_j
        Hxx[:, pi[:, None], pi[None, :]] += H
        Hxx[:, pj[:, None], pj[None, :]] += H
        Hxx[:, pi[:, None], pj[None, :]] -= H
        Hxx[:, pj[:, None], pi[None, :]] -= H
        return Hxx, np.zeros((K, m, m)), np.zeros((K, m, n))


class CylinderCollision(Constraint):
    """Keep a point (quadrotor) outside a vertical cylinder attached to another agent.

    The cylinder has axis through the other agent's planar position, is
    centred at its height entry, and spans ``center +- half_height``. The
    row is the negated Euclidean distance from the point to the solid
    cylinder (radial clearance inside the vertical span, distance to the
    nearer cap disc outside it).
    """

    scope = "pairwise"

    def __init__(self, quad, human, radius, half_height, point_index, axis_index, height_index):
        self.agents = (int(quad), int(human))
        self.radius = float(radius)
        self.half_height = float(half_height)
        self.point_index = np.asarray(point_index, dtype=int)
        self.axis_index = np.asarray(axis_index, dtype=int)
        self.height_index = int(height_index)

    def _parts(self, X):
        pt = X[:, self.point_index]
        dxy = pt[:, :2] - X[:, self.axis_index]
        dz = pt[:, 2] - X[:, self.height_index]
        radial = _smooth_norm(dxy)
        vertical = np.sqrt(dz * dz + SMOOTHING**2)
        return dxy, dz, radial, vertical

    def evaluate(self, X, U=None, ks=None):
        _, _, radial, vertical = self._parts(X)
        inside_span = vertical <= self.half_height
        over_r = np.maximum(radial - self.radius, 0.0)
        over_z = vertical - self.half_height
        cap = np.sqrt(over_r**2 + over_z**2 + SMOOTHING**2)
        clearance = np.where(inside_span, radial - self.radius, cap)
        return -clearance[:, None]

    def jacobian(self, X, U=None, ks=None):
        Gx, Gu = self._zeros(X, U)
        dxy, dz, radial, vertical = self._parts(X)
        inside_span = vertical <= self.half_height
        over_r = np.maximum(radial - self.radius, 0.0)
        over_z = vertical - self.half_height
        cap = np.sqrt(over_r**2 + over_z**2 + SMOOTHING**2)

        d_radial = dxy / radial[:, None]
        d_vertical = dz / vertical
        # gradient of the clearance w.r.t. (dxy, dz)
        g_xy = np.where(inside_span[:, None], d_radial, (over_r / cap)[:, None] * d_radial)
        g_z = np.where(inside_span, 0.0, over_z / cap * d_vertical)

        qi, ai = self.point_index, self.axis_index
        Gx[:, 0, qi[:2]] -= g_xy
        Gx[:, 0, ai] += g_xy
        Gx[:, 0, qi[2]] -= g_z
        Gx[:, 0, self.height_index] += g_z
        return Gx, Gu


class AffineConstraint(Constraint):
    """Affine rows ``Cx x + Cu u - b`` (inequality or equality)."""

    def __init__(self, Cx, Cu=None, b=0.0, kind=INEQUALITY, terminal=False, agents=()):
        self.Cx = np.atleast_2d(np.asarray(Cx, dtype=float))
        self.rows = self.Cx.shape[0]
        self.Cu = None if Cu is None else np.atleast_2d(np.asarray(Cu, dtype=float))
        self.b = np.broadcast_to(np.asarray(b, dtype=float), (self.rows,)).copy()
        self.kind = kind
        self.uses_control = self.Cu is not None
        self.terminal = bool(terminal) and not self.uses_control
        self.agents = tuple(agents)

    def evaluate(self, X, U=None, ks=None):
        val = X @ self.Cx.T - self.b
        if self.Cu is not None:
            val = val + U @ self.Cu.T
        return val

    def jacobian(self, X, U=None, ks=None):
        K = X.shape[0]
        Gx = np.broadcast_to(self.Cx, (K,) + self.Cx.shape).copy()
        Gu = None
        if U is not None:
            Gu = np.zeros((K, self.rows, U.shape[1]))
            if self.Cu is not None:
                Gu[:] = self.Cu
        return Gx, Gu


class FunctionConstraint(Constraint):
    """User constraint from a callable ``fun(x, u, k) -> rows``.

    Jacobians are central finite differences unless ``jac(x, u, k)``
    returning ``(Gx, Gu)`` is supplied. State-only constraints receive
    ``u = None``.
    """

    def __init__(self, fun, rows, kind=INEQUALITY, uses_control=True, terminal=False, jac=None, agents=()):
        self.fun = fun
        self.rows = int(rows)
        self.kind = kind
        self.uses_control = bool(uses_control)
        self.terminal = bool(terminal) and not self.uses_control
        self.jac = jac
        self.agents = tuple(agents)

    def evaluate(self, X, U=None, ks=None):
        ks = np.zeros(X.shape[0], dtype=int) if ks is None else ks
        out = np.empty((X.shape[0], self.rows))
        for t in range(X.shape[0]):
            u = U[t] if (U is not None and self.uses_control) else None
            out[t] = self.fun(X[t], u, int(ks[t]))
        return out

    def jacobian(self, X, U=None, ks=None):
        ks = np.zeros(X.shape[0], dtype=int) if ks is None else ks
        Gx, Gu = self._zeros(X, U)
        n = X.shape[1]
        for t in range(X.shape[0]):
            k = int(ks[t])
            if self.jac is not None:
                gx, gu = self.jac(X[t], U[t] if U is not None else None, k)
                Gx[t] = gx
                if Gu is not None and gu is not None:
                    Gu[t] = gu
            elif self.uses_control and U is not None:
                z = np.concatenate([X[t], U[t]])
                J = fd_jacobian(lambda z_: self.fun(z_[:n], z_[n:], k), z)
                Gx[t], Gu[t] = J[:, :n], J[:, n:]
            else:
                Gx[t] = fd_jacobian(lambda x_: self.fun(x_, None, k), X[t])
        return Gx, Gu


class ConstraintSet:
    """Ordered constraint blocks applied at every stage, plus terminal rows.

    Stage rows (``k = 0..T-1``) are all blocks in declaration order;
    terminal rows (``k = T``) are the state-only blocks flagged ``terminal``.
    """

    def __init__(self, constraints=()):
        self.constraints = tuple(constraints)
        self.terminal_constraints = tuple(c for c in self.constraints if c.terminal and not c.uses_control)
        self.stage_is_eq = np.array(
            [c.kind == EQUALITY for c in self.constraints for _ in range(c.rows)], dtype=bool
        )
        self.terminal_is_eq = np.array(
            [c.kind == EQUALITY for c in self.terminal_constraints for _ in range(c.rows)], dtype=bool
        )

    @property
    def num_stage_rows(self):
        return int(self.stage_is_eq.size)

    @property
    def num_terminal_rows(self):
        return int(self.terminal_is_eq.size)

    def __len__(self):
        return len(self.constraints)

    def __iter__(self):
        return iter(self.constraints)

    def stage_labels(self):
        return [lbl for c in self.constraints for lbl in c.labels()]

    def terminal_labels(self):
        return [lbl for c in self.terminal_constraints for lbl in c.labels()]

    def stage_values(self, X, U, ks=None):
        X = np.atleast_2d(X)
        U = np.atleast_2d(U)
        if not self.constraints:
            return np.zeros((X.shape[0], 0))
        return np.concatenate([c.evaluate(X, U, ks) for c in self.constraints], axis=1)

    def stage_jacobians(self, X, U, ks=None):
        X = np.atleast_2d(X)
        U = np.atleast_2d(U)
        K = X.shape[0]
        if not self.constraints:
            return np.zeros((K, 0, X.shape[1])), np.zeros((K, 0, U.shape[1]))
        parts = [c.jacobian(X, U, ks) for c in self.constraints]
        return (
            np.concatenate([p[0] for p in parts], axis=1),
            np.concatenate([p[1] for p in parts], axis=1),
        )

    def terminal_values(self, x, k=None):
        """Terminal rows at ``x``; a 2-D ``x`` evaluates a batch of terminal states."""
        x = np.asarray(x, dtype=float)
        X = np.atleast_2d(x)
        if not self.terminal_constraints:
            out = np.zeros((X.shape[0], 0))
        else:
            ks = None if k is None else np.full(X.shape[0], k)
            out = np.concatenate([c.evaluate(X, None, ks) for c in self.terminal_constraints], axis=1)
        return out if x.ndim == 2 else out[0]

    def terminal_jacobian(self, x, k=None):
        X = np.atleast_2d(x)
        if not self.terminal_constraints:
            return np.zeros((0, X.shape[1]))
        ks = None if k is None else np.array([k])
        return np.concatenate([c.jacobian(X, None, ks)[0] for c in self.terminal_constraints], axis=1)[0]

    @property
    def has_curvature(self):
        return any(c.has_curvature for c in self.constraints)

    def stage_curvature(self, X, U, ks, weights):
        """Weighted constraint Hessians summed over rows (only rows that provide curvature)."""
        K, n, m = X.shape[0], X.shape[1], U.shape[1]
        Hxx, Huu, Hux = np.zeros((K, n, n)), np.zeros((K, m, m)), np.zeros((K, m, n))
        offset = 0
        for c in self.constraints:
            if c.has_curvature:
                hxx, huu, hux = c.curvature(X, U, ks, weights[:, offset:offset + c.rows])
                Hxx += hxx
                Huu += huu
                Hux += hux
            offset += c.rows
        return Hxx, Huu, Hux

    def terminal_curvature(self, x, k, weights):
        X = np.atleast_2d(x)
        n = X.shape[1]
        H = np.zeros((n, n))
        offset = 0
        ks = None if k is None else np.array([k])
        for c in self.terminal_constraints:
            if c.has_curvature:
                H += c.curvature(X, None, ks, weights[None, offset:offset + c.rows])[0][0]
            offset += c.rows
        return H

    @staticmethod
    def paired_inequalities(values, is_eq):
        """Model view: each equality row ``e`` becomes the pair ``e <= 0, -e <= 0``."""
        values = np.asarray(values, dtype=float)
        return np.concatenate([values, -values[..., is_eq]], axis=-1)

    @staticmethod
    def violation(values, is_eq):
        """Elementwise violation ``max(g, 0)`` (``|e|`` on equality rows)."""
        values = np.asarray(values, dtype=float)
        return np.where(is_eq, np.abs(values), np.maximum(values, 0.0))


# ---------------------------------------------------------------------------
# descriptor construction

def _resolve_agents(spec_agents, num_agents, where):
    if spec_agents == "all":
        return list(range(num_agents))
    agents = [int(a) for a in spec_agents]
    for a in agents:
        if not 0 <= a < num_agents:
            raise ValueError(f"{where}: agent index {a} out of range for {num_agents} agents")
    return agents


def _position_index(dynamics, agent, dims=None, where=""):
    model = dynamics.models[agent]
    local = tuple(model.position_indices)
    if dims is not None:
        if dims > len(local):
            raise ValueError(f"{where}: agent {agent} has only {len(local)} position coordinates")
        local = local[:dims]
    offset = dynamics.state_slices[agent].start
    for idx in local:
        if not 0 <= idx < model.state_dim:
            raise ValueError(f"{where}: position offset {idx} outside agent {agent}'s state")
    return [offset + idx for idx in local]


def build_constraints(descriptors, dynamics):
    """Build a :class:`ConstraintSet` from declarative descriptors.

    Rows appear in declaration order; pairwise descriptors expand over
    ``i < j``. Recognized ``type`` values: ``collision``, ``control_bound``,
    ``speed_limit``, ``rod``, ``cylinder``.
    """
    N = dynamics.num_agents
    out = []
    for pos, desc in enumerate(descriptors):
        where = f"constraints[{pos}]"
        kind = desc.get("type")
        if kind == "collision":
            agents = _resolve_agents(desc.get("agents", "all"), N, where)
            dims = desc.get("position_dims")
            for i, j in itertools.combinations(sorted(agents), 2):
                d = dims or min(len(dynamics.models[i].position_indices), len(dynamics.models[j].position_indices))
                out.append(
                    PairwiseCollision(
                        i, j, desc["d_collision"],
                        _position_index(dynamics, i, d, where), _position_index(dynamics, j, d, where),
                    )
                )
        elif kind == "control_bound":
            agents = _resolve_agents(desc.get("agents", "all"), N, where)
            for a in agents:
                m_a = dynamics.models[a].control_dim
                local = desc.get("indices", list(range(m_a)))
                if any(not 0 <= idx < m_a for idx in local):
                    raise ValueError(f"{where}: control index out of range for agent {a}")
                bound = np.asarray(desc["bound"], dtype=float)
                if bound.ndim and bound.size != len(local):
                    raise ValueError(f"{where}: bound has {bound.size} entries, expected {len(local)}")
                base = dynamics.control_slices[a].start
                out.append(ControlBound(a, [base + idx for idx in local], bound))
        elif kind == "speed_limit":
            agents = _resolve_agents(desc.get("agents", "all"), N, where)
            for a in agents:
                m_a = dynamics.models[a].control_dim
                local = desc.get("indices", list(range(m_a)))
                if any(not 0 <= idx < m_a for idx in local):
                    raise ValueError(f"{where}: control index out of range for agent {a}")
                base = dynamics.control_slices[a].start
                out.append(SpeedLimit(a, [base + idx for idx in local], desc["max_speed"]))
        elif kind == "rod":
            i, j = _resolve_agents(desc["agents"], N, where)
            d = desc.get("position_dims")
            out.append(
                RodEquality(
                    i, j, desc["length"],
                    _position_index(dynamics, i, d, where), _position_index(dynamics, j, d, where),
                )
            )
        elif kind == "cylinder":
            quads = _resolve_agents(desc["quadrotors"], N, where)
            humans = _resolve_agents(desc["humans"], N, where)
            height_local = desc.get("height_index", 2)
            for q in quads:
                point = _position_index(dynamics, q, 3, where)
                for hmn in humans:
                    if not 0 <= height_local < dynamics.models[hmn].state_dim:
                        raise ValueError(f"{where}: height offset outside agent {hmn}'s state")
                    axis = _position_index(dynamics, hmn, 2, where)
                    height = dynamics.state_slices[hmn].start + height_local
                    out.append(
                        CylinderCollision(q, hmn, desc["radius"], desc["half_height"], point, axis, height)
                    )
        else:
            raise ValueError(f"{where}: unknown constraint type {kind!r}")
    return ConstraintSet(out)
