"""Discrete-time agent models and their block-diagonal composition.

All models are explicit Euler discretizations and accept arrays with
arbitrary leading batch dimensions, so a whole trajectory can be
linearized with one call. Headings are never wrapped.
"""

import numpy as np

from potgame._numdiff import fd_jacobian


class AgentModel:
    """Base class for a single agent's discrete-time model.

    Subclasses implement ``step``; ``jacobians`` falls back to central
    finite differences when not overridden.
    """

    model_id = "custom"
    state_dim = 0
    control_dim = 0
    position_indices = ()
    heading_index = None

    def step(self, x, u, h):
        raise NotImplementedError

    def jacobians(self, x, u, h):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        xb = np.broadcast_to(x, batch + (self.state_dim,)).reshape(-1, self.state_dim)
        ub = np.broadcast_to(u, batch + (self.control_dim,)).reshape(-1, self.control_dim)
        n, m = self.state_dim, self.control_dim
        A = np.empty((xb.shape[0], n, n))
        B = np.empty((xb.shape[0], n, m))
        for b in range(xb.shape[0]):
            z = np.concatenate([xb[b], ub[b]])
            J = fd_jacobian(lambda z_: self.step(z_[:n], z_[n:], h), z)
            A[b], B[b] = J[:, :n], J[:, n:]
        return A.reshape(batch + (n, n)), B.reshape(batch + (n, m))

    def key(self):
        """Hashable identity used to batch agents sharing a model."""
        return (type(self).__name__,)

    def __repr__(self):
        return f"{type(self).__name__}()"


class UnicycleModel(AgentModel):
    """Planar unicycle: state ``[p, q, theta]``, control ``[v, omega]``."""

    model_id = "unicycle"
    state_dim = 3
    control_dim = 2
    position_indices = (0, 1)
    heading_index = 2

    def step(self, x, u, h):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        theta = x[..., 2]
        v = u[..., 0]
        out = np.empty(np.broadcast_shapes(x.shape, u.shape[:-1] + (3,)))
        out[..., 0] = x[..., 0] + h * v * np.cos(theta)
        out[..., 1] = x[..., 1] + h * v * np.sin(theta)
        out[..., 2] = theta + h * u[..., 1]
        return out

    def jacobians(self, x, u, h):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        theta = x[..., 2]
        v = u[..., 0]
        A = np.zeros(batch + (3, 3))
        A[..., 0, 0] = A[..., 1, 1] = A[..., 2, 2] = 1.0
        A[..., 0, 2] = -h * v * np.sin(theta)
        A[..., 1, 2] = h * v * np.cos(theta)
        B = np.zeros(batch + (3, 2))
        B[..., 0, 0] = h * np.cos(theta)
        B[..., 1, 0] = h * np.sin(theta)
        B[..., 2, 1] = h
        return A, B


class IntegratorModel(AgentModel):
    """Single integrator ``x+ = x + h u`` of arbitrary dimension."""

    model_id = "integrator"

    def __init__(self, dim=1):
        self.state_dim = int(dim)
        self.control_dim = int(dim)
        self.position_indices = tuple(range(min(self.state_dim, 3)))

    def step(self, x, u, h):
        return np.asarray(x, dtype=float) + h * np.asarray(u, dtype=float)

    def jacobians(self, x, u, h):
        batch = np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1])
        eye = np.eye(self.state_dim)
        return (
            np.broadcast_to(eye, batch + eye.shape).copy(),
            np.broadcast_to(h * eye, batch + eye.shape).copy(),
        )

    def key(self):
        return (type(self).__name__, self.state_dim)

    def __repr__(self):
        return f"IntegratorModel(dim={self.state_dim})"


class Integrator6DOFModel(IntegratorModel):
    """Kinematic quadrotor ``[px, py, pz, phi, theta, psi]`` driven by velocity commands.

    The first three control entries are linear velocities, the last three
    angular rates.
    """

    model_id = "integrator6"
    heading_index = 5

    def __init__(self):
        super().__init__(6)
        self.position_indices = (0, 1, 2)

    def __repr__(self):
        return "Integrator6DOFModel()"


class HumanUnicycleModel(AgentModel):
    """Unicycle with a frozen height entry: state ``[px, py, r, theta]``."""

    model_id = "human_unicycle"
    state_dim = 4
    control_dim = 2
    position_indices = (0, 1)
    heading_index = 3

    def step(self, x, u, h):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        theta = x[..., 3]
        v = u[..., 0]
        out = np.empty(np.broadcast_shapes(x.shape, u.shape[:-1] + (4,)))
        out[..., 0] = x[..., 0] + h * v * np.cos(theta)
        out[..., 1] = x[..., 1] + h * v * np.sin(theta)
        out[..., 2] = x[..., 2]
        out[..., 3] = theta + h * u[..., 1]
        return out

    def jacobians(self, x, u, h):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        theta = x[..., 3]
        v = u[..., 0]
        A = np.zeros(batch + (4, 4))
        for i in range(4):
            A[..., i, i] = 1.0
        A[..., 0, 3] = -h * v * np.sin(theta)
        A[..., 1, 3] = h * v * np.cos(theta)
        B = np.zeros(batch + (4, 2))
        B[..., 0, 0] = h * np.cos(theta)
        B[..., 1, 0] = h * np.sin(theta)
        B[..., 3, 1] = h
        return A, B


class LinearModel(AgentModel):
    """Time-invariant linear model ``x+ = A x + B u`` (independent of ``h``)."""

    model_id = "linear"

    def __init__(self, A, B):
        self.A = np.array(A, dtype=float)
        self.B = np.array(B, dtype=float)
        self.state_dim, self.control_dim = self.B.shape
        self.position_indices = tuple(range(min(self.state_dim, 2)))

    def step(self, x, u, h):
        return np.asarray(x, dtype=float) @ self.A.T + np.asarray(u, dtype=float) @ self.B.T

    def jacobians(self, x, u, h):
        batch = np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1])
        return (
            np.broadcast_to(self.A, batch + self.A.shape).copy(),
            np.broadcast_to(self.B, batch + self.B.shape).copy(),
        )

    def key(self):
        return ("LinearModel", id(self))

    def __repr__(self):
        return f"LinearModel(n={self.state_dim}, m={self.control_dim})"


MODEL_REGISTRY = {
    "integrator": IntegratorModel,
    "unicycle": UnicycleModel,
    "integrator6": Integrator6DOFModel,
    "human_unicycle": HumanUnicycleModel,
}


def make_model(model_id, **kwargs):
    try:
        cls = MODEL_REGISTRY[model_id]
    except KeyError:
        raise ValueError(f"unknown model id {model_id!r}; expected one of {sorted(MODEL_REGISTRY)}")
    return cls(**kwargs)


class JointDynamics:
    """Block-diagonal stack of agent models sharing one step size.

    Agent ``i`` occupies ``state_slices[i]`` of the joint state and
    ``control_slices[i]`` of the joint control.
    """

    def __init__(self, models, step_size):
        self.models = tuple(models)
        self.step_size = float(step_size)
        self.state_dims = tuple(mdl.state_dim for mdl in self.models)
        self.control_dims = tuple(mdl.control_dim for mdl in self.models)
        xo = np.concatenate([[0], np.cumsum(self.state_dims)]).astype(int)
        uo = np.concatenate([[0], np.cumsum(self.control_dims)]).astype(int)
        self.state_slices = tuple(slice(xo[i], xo[i + 1]) for i in range(len(self.models)))
        self.control_slices = tuple(slice(uo[i], uo[i + 1]) for i in range(len(self.models)))
        self.n = int(xo[-1])
        self.m = int(uo[-1])

        # agents sharing a model are stepped together through fancy indexing
        groups = {}
        for i, mdl in enumerate(self.models):
            groups.setdefault(mdl.key(), []).append(i)
        self._groups = []
        for members in groups.values():
            xi = np.array([np.arange(self.state_slices[i].start, self.state_slices[i].stop) for i in members])
            ui = np.array([np.arange(self.control_slices[i].start, self.control_slices[i].stop) for i in members])
            self._groups.append((self.models[members[0]], members, xi, ui))

    @property
    def num_agents(self):
        return len(self.models)

    def step(self, x, u, k=0):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
            raise ValueError(f"non-finite state or control at step {k}")
        out = np.empty(np.broadcast_shapes(x.shape, u.shape[:-1] + (self.n,)))
        h = self.step_size
        for mdl, _, xi, ui in self._groups:
            out[..., xi] = mdl.step(x[..., xi], u[..., ui], h)
        return out

    def jacobians(self, x, u, k=0):
        """Return ``(A, B)`` with ``A = df/dx`` and ``B = df/du``, batched over leading axes."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        A = np.zeros(batch + (self.n, self.n))
        B = np.zeros(batch + (self.n, self.m))
        h = self.step_size
        for mdl, members, xi, ui in self._groups:
            Ag, Bg = mdl.jacobians(x[..., xi], u[..., ui], h)
            for g, i in enumerate(members):
                sx, su = self.state_slices[i], self.control_slices[i]
                A[..., sx, sx] = Ag[..., g, :, :]
                B[..., sx, su] = Bg[..., g, :, :]
        return A, B

    def fd_jacobians(self, x, u, k=0, rel_step=1e-6):
        """Finite-difference Jacobians of the joint step at a single point."""
        n = self.n
        z = np.concatenate([np.asarray(x, dtype=float), np.asarray(u, dtype=float)])
        J = fd_jacobian(lambda z_: self.step(z_[:n], z_[n:], k), z, rel_step)
        return J[:, :n], J[:, n:]

    def __repr__(self):
        return f"JointDynamics({list(self.models)!r}, step_size={self.step_size})"


def step(model, x, u, k=0):
    """Advance the joint state one step."""
    return model.step(x, u, k)


def jacobians(model, x, u, k=0):
    return model.jacobians(x, u, k)
