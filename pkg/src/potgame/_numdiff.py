"""Central finite differences used as fallbacks and as test oracles."""

import numpy as np


def fd_jacobian(fun, z, rel_step=1e-6):
    """Jacobian of ``fun`` at ``z`` by central differences.

    ``fun`` maps a 1-D array to a 1-D array (or scalar). The step for entry
    ``j`` is ``rel_step * (1 + |z_j|)``.
    """
    z = np.asarray(z, dtype=float)
    f0 = np.atleast_1d(np.asarray(fun(z), dtype=float))
    jac = np.empty((f0.size, z.size))
    for j in range(z.size):
        step = rel_step * (1.0 + abs(z[j]))
        zp = z.copy()
        zm = z.copy()
        zp[j] += step
        zm[j] -= step
        fp = np.atleast_1d(np.asarray(fun(zp), dtype=float))
        fm = np.atleast_1d(np.asarray(fun(zm), dtype=float))
        jac[:, j] = (fp - fm) / (2.0 * step)
    return jac


def fd_gradient(fun, z, rel_step=1e-6):
    return fd_jacobian(fun, z, rel_step)[0]


def fd_hessian(fun, z, rel_step=1e-4):
    """Symmetrized Hessian of a scalar function by central differences."""
    z = np.asarray(z, dtype=float)
    size = z.size
    steps = rel_step * (1.0 + np.abs(z))
    hess = np.empty((size, size))
    for i in range(size):
        for j in range(i, size):
            ei = np.zeros(size)
            ej = np.zeros(size)
            ei[i] = steps[i]
            ej[j] = steps[j]
            val = (
                fun(z + ei + ej) - fun(z + ei - ej) - fun(z - ei + ej) + fun(z - ei - ej)
            ) / (4.0 * steps[i] * steps[j])
            hess[i, j] = val
            hess[j, i] = val
    return 0.5 * (hess + hess.T)
