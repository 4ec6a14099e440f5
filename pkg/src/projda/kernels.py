"""Hot numeric kernels for Lorenz-96 time stepping.

Two interchangeable backends are provided: a numba ``@njit`` implementation
and a pure-numpy one. The numpy path is selected by setting the environment
variable ``PROJDA_DISABLE_NUMBA=1`` before import (or whenever numba is not
importable). Both backends perform the arithmetic in the same order, so
results are bit-identical.
"""

import os

import numpy as np

__all__ = ["l96_rk4_batch", "backend_name"]


def _numba_disabled():
    return os.environ.get("PROJDA_DISABLE_NUMBA", "0") not in ("", "0")


def _l96_rhs_np(x, forcing):
    # cyclic indexing via roll; x has shape (L, J)
    xp1 = np.roll(x, -1, axis=-1)
    xm1 = np.roll(x, 1, axis=-1)
    xm2 = np.roll(x, 2, axis=-1)
    return (xp1 - xm2) * xm1 - x + forcing


def _l96_rk4_batch_np(states, forcing, h, substeps):
    x = states.copy()
    for _ in range(substeps):
        k1 = _l96_rhs_np(x, forcing)
        k2 = _l96_rhs_np(x + 0.5 * h * k1, forcing)
        k3 = _l96_rhs_np(x + 0.5 * h * k2, forcing)
        k4 = _l96_rhs_np(x + h * k3, forcing)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


_IMPL = None
_BACKEND = None

if not _numba_disabled():
    try:
        from numba import njit

        @njit
        def _l96_rhs_nb(x, forcing, out):
            n = x.shape[0]
            for i in range(n):
                out[i] = (x[(i + 1) % n] - x[(i - 2) % n]) * x[(i - 1) % n] - x[i] + forcing

        @njit
        def _l96_rk4_batch_nb(states, forcing, h, substeps):
            out = states.copy()
            n_states, dim = out.shape
            k1 = np.empty(dim)
            k2 = np.empty(dim)
            k3 = np.empty(dim)
            k4 = np.empty(dim)
            tmp = np.empty(dim)
            for s in range(n_states):
                x = out[s]
                for _ in range(substeps):
                    _l96_rhs_nb(x, forcing, k1)
                    for i in range(dim):
                        tmp[i] = x[i] + 0.5 * h * k1[i]
                    _l96_rhs_nb(tmp, forcing, k2)
                    for i in range(dim):
                        tmp[i] = x[i] + 0.5 * h * k2[i]
                    _l96_rhs_nb(tmp, forcing, k3)
                    for i in range(dim):
                        tmp[i] = x[i] + h * k3[i]
                    _l96_rhs_nb(tmp, forcing, k4)
                    for i in range(dim):
                        x[i] = x[i] + (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            return out

        _IMPL = _l96_rk4_batch_nb
        _BACKEND = "numba"
    except ImportError:
        pass

if _IMPL is None:
    _IMPL = _l96_rk4_batch_np
    _BACKEND = "numpy"


def backend_name():
    """Name of the active kernel backend, ``"numba"`` or ``"numpy"``."""
    return _BACKEND


def l96_rk4_batch(states, forcing, h, substeps):
    """Advance a batch of Lorenz-96 states with classical RK4.

    Parameters
    ----------
    states : ndarray, shape (n_states, dim)
        States to advance; not modified.
    forcing : float
        Constant forcing term.
    h : float
        Size of one RK4 substep.
    substeps : int
        Number of equal RK4 steps to take.

    Returns
    -------
    ndarray, shape (n_states, dim)
    """
    states = np.ascontiguousarray(states, dtype=np.float64)
    return _IMPL(states, float(forcing), float(h), int(substeps))
