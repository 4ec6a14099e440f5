"""Discrete-time forecast models and twin-experiment data generation.

Two model families are provided: a stiff dissipative linear system stepped
with its exact matrix-exponential propagator, and the chaotic Lorenz-96
system stepped with classical RK4. Both expose the same trio of operations:
a deterministic step, a stochastic step (additive Gaussian model noise once
per observation interval), and a finite-difference tangent-map action used
by the subspace tracker and the EKF.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import kernels

__all__ = [
    "IntegrationBlowupError",
    "StiffLinearSystem",
    "ModelSpec",
    "build_stiff_linear",
    "step_deterministic",
    "step_deterministic_batch",
    "step_stochastic",
    "step_stochastic_batch",
    "default_fd_epsilon",
    "tangent_apply",
    "generate_truth_and_observations",
]

STIFF_LINEAR = "stiff_linear"
LORENZ96 = "lorenz96"


class IntegrationBlowupError(RuntimeError):
    """A model step produced non-finite values."""


@dataclass(frozen=True)
class StiffLinearSystem:
    """A linear system du/dt = A u with a slow 2-dimensional eigenspace.

    ``propagator`` is e^{A dt} for the owning model's observation interval;
    ``slow_basis`` spans the eigenspace of the two slow eigenvalues.
    """

    A: np.ndarray
    propagator: np.ndarray
    slow_basis: np.ndarray
    dt: float


@dataclass(frozen=True)
class ModelSpec:
    """Specification of a discrete-time stochastic forecast model.

    The stochastic model advances u by the deterministic flow over one
    observation interval and then adds N(0, model_noise_var * I) noise.
    """

    kind: str
    dim: int
    obs_interval: float
    forcing: float = 8.0
    substeps: int = 1
    model_noise_var: float = 0.0
    linear: StiffLinearSystem | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in (STIFF_LINEAR, LORENZ96):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if self.obs_interval <= 0:
            raise ValueError("obs_interval must be > 0")
        if self.model_noise_var < 0:
            raise ValueError("model_noise_var must be >= 0")
        if self.kind == STIFF_LINEAR:
            if self.linear is None:
                raise ValueError("stiff_linear model requires a StiffLinearSystem")
            if self.linear.A.shape != (self.dim, self.dim):
                raise ValueError("linear system dimension does not match dim")
            if abs(self.linear.dt - self.obs_interval) > 1e-12 * max(1.0, self.obs_interval):
                raise ValueError("linear propagator timestep does not match obs_interval")


def build_stiff_linear(dim, rng, dt=0.1, model_noise_var=0.0):
    """Construct a random stiff linear model with two slow modes.

    A = Q D Q^T with Q a uniformly random orthogonal matrix. D holds one
    2x2 block [[a, -1], [1, a]] with a ~ U(0.01, 0.04), and dim-2 real
    eigenvalues drawn from U(-200, -100); A is therefore normal. The
    propagator e^{A dt} is validated against the half-step squaring
    identity to 1e-10 relative Frobenius error.

    Returns a ModelSpec of kind ``stiff_linear``.
    """
    if dim < 3:
        raise ValueError("dim must be >= 3")
    G = rng.standard_normal((dim, dim))
    Q, R = np.linalg.qr(G)
    Q = Q * np.sign(np.diag(R))  # fix signs for the Haar measure

    a = rng.uniform(0.01, 0.04)
    fast = rng.uniform(-200.0, -100.0, size=dim - 2)
    D = np.zeros((dim, dim))
    D[0, 0] = a
    D[1, 1] = a
    D[0, 1] = -1.0
    D[1, 0] = 1.0
    D[2:, 2:] = np.diag(fast)

    A = Q @ D @ Q.T
    propagator = scipy.linalg.expm(A * dt)
    half = scipy.linalg.expm(A * (dt / 2.0))
    err = np.linalg.norm(half @ half - propagator) / np.linalg.norm(propagator)
    if err > 1e-10:
        raise RuntimeError(f"propagator failed half-step squaring check: {err:.2e}")

    system = StiffLinearSystem(A=A, propagator=propagator, slow_basis=Q[:, :2].copy(), dt=dt)
    return ModelSpec(
        kind=STIFF_LINEAR,
        dim=dim,
        obs_interval=dt,
        substeps=1,
        model_noise_var=model_noise_var,
        linear=system,
    )


def _check_finite(out, what):
    if not np.all(np.isfinite(out)):
        raise IntegrationBlowupError(f"non-finite state after {what}")


def step_deterministic_batch(model, states):
    """Apply the deterministic flow over one observation interval to each row."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if states.shape[1] != model.dim:
        raise ValueError(f"state dimension {states.shape[1]} != model dim {model.dim}")
    if model.kind == STIFF_LINEAR:
        out = states @ model.linear.propagator.T
    else:
        h = model.obs_interval / model.substeps
        out = kernels.l96_rk4_batch(states, model.forcing, h, model.substeps)
    _check_finite(out, f"{model.kind} step")
    return out


def step_deterministic(model, u):
    """Deterministic model step F(u) over one observation interval."""
    return step_deterministic_batch(model, u)[0]


def step_stochastic_batch(model, states, rng):
    """Deterministic step plus N(0, model_noise_var * I) noise per row."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if model.model_noise_var <= 0:
        return step_deterministic_batch(model, states)
    noise = np.sqrt(model.model_noise_var) * rng.standard_normal(states.shape)
    return step_deterministic_batch(model, states) + noise


def step_stochastic(model, u, rng):
    """Stochastic model step F(u) + noise, as in the discrete-time model."""
    return step_stochastic_batch(model, u, rng)[0]


def default_fd_epsilon(u):
    """Default finite-difference scale: 1e-6 * max(1, ||u||)."""
    return 1e-6 * max(1.0, float(np.linalg.norm(u)))


def tangent_apply(model, u, V, eps=None):
    """Approximate the tangent-map action F'(u) V by forward differences.

    Column j of the result is (F(u + eps * V[:, j]) - F(u)) / eps with F the
    deterministic flow. Exact (to roundoff) for the linear model.
    """
    u = np.asarray(u, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if V.ndim == 1:
        V = V[:, None]
    if eps is None:
        eps = default_fd_epsilon(u)
    if eps <= 0:
        raise ValueError("eps must be > 0")
    batch = np.vstack([u[None, :], u[None, :] + eps * V.T])
    stepped = step_deterministic_batch(model, batch)
    return (stepped[1:] - stepped[0]).T / eps


def generate_truth_and_observations(model, obs, u0, n_steps, rng):
    """Generate a truth trajectory and noisy observations of it.

    Iterates the stochastic model from u0 and observes each post-step state
    through y_n = H u_n + eta_n with eta_n ~ N(0, R).

    Returns
    -------
    truth : ndarray, shape (n_steps + 1, N)
        truth[0] is u0; truth[n] the state after n steps.
    ys : ndarray, shape (n_steps, M)
        ys[n - 1] observes truth[n].
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    u0 = np.asarray(u0, dtype=np.float64)
    n_obs = obs.H.shape[0]
    truth = np.empty((n_steps + 1, model.dim))
    ys = np.empty((n_steps, n_obs))
    truth[0] = u0
    u = u0
    chol_R = obs.chol_R
    for n in range(1, n_steps + 1):
        u = step_stochastic(model, u, rng)
        truth[n] = u
        eta = chol_R @ rng.standard_normal(n_obs)
        ys[n - 1] = obs.H @ u + eta
    return truth, ys
