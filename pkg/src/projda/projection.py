"""Unstable-subspace tracking and projected observation models.

The discrete QR recursion propagates an orthonormal basis U_n through the
finite-difference tangent map and re-orthonormalizes with modified
Gram-Schmidt; the running log-diagonals of the triangular factors estimate
Lyapunov exponents. From any such basis and a full-row-rank observation
model (H, R), the projected model (Hq, Rq) confines the data to the
tracked subspace: y is lifted into model space through the pseudo-inverse
of H, projected, and reduced to a p-vector.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import models

__all__ = [
    "SubspaceCollapseError",
    "DegenerateProjectionError",
    "SubspaceBasis",
    "QrTracker",
    "ObservationModel",
    "ProjectedObservationModel",
    "JointProjectedModel",
    "modified_gram_schmidt",
    "qr_tracker_init",
    "qr_tracker_step",
    "lift_observation",
    "build_projected_model",
    "project_observation",
    "projected_log_likelihood",
    "projected_log_likelihood_batch",
    "build_orthogonal_model",
    "intersect_projectors_dykstra",
    "intersect_projectors_vonneumann",
]

RANK_RTOL = 1e-10  # relative SVD tolerance for rank decisions


class SubspaceCollapseError(RuntimeError):
    """The tangent image of the tracked basis became numerically rank-deficient."""


class DegenerateProjectionError(RuntimeError):
    """The projected observation covariance is numerically zero."""


def modified_gram_schmidt(W):
    """Reduced QR of W by modified Gram-Schmidt with re-orthogonalization.

    Returns (Q, T) with Q orthonormal columns and T upper triangular with
    non-negative diagonal. Raises SubspaceCollapseError on a numerically
    zero diagonal entry.
    """
    W = np.array(W, dtype=np.float64)
    n, p = W.shape
    Q = np.empty((n, p))
    T = np.zeros((p, p))
    scale = max(np.max(np.abs(W)), np.finfo(float).tiny)
    for j in range(p):
        v = W[:, j].copy()
        for i in range(j):
            r = Q[:, i] @ v
            T[i, j] += r
            v -= r * Q[:, i]
        # second pass when cancellation has eaten most of the column
        if j > 0 and np.linalg.norm(v) < 0.5 * np.linalg.norm(W[:, j]):
            for i in range(j):
                r = Q[:, i] @ v
                T[i, j] += r
                v -= r * Q[:, i]
        nrm = np.linalg.norm(v)
        if nrm <= 1e-14 * scale * np.sqrt(n):
            raise SubspaceCollapseError(f"rank-deficient column {j} in QR update")
        T[j, j] = nrm
        Q[:, j] = v / nrm
    return Q, T


@dataclass(frozen=True)
class SubspaceBasis:
    """An N x p matrix with orthonormal columns and its rank."""

    U: np.ndarray

    def __post_init__(self):
        U = np.asarray(self.U, dtype=np.float64)
        if U.ndim != 2:
            raise ValueError("U must be a matrix")
        p = U.shape[1]
        if np.max(np.abs(U.T @ U - np.eye(p))) > 1e-10:
            U, _ = modified_gram_schmidt(U)
        object.__setattr__(self, "U", U)

    @property
    def rank(self):
        return self.U.shape[1]

    @property
    def dim(self):
        return self.U.shape[0]

    def projector(self):
        """The orthogonal projector P = U U^T."""
        return self.U @ self.U.T

    def complement(self):
        """Orthonormal basis of the orthogonal complement, shape (N, N - p)."""
        Qfull, _ = np.linalg.qr(self.U, mode="complete")
        # columns p: of Qfull span the complement of span(U) up to sign
        return Qfull[:, self.rank:]


@dataclass(frozen=True)
class QrTracker:
    """State of the discrete QR recursion.

    ``log_diag_sums`` accumulates sum_n log T_n[i, i]; dividing by the
    elapsed model time gives Lyapunov exponent estimates. ``steps`` counts
    accumulated updates since the last reset.
    """

    basis: SubspaceBasis
    last_T: np.ndarray
    log_diag_sums: np.ndarray
    steps: int = 0

    def lyapunov_exponents(self, dt):
        """Exponent estimates sum log T_ii / (steps * dt)."""
        if self.steps == 0:
            raise ValueError("no accumulated QR steps")
        return self.log_diag_sums / (self.steps * dt)

    def reset_accumulator(self):
        """Drop accumulated log-diagonals (e.g. after an alignment transient)."""
        return QrTracker(
            basis=self.basis,
            last_T=self.last_T,
            log_diag_sums=np.zeros_like(self.log_diag_sums),
            steps=0,
        )


def qr_tracker_init(n_dim, p, rng):
    """Initialize the tracker from a Gram-Schmidt orthonormalized Gaussian matrix."""
    if not (1 <= p <= n_dim):
        raise ValueError("need 1 <= p <= N")
    while True:
        G = rng.standard_normal((n_dim, p))
        try:
            U0, _ = modified_gram_schmidt(G)
            break
        except SubspaceCollapseError:  # probability zero; re-draw
            continue
    return QrTracker(
        basis=SubspaceBasis(U0),
        last_T=np.eye(p),
        log_diag_sums=np.zeros(p),
        steps=0,
    )


def qr_tracker_step(tracker, model, u, eps=None):
    """Advance the tracked basis one step along the deterministic flow.

    Propagates the basis through the finite-difference tangent map at u and
    re-factors U_{n+1} T_n = F'(u) U_n by modified Gram-Schmidt.
    """
    W = models.tangent_apply(model, u, tracker.basis.U, eps)
    U_next, T = modified_gram_schmidt(W)
    return QrTracker(
        basis=SubspaceBasis(U_next),
        last_T=T,
        log_diag_sums=tracker.log_diag_sums + np.log(np.diag(T)),
        steps=tracker.steps + 1,
    )


@dataclass(frozen=True)
class ObservationModel:
    """Linear-Gaussian observation model (H, R) with cached pseudo-inverse.

    H must have full row rank; Hdag = H^T (H H^T)^{-1} and PH = Hdag H is
    the orthogonal projector onto the row space of H.
    """

    H: np.ndarray
    R: np.ndarray
    Hdag: np.ndarray = field(init=False, repr=False)
    PH: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=np.float64))
        R = np.asarray(self.R, dtype=np.float64)
        if R.ndim == 0:
            R = float(R) * np.eye(H.shape[0])
        m, n = H.shape
        if m > n:
            raise ValueError("H must have no more rows than columns")
        if R.shape != (m, m):
            raise ValueError("R shape does not match H")
        if np.max(np.abs(R - R.T)) > 1e-10 * max(1.0, np.max(np.abs(R))):
            raise ValueError("R must be symmetric")
        sv = np.linalg.svd(H, compute_uv=False)
        if sv[-1] <= RANK_RTOL * sv[0]:
            raise ValueError("H is not full row rank")
        Hdag = np.linalg.solve(H @ H.T, H).T
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "Hdag", Hdag)
        object.__setattr__(self, "PH", Hdag @ H)

    @property
    def n_obs(self):
        return self.H.shape[0]

    @property
    def chol_R(self):
        return np.linalg.cholesky(self.R)

    @property
    def R_inv(self):
        return np.linalg.inv(self.R)

    @classmethod
    def selector(cls, n_dim, indices, obs_var):
        """Observe the listed state components with variance obs_var each."""
        indices = np.asarray(indices, dtype=int)
        H = np.zeros((len(indices), n_dim))
        H[np.arange(len(indices)), indices] = 1.0
        return cls(H=H, R=obs_var * np.eye(len(indices)))


def lift_observation(obs, y):
    """Lift y into model space: y_tilde = Hdag y, satisfying H y_tilde = y."""
    return obs.Hdag @ np.asarray(y, dtype=np.float64)


def _sym(mat):
    return 0.5 * (mat + mat.T)


@dataclass(frozen=True)
class ProjectedObservationModel:
    """Projected data model (Hq, Rq) for a basis U: y^q = U^T Hdag y."""

    Hq: np.ndarray
    Rq: np.ndarray
    rank_Rq: int
    Rq_inv: np.ndarray  # inverse when full rank, Moore-Penrose pseudo-inverse otherwise
    full_rank: bool

    @property
    def rank(self):
        return self.Hq.shape[0]


def build_projected_model(obs, basis):
    """Build the projected observation model from (H, R) and a basis U.

    Hq = U^T PH and Rq = U^T Hdag R Hdag^T U. The rank of Rq is decided by
    SVD at a relative tolerance; a full-rank Rq caches its inverse, a
    singular one its pseudo-inverse.
    """
    U = basis.U
    if U.shape[0] != obs.H.shape[1]:
        raise ValueError("basis and observation model dimensions differ")
    Hq = U.T @ obs.PH
    HdagU = obs.Hdag.T @ U  # (M, p)
    Rq = _sym(HdagU.T @ obs.R @ HdagU)
    sv_u, sv, sv_vt = np.linalg.svd(Rq)
    if sv[0] <= 1e-14 * max(1.0, np.max(np.abs(obs.R))):
        raise DegenerateProjectionError("projected covariance is numerically zero")
    keep = sv > RANK_RTOL * sv[0]
    rank = int(np.count_nonzero(keep))
    if rank == Rq.shape[0]:
        Rq_inv = _sym(np.linalg.inv(Rq))
        full_rank = True
    else:
        Rq_inv = _sym((sv_vt[keep].T / sv[keep]) @ sv_u[:, keep].T)
        full_rank = False
    return ProjectedObservationModel(
        Hq=Hq, Rq=Rq, rank_Rq=rank, Rq_inv=Rq_inv, full_rank=full_rank
    )


def project_observation(pm, basis, obs, y):
    """Reduce y to the tracked subspace: y^q = U^T (Hdag y).

    Computed as two matrix-vector products; the N-dimensional intermediates
    y_tilde and y^p are never materialized beyond the single lift.
    """
    return basis.U.T @ (obs.Hdag @ np.asarray(y, dtype=np.float64))


def projected_log_likelihood(pm, yq, u):
    """Log-likelihood of y^q given state u, up to a u-independent constant."""
    innov = yq - pm.Hq @ np.asarray(u, dtype=np.float64)
    return -0.5 * float(innov @ pm.Rq_inv @ innov)


def projected_log_likelihood_batch(pm, yq, states):
    """Row-wise projected log-likelihoods for an (L, N) batch of states."""
    innov = yq[None, :] - states @ pm.Hq.T
    return -0.5 * np.einsum("ij,jk,ik->i", innov, pm.Rq_inv, innov)


@dataclass(frozen=True)
class JointProjectedModel:
    """Joint data model for (y^q, y^{q perp}) with its cross-covariances."""

    Hq: np.ndarray
    Hq_perp: np.ndarray
    Rq: np.ndarray
    Rq_perp: np.ndarray
    R12: np.ndarray

    @property
    def R21(self):
        return self.R12.T

    def joint_covariance(self):
        top = np.hstack([self.Rq, self.R12])
        bottom = np.hstack([self.R12.T, self.Rq_perp])
        return np.vstack([top, bottom])


def build_orthogonal_model(obs, basis):
    """Build the joint model for the projected and orthogonal data components."""
    if basis.rank >= basis.dim:
        raise ValueError("orthogonal complement is empty for p = N")
    U = basis.U
    Uperp = basis.complement()
    S = obs.Hdag @ obs.R @ obs.Hdag.T
    Hq = U.T @ obs.PH
    Hq_perp = Uperp.T @ obs.PH
    Rq = _sym(U.T @ S @ U)
    Rq_perp = _sym(Uperp.T @ S @ Uperp)
    R12 = U.T @ S @ Uperp
    joint = JointProjectedModel(Hq=Hq, Hq_perp=Hq_perp, Rq=Rq, Rq_perp=Rq_perp, R12=R12)
    eigmin = np.linalg.eigvalsh(_sym(joint.joint_covariance())).min()
    if eigmin < -1e-8 * max(1.0, np.max(np.abs(obs.R))):
        raise RuntimeError(f"joint projected covariance not PSD: min eig {eigmin:.2e}")
    return joint


def _check_projector(P, name):
    P = np.asarray(P, dtype=np.float64)
    if np.max(np.abs(P - P.T)) > 1e-8 or np.max(np.abs(P @ P - P)) > 1e-8:
        raise ValueError(f"{name} is not an orthogonal projector to 1e-8")
    return P


def _warn_transversality(PA, PB):
    n = PA.shape[0]
    ra = int(round(np.trace(PA)))
    rb = int(round(np.trace(PB)))
    if ra + rb - n <= 0:
        warnings.warn(
            "transversality condition rank(PA) + rank(PB) - N > 0 fails; "
            "the subspaces may not intersect",
            stacklevel=3,
        )


def _clean_projector(X):
    # snap the symmetrized iterate to the nearest orthogonal projector
    w, V = np.linalg.eigh(_sym(X))
    keep = w > 0.5
    return V[:, keep] @ V[:, keep].T


def intersect_projectors_dykstra(PA, PB, max_iter=5000, tol=1e-10):
    """Projector onto range(PA) ∩ range(PB) by Dykstra's algorithm.

    The iteration acts column-wise on a matrix iterate started at the
    identity. Returns (projector, converged).
    """
    PA = _check_projector(PA, "PA")
    PB = _check_projector(PB, "PB")
    _warn_transversality(PA, PB)
    n = PA.shape[0]
    x = np.eye(n)
    p = np.zeros((n, n))
    q = np.zeros((n, n))
    converged = False
    for _ in range(max_iter):
        y = PA @ (x + p)
        p = x + p - y
        x_next = PB @ (y + q)
        q = y + q - x_next
        if np.max(np.abs(x_next - x)) < tol:
            x = x_next
            converged = True
            break
        x = x_next
    return _clean_projector(x), converged


def intersect_projectors_vonneumann(PA, PB, max_iter=5000, tol=1e-10):
    """Projector onto range(PA) ∩ range(PB) by Von Neumann's alternating products."""
    PA = _check_projector(PA, "PA")
    PB = _check_projector(PB, "PB")
    _warn_transversality(PA, PB)
    x = np.eye(PA.shape[0])
    step = PA @ PB
    converged = False
    for _ in range(max_iter):
        x_next = step @ x
        if np.max(np.abs(x_next - x)) < tol:
            x = x_next
            converged = True
            break
        x = x_next
    return _clean_projector(x), converged
