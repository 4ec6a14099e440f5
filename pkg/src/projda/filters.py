"""Sequential filters: particle filters (bootstrap, optimal-proposal, and
their projected-data variants), Kalman-family filters (KF, EKF, EKF-AUS
gain, ETKF, projected ETKF), and the orchestration loop that runs any of
them against a twin-experiment truth.

All particle weights live in log space and are normalized by log-sum-exp.
Every operation is deterministic given an explicit numpy Generator.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import models
from .projection import (
    build_projected_model,
    project_observation,
    projected_log_likelihood_batch,
    qr_tracker_init,
    qr_tracker_step,
)

__all__ = [
    "WeightCollapseError",
    "IllConditionedUpdateError",
    "ConfigurationError",
    "Ensemble",
    "GaussianBelief",
    "FilterConfig",
    "AssimilationStepRecord",
    "StepInfo",
    "ess",
    "systematic_resample",
    "proj_resample_noise",
    "gaussian_loglik_batch",
    "pf_bootstrap_step",
    "pf_proj_step",
    "OptimalProposal",
    "op_pf_step",
    "proj_op_pf_step",
    "kf_step",
    "kf_update",
    "ekf_step",
    "ekf_aus_gain",
    "projected_kf_gain",
    "etkf_step",
    "run_filter",
    "PF_KINDS",
    "KALMAN_KINDS",
    "PROJECTED_KINDS",
    "ALL_KINDS",
]


class WeightCollapseError(RuntimeError):
    """All particle log-weights underflowed to -inf."""


class IllConditionedUpdateError(RuntimeError):
    """A covariance solve or eigendecomposition failed during an update."""


class ConfigurationError(ValueError):
    """A filter configuration is invalid for the given model."""


# ---------------------------------------------------------------------------
# ensembles and weights

@dataclass(frozen=True)
class Ensemble:
    """L particles with canonical log-weights (weights derived)."""

    particles: np.ndarray
    log_weights: np.ndarray

    def __post_init__(self):
        if self.particles.shape[0] < 2:
            raise ValueError("need at least 2 particles")
        if self.log_weights.shape != (self.particles.shape[0],):
            raise ValueError("log_weights shape mismatch")

    @property
    def n_particles(self):
        return self.particles.shape[0]

    @property
    def weights(self):
        return np.exp(self.log_weights)

    def mean(self):
        return self.weights @ self.particles

    @classmethod
    def uniform(cls, particles):
        n = particles.shape[0]
        return cls(particles=particles, log_weights=np.full(n, -np.log(n)))


def _normalize_log_weights(log_w, step_name):
    """Log-sum-exp normalization; raises WeightCollapseError when degenerate."""
    log_w = np.where(np.isnan(log_w), -np.inf, log_w)
    m = np.max(log_w)
    if not np.isfinite(m):
        raise WeightCollapseError(f"all log-weights -inf in {step_name}")
    shifted = log_w - m
    return shifted - np.log(np.sum(np.exp(shifted)))


def ess(weights):
    """Effective sample size 1 / sum(w_i^2) of normalized weights."""
    weights = np.asarray(weights, dtype=np.float64)
    return 1.0 / float(weights @ weights)


def systematic_resample(ens, rng):
    """Systematic resampling to uniform weights from a single uniform draw."""
    n = ens.n_particles
    positions = (rng.uniform() + np.arange(n)) / n
    cum = np.cumsum(ens.weights)
    cum[-1] = 1.0
    idx = np.searchsorted(cum, positions, side="right")
    return Ensemble.uniform(ens.particles[idx].copy())


def proj_resample_noise(n_particles, n_dim, omega, alpha, basis, rng):
    """Resampling noise N(0, omega^2 I) shaped by alpha P + (1 - alpha) I.

    With alpha = 1 the noise lies entirely in span(U); with alpha = 0 it is
    the usual isotropic noise. Never forms the N x N projector.
    """
    if omega < 0:
        raise ValueError("omega must be >= 0")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    z = omega * rng.standard_normal((n_particles, n_dim))
    if alpha == 0.0 or basis is None:
        return z
    in_span = (z @ basis.U) @ basis.U.T
    return z - alpha * (z - in_span)


@dataclass(frozen=True)
class StepInfo:
    ess: float
    resampled: bool
    collapsed: bool = False


def _maybe_resample(ens, rng, threshold, omega, alpha, basis, collapsed):
    n = ens.n_particles
    ess_val = ess(ens.weights)
    resampled = collapsed or ess_val < threshold * n
    if resampled:
        ens = systematic_resample(ens, rng)
        if omega > 0:
            noise = proj_resample_noise(n, ens.particles.shape[1], omega, alpha, basis, rng)
            ens = Ensemble.uniform(ens.particles + noise)
    return ens, StepInfo(ess=ess_val, resampled=resampled, collapsed=collapsed)


def _reweight(ens, increments, step_name, collapse):
    try:
        log_w = _normalize_log_weights(ens.log_weights + increments, step_name)
        return log_w, False
    except WeightCollapseError:
        if collapse == "raise":
            raise
        n = ens.n_particles
        return np.full(n, -np.log(n)), True


# ---------------------------------------------------------------------------
# particle filter steps

def gaussian_loglik_batch(obs, y, states):
    """Row-wise Gaussian log-likelihoods of y given H @ state, up to a constant."""
    innov = y[None, :] - states @ obs.H.T
    return -0.5 * np.einsum("ij,jk,ik->i", innov, obs.R_inv, innov)


def pf_bootstrap_step(ens, model, obs, y, rng, *, resample_threshold=0.5,
                      resample_noise=0.0, collapse="raise"):
    """One bootstrap particle filter step: stochastic propagation, Gaussian
    likelihood reweighting, ESS-triggered systematic resampling with
    isotropic refresh noise."""
    particles = models.step_stochastic_batch(model, ens.particles, rng)
    incr = gaussian_loglik_batch(obs, y, particles)
    ens = Ensemble(particles, ens.log_weights)
    log_w, collapsed = _reweight(ens, incr, "bootstrap PF step", collapse)
    ens = Ensemble(particles, log_w)
    return _maybe_resample(ens, rng, resample_threshold, resample_noise, 0.0, None, collapsed)


def pf_proj_step(ens, model, pm, yq, rng, *, resample_threshold=0.5,
                 resample_noise=0.0, collapse="raise"):
    """Bootstrap step reweighted with the projected data model (PROJ-PF)."""
    particles = models.step_stochastic_batch(model, ens.particles, rng)
    incr = projected_log_likelihood_batch(pm, yq, particles)
    ens = Ensemble(particles, ens.log_weights)
    log_w, collapsed = _reweight(ens, incr, "PROJ-PF step", collapse)
    ens = Ensemble(particles, log_w)
    return _maybe_resample(ens, rng, resample_threshold, resample_noise, 0.0, None, collapsed)


class OptimalProposal:
    """Cached matrices for the optimal-proposal particle update.

    The proposal for each particle is N(m_i, Sp) with
    Sp^{-1} = Sigma^{-1} + H^T R^{-1} H and
    m_i = F(u_i) + Sp H^T R^{-1} (y - H F(u_i)); the weight increment is the
    Gaussian log-density of the innovation under H Sigma H^T + R.
    """

    def __init__(self, model, obs):
        if model.model_noise_var <= 0:
            raise ConfigurationError("optimal proposal undefined without model noise")
        sig2 = model.model_noise_var
        n = model.dim
        H, R = obs.H, obs.R
        R_inv = obs.R_inv
        Sp_inv = np.eye(n) / sig2 + H.T @ R_inv @ H
        Sp = np.linalg.inv(Sp_inv)
        Sp = 0.5 * (Sp + Sp.T)
        self.Sp = Sp
        self.chol_Sp = np.linalg.cholesky(Sp)
        self.gain = Sp @ H.T @ R_inv
        innov_cov = sig2 * (H @ H.T) + R
        self.innov_prec = np.linalg.inv(0.5 * (innov_cov + innov_cov.T))


def _op_propagate(ens, model, obs, y, rng, proposal):
    if proposal is None:
        proposal = OptimalProposal(model, obs)
    fu = models.step_deterministic_batch(model, ens.particles)
    innov = y[None, :] - fu @ obs.H.T
    means = fu + innov @ proposal.gain.T
    draws = rng.standard_normal(means.shape)
    particles = means + draws @ proposal.chol_Sp.T
    return fu, innov, particles, proposal


def op_pf_step(ens, model, obs, y, rng, *, proposal=None, resample_threshold=0.5,
               resample_noise=0.0, resample_alpha=0.0, basis=None, collapse="raise"):
    """One optimal-proposal particle filter step.

    With resample_alpha > 0 and a basis, the refresh noise after resampling
    is shaped into the tracked subspace while the weights stay unprojected
    (the OP-PF + PROJ-RESAMP ablation).
    """
    fu, innov, particles, proposal = _op_propagate(ens, model, obs, y, rng, proposal)
    incr = -0.5 * np.einsum("ij,jk,ik->i", innov, proposal.innov_prec, innov)
    ens = Ensemble(particles, ens.log_weights)
    log_w, collapsed = _reweight(ens, incr, "OP-PF step", collapse)
    ens = Ensemble(particles, log_w)
    return _maybe_resample(ens, rng, resample_threshold, resample_noise,
                           resample_alpha, basis, collapsed)


def proj_op_pf_step(ens, model, obs, y, pm, yq, basis, rng, *, proposal=None,
                    resample_threshold=0.5, resample_noise=0.0, resample_alpha=0.0,
                    collapse="raise"):
    """One PROJ-OP-PF step: full-data optimal-proposal particle update,
    projected-data weight update, and subspace-shaped resampling noise."""
    fu, _, particles, proposal = _op_propagate(ens, model, obs, y, rng, proposal)
    iq = yq[None, :] - fu @ pm.Hq.T
    wq = model.model_noise_var * (pm.Hq @ pm.Hq.T) + pm.Rq
    try:
        prec = np.linalg.inv(0.5 * (wq + wq.T))
    except np.linalg.LinAlgError as exc:
        raise IllConditionedUpdateError("projected innovation covariance solve failed") from exc
    incr = -0.5 * np.einsum("ij,jk,ik->i", iq, prec, iq)
    ens = Ensemble(particles, ens.log_weights)
    log_w, collapsed = _reweight(ens, incr, "PROJ-OP-PF step", collapse)
    ens = Ensemble(particles, log_w)
    return _maybe_resample(ens, rng, resample_threshold, resample_noise,
                           resample_alpha, basis, collapsed)


# ---------------------------------------------------------------------------
# Kalman-family filters

@dataclass(frozen=True)
class GaussianBelief:
    """Gaussian state estimate; covariance symmetrized and eigenvalue-clipped."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        cov = 0.5 * (self.cov + self.cov.T)
        w = np.linalg.eigvalsh(cov)
        if w.min() < -1e-8 * max(1.0, w.max()):
            wc, v = np.linalg.eigh(cov)
            cov = (v * np.clip(wc, 0.0, None)) @ v.T
        object.__setattr__(self, "cov", cov)


def kf_update(uf, Pf, H, R, y, innovation=None):
    """Kalman analysis update; returns (mean, cov, gain).

    ``innovation`` overrides y - H uf (used for nonlinear forecasts in the EKF).
    """
    S = H @ Pf @ H.T + R
    try:
        K = np.linalg.solve(0.5 * (S + S.T), H @ Pf).T
    except np.linalg.LinAlgError as exc:
        raise IllConditionedUpdateError("innovation covariance solve failed") from exc
    if innovation is None:
        innovation = y - H @ uf
    ua = uf + K @ innovation
    Pa = (np.eye(Pf.shape[0]) - K @ H) @ Pf
    return ua, 0.5 * (Pa + Pa.T), K


def kf_step(belief, A, Sigma, obs, y):
    """Exact Kalman filter step for the linear model u' = A u + noise."""
    uf = A @ belief.mean
    Pf = A @ belief.cov @ A.T + Sigma
    ua, Pa, _ = kf_update(uf, Pf, obs.H, obs.R, y)
    return GaussianBelief(mean=ua, cov=Pa)


def ekf_step(belief, model, Sigma, obs, y, eps=None):
    """Extended Kalman filter step with a finite-difference Jacobian.

    The Jacobian is evaluated at the prior analysis mean; the innovation
    uses the nonlinear forecast y - H F(u^a).
    """
    A = models.tangent_apply(model, belief.mean, np.eye(model.dim), eps)
    uf = models.step_deterministic(model, belief.mean)
    Pf = A @ belief.cov @ A.T + Sigma
    ua, Pa, _ = kf_update(uf, Pf, obs.H, obs.R, y, innovation=y - obs.H @ uf)
    return GaussianBelief(mean=ua, cov=Pa)


def ekf_aus_gain(Pf, basis, obs):
    """EKF-AUS Kalman gain: the forecast covariance is replaced by P Pf P."""
    U = basis.U
    core = U.T @ Pf @ U
    PPfP = U @ core @ U.T
    S = obs.H @ PPfP @ obs.H.T + obs.R
    try:
        return np.linalg.solve(0.5 * (S + S.T), obs.H @ PPfP).T
    except np.linalg.LinAlgError as exc:
        raise IllConditionedUpdateError("EKF-AUS innovation covariance solve failed") from exc


def projected_kf_gain(Pf, basis, obs):
    """Explicit projected-data Kalman gain acting on y^p innovations.

    Pf PH P [P Hdag (H Pf H^T + R) Hdag^T P]^+, with P = U U^T. Equals the
    gain of a KF run on the projected data model composed with U^T.
    """
    P = basis.projector()
    S = obs.H @ Pf @ obs.H.T + obs.R
    inner = P @ obs.Hdag @ S @ obs.Hdag.T @ P
    return Pf @ obs.PH @ P @ np.linalg.pinv(0.5 * (inner + inner.T), rcond=1e-12)


def etkf_step(ens, model, H, R_inv, y, rng, *, inflation=1.0):
    """Deterministic symmetric square-root ETKF step.

    Works on any (H, R^{-1}, y) triple, so the projected variant is this
    same update with (Hq, Rq^{-1}, y^q). The transform is built from a thin
    SVD of the whitened observation anomalies, costing O(L M^2) rather
    than O(L^3).
    """
    particles = models.step_stochastic_batch(model, ens.particles, rng)
    n = particles.shape[0]
    xb = particles.mean(axis=0)
    anom = (particles - xb) * np.sqrt(inflation)
    yanom = anom @ H.T                      # (L, M) observation-space anomalies
    try:
        white = np.linalg.cholesky(0.5 * (R_inv + R_inv.T))
        u_thin, sv, _ = np.linalg.svd(yanom @ white, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise IllConditionedUpdateError("ETKF square-root factorization failed") from exc
    # spectral functions of S = yanom R^-1 yanom^T act as identity * f(0)
    # off the span of u_thin
    denom = (n - 1.0) + sv ** 2
    d = y - H @ xb
    rhs = yanom @ (R_inv @ d)
    proj = u_thin.T @ rhs
    w_mean = u_thin @ (proj / denom) + (rhs - u_thin @ proj) / (n - 1.0)
    # w_sqrt @ anom without forming the L x L transform
    core = u_thin.T @ anom
    scaled = (np.sqrt((n - 1.0) / denom) - 1.0)[:, None] * core
    analysis_anom = anom + u_thin @ scaled
    xa = xb + w_mean @ anom
    analysis = xa[None, :] + analysis_anom
    ens_out = Ensemble.uniform(analysis)
    return ens_out, StepInfo(ess=float(n), resampled=False)


# ---------------------------------------------------------------------------
# run orchestration

PF_KINDS = ("pf", "op_pf", "proj_pf", "proj_op_pf", "op_pf_proj_resamp")
KALMAN_KINDS = ("kf", "ekf", "ekf_aus", "etkf", "proj_etkf")
PROJECTED_KINDS = ("proj_pf", "proj_op_pf", "op_pf_proj_resamp", "ekf_aus", "proj_etkf")
ALL_KINDS = PF_KINDS + KALMAN_KINDS


@dataclass(frozen=True)
class FilterConfig:
    """Declarative filter description consumed by run_filter."""

    kind: str
    n_particles: int = 100
    resample_threshold: float = 0.5
    resample_noise: float = 0.0   # omega
    resample_alpha: float = 0.0   # alpha in [0, 1]
    proj_rank: int | None = None  # p
    inflation: float = 1.0
    fd_epsilon: float | None = None
    name: str | None = None

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise ConfigurationError(f"unknown filter kind {self.kind!r}")
        if not 0.0 <= self.resample_alpha <= 1.0:
            raise ConfigurationError("resample_alpha must be in [0, 1]")
        if self.resample_noise < 0:
            raise ConfigurationError("resample_noise must be >= 0")
        if not 0.0 < self.resample_threshold <= 1.0:
            raise ConfigurationError("resample_threshold must be in (0, 1]")
        if self.kind in PROJECTED_KINDS and (self.proj_rank is None or self.proj_rank < 1):
            raise ConfigurationError(f"{self.kind} requires proj_rank >= 1")
        if self.kind in PF_KINDS and self.n_particles < 2:
            raise ConfigurationError("n_particles must be >= 2")

    @property
    def label(self):
        return self.name if self.name is not None else self.kind


@dataclass(frozen=True)
class AssimilationStepRecord:
    step: int
    mean: np.ndarray = field(repr=False)
    rmse: float
    ess: float
    resampled: bool
    proj_rank: int | None
    wall_time: float
    collapsed: bool = False


def _rmse(a, b):
    d = a - b
    return float(np.sqrt(d @ d / d.size))


def run_filter(config, model, obs, truth, ys, init_mean, init_std, seed,
               tracker_seed=None, rmse_ceiling=None):
    """Run one filter over a twin-experiment truth/observation sequence.

    Projected filters advance a QR tracker along the filter's own
    trajectory: particle filters linearize at the pre-update weighted
    particle mean, Kalman filters at the analysis mean. Returns one
    AssimilationStepRecord per observation time.
    """
    n_steps = ys.shape[0]
    if truth.shape[0] != n_steps + 1:
        raise ValueError("truth must have n_steps + 1 rows")
    rng = np.random.default_rng(seed)
    kind = config.kind
    n_dim = model.dim

    tracker = None
    if kind in PROJECTED_KINDS:
        t_rng = np.random.default_rng(tracker_seed if tracker_seed is not None else seed + 1)
        tracker = qr_tracker_init(n_dim, config.proj_rank, t_rng)

    proposal = None
    if kind in ("op_pf", "proj_op_pf", "op_pf_proj_resamp"):
        proposal = OptimalProposal(model, obs)

    sigma = model.model_noise_var * np.eye(n_dim)
    if kind in PF_KINDS or kind in ("etkf", "proj_etkf"):
        particles = init_mean[None, :] + init_std * rng.standard_normal(
            (config.n_particles, n_dim))
        state = Ensemble.uniform(particles)
    else:
        state = GaussianBelief(mean=np.asarray(init_mean, dtype=np.float64),
                               cov=init_std ** 2 * np.eye(n_dim))

    records = []
    for n in range(1, n_steps + 1):
        y = ys[n - 1]
        t0 = time.perf_counter()
        pm = yq = None
        if tracker is not None:
            lin_point = state.mean() if isinstance(state, Ensemble) else state.mean
            tracker = qr_tracker_step(tracker, model, lin_point, config.fd_epsilon)
            basis = tracker.basis
            if kind != "op_pf_proj_resamp":
                pm = build_projected_model(obs, basis)
                yq = project_observation(pm, basis, obs, y)

        if kind == "pf":
            state, info = pf_bootstrap_step(
                state, model, obs, y, rng,
                resample_threshold=config.resample_threshold,
                resample_noise=config.resample_noise, collapse="reset")
        elif kind == "proj_pf":
            state, info = pf_proj_step(
                state, model, pm, yq, rng,
                resample_threshold=config.resample_threshold,
                resample_noise=config.resample_noise, collapse="reset")
        elif kind == "op_pf":
            state, info = op_pf_step(
                state, model, obs, y, rng, proposal=proposal,
                resample_threshold=config.resample_threshold,
                resample_noise=config.resample_noise, collapse="reset")
        elif kind == "op_pf_proj_resamp":
            state, info = op_pf_step(
                state, model, obs, y, rng, proposal=proposal,
                resample_threshold=config.resample_threshold,
                resample_noise=config.resample_noise,
                resample_alpha=config.resample_alpha, basis=tracker.basis,
                collapse="reset")
        elif kind == "proj_op_pf":
            state, info = proj_op_pf_step(
                state, model, obs, y, pm, yq, tracker.basis, rng, proposal=proposal,
                resample_threshold=config.resample_threshold,
                resample_noise=config.resample_noise,
                resample_alpha=config.resample_alpha, collapse="reset")
        elif kind == "etkf":
            state, info = etkf_step(state, model, obs.H, obs.R_inv, y, rng,
                                    inflation=config.inflation)
        elif kind == "proj_etkf":
            state, info = etkf_step(state, model, pm.Hq, pm.Rq_inv, yq, rng,
                                    inflation=config.inflation)
        elif kind == "kf":
            if model.kind != models.STIFF_LINEAR:
                raise ConfigurationError("kf requires a linear model")
            state = kf_step(state, model.linear.propagator, sigma, obs, y)
            info = StepInfo(ess=np.nan, resampled=False)
        elif kind == "ekf":
            state = ekf_step(state, model, sigma, obs, y, config.fd_epsilon)
            info = StepInfo(ess=np.nan, resampled=False)
        elif kind == "ekf_aus":
            A = models.tangent_apply(model, state.mean, np.eye(n_dim), config.fd_epsilon)
            uf = models.step_deterministic(model, state.mean)
            Pf = A @ state.cov @ A.T + sigma
            K = ekf_aus_gain(Pf, tracker.basis, obs)
            ua = uf + K @ (y - obs.H @ uf)
            Pa = (np.eye(n_dim) - K @ obs.H) @ Pf
            state = GaussianBelief(mean=ua, cov=Pa)
            info = StepInfo(ess=np.nan, resampled=False)
        else:  # unreachable after config validation
            raise ConfigurationError(f"unknown filter kind {kind!r}")

        mean = state.mean() if isinstance(state, Ensemble) else state.mean
        records.append(AssimilationStepRecord(
            step=n,
            mean=mean,
            rmse=_rmse(mean, truth[n]),
            ess=info.ess,
            resampled=info.resampled,
            proj_rank=pm.rank if pm is not None else (
                config.proj_rank if tracker is not None else None),
            wall_time=time.perf_counter() - t0,
            collapsed=info.collapsed,
        ))
    return records
