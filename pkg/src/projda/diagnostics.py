"""Evaluation quantities: RMSE, run summaries, Gaussian Hellinger distance,
and the consistency check comparing the projected-data posterior against
the full-data posterior in the linear-Gaussian regime."""

import math
from dataclasses import dataclass

import numpy as np

from .filters import GaussianBelief, kf_update
from .projection import build_orthogonal_model, build_projected_model, lift_observation

__all__ = [
    "rmse",
    "RunSummary",
    "summarize_run",
    "gaussian_hellinger",
    "algorithm1_consistency_check",
]


def rmse(estimate, truth):
    """Root mean squared error over the state components."""
    e = np.asarray(estimate, dtype=np.float64) - np.asarray(truth, dtype=np.float64)
    return float(np.sqrt(e @ e / e.size))


@dataclass(frozen=True)
class RunSummary:
    mean_rmse: float
    spinup: int
    window: int
    resample_pct: float
    diverged: bool
    rmse_series: np.ndarray
    ess_series: np.ndarray


def summarize_run(records, spinup, window, rmse_ceiling=None):
    """Time-mean statistics over a scoring window after a discarded spinup."""
    if window < 1:
        raise ValueError("window must be >= 1")
    if len(records) < spinup + window:
        raise ValueError(
            f"need at least {spinup + window} records, got {len(records)}")
    scored = records[spinup:spinup + window]
    rmse_series = np.array([r.rmse for r in scored])
    ess_series = np.array([r.ess for r in scored])
    resample_pct = 100.0 * sum(r.resampled for r in scored) / window
    diverged = bool(rmse_ceiling is not None and np.any(rmse_series > rmse_ceiling))
    return RunSummary(
        mean_rmse=float(rmse_series.mean()),
        spinup=spinup,
        window=window,
        resample_pct=resample_pct,
        diverged=diverged,
        rmse_series=rmse_series,
        ess_series=ess_series,
    )


def _log_gaussian_density(x, mean, cov):
    # log N(x; mean, cov) computed via Cholesky, safe for tiny determinants
    d = np.atleast_1d(x - mean)
    cov = np.atleast_2d(cov)
    chol = np.linalg.cholesky(cov)
    sol = np.linalg.solve(chol, d)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (d.size * math.log(2.0 * math.pi) + logdet + sol @ sol)


def gaussian_hellinger(g1, g2):
    """Closed-form Hellinger distance between two multivariate Gaussians.

    d^2 = 1 - [det(C1)^(1/4) det(C2)^(1/4) / det((C1+C2)/2)^(1/2)]
              * exp(-1/8 (m1-m2)^T ((C1+C2)/2)^{-1} (m1-m2)),
    evaluated in the log domain.
    """
    c1 = np.atleast_2d(g1.cov)
    c2 = np.atleast_2d(g2.cov)
    reg = 1e-12 * np.eye(c1.shape[0])
    c1 = c1 + reg
    c2 = c2 + reg
    cm = 0.5 * (c1 + c2)
    s1, ld1 = np.linalg.slogdet(c1)
    s2, ld2 = np.linalg.slogdet(c2)
    sm, ldm = np.linalg.slogdet(cm)
    if s1 <= 0 or s2 <= 0 or sm <= 0:
        raise ValueError("covariances must be positive definite")
    delta = np.atleast_1d(np.asarray(g1.mean) - np.asarray(g2.mean))
    quad = delta @ np.linalg.solve(cm, delta)
    log_bc = 0.25 * ld1 + 0.25 * ld2 - 0.5 * ldm - 0.125 * quad
    d2 = max(0.0, 1.0 - math.exp(log_bc))
    return math.sqrt(min(1.0, d2))


def algorithm1_consistency_check(forecast, obs, basis, y, n_samples=100_000, rng=None):
    """Compare the projected-data posterior to the full posterior for one
    linear-Gaussian analysis step.

    Returns (d_h, bound_estimate, bound_stderr): the closed-form Hellinger
    distance between the two Gaussian posteriors, and a Monte Carlo estimate
    (with standard error) of d_H^2 written as
    (1/2) E_mu (1 - sqrt(p(yqp | yq) / p(yqp | u, yq)))^2
    with u sampled from the full posterior mu and yqp the orthogonal data
    component; sqrt(bound_estimate) estimates d_h itself.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    uf, pf_cov = forecast.mean, forecast.cov

    ua, pa, _ = kf_update(uf, pf_cov, obs.H, obs.R, y)
    full_post = GaussianBelief(mean=ua, cov=pa)

    pm = build_projected_model(obs, basis)
    yq = basis.U.T @ lift_observation(obs, y)
    ua_q, pa_q, _ = kf_update(uf, pf_cov, pm.Hq, pm.Rq, yq)
    proj_post = GaussianBelief(mean=ua_q, cov=pa_q)

    d_h = gaussian_hellinger(full_post, proj_post)

    joint = build_orthogonal_model(obs, basis)
    uperp = basis.complement()
    yqp = uperp.T @ lift_observation(obs, y)
    reg_q = 1e-12 * np.eye(joint.Rq.shape[0])

    # p(yqp | u, yq): Gaussian conditional of the joint data model at fixed u
    rq_inv_r12 = np.linalg.solve(joint.Rq + reg_q, joint.R12)
    cond_cov = joint.Rq_perp - joint.R12.T @ rq_inv_r12
    cond_cov = 0.5 * (cond_cov + cond_cov.T) + 1e-12 * np.eye(cond_cov.shape[0])

    # p(yqp | yq): marginalize u over the forecast prior, then condition on yq
    big_h = np.vstack([joint.Hq, joint.Hq_perp])
    big_cov = big_h @ pf_cov @ big_h.T + joint.joint_covariance()
    p = joint.Hq.shape[0]
    c11 = big_cov[:p, :p]
    c12 = big_cov[:p, p:]
    c22 = big_cov[p:, p:]
    mq = joint.Hq @ uf
    mqp = joint.Hq_perp @ uf
    sol = np.linalg.solve(c11 + reg_q, yq - mq)
    marg_mean = mqp + c12.T @ sol
    marg_cov = c22 - c12.T @ np.linalg.solve(c11 + reg_q, c12)
    marg_cov = 0.5 * (marg_cov + marg_cov.T) + 1e-12 * np.eye(marg_cov.shape[0])
    log_num = _log_gaussian_density(yqp, marg_mean, marg_cov)

    chol_pa = np.linalg.cholesky(pa + 1e-12 * np.eye(pa.shape[0]))
    samples = ua[None, :] + rng.standard_normal((n_samples, ua.size)) @ chol_pa.T
    resid_q = yq[:, None] - joint.Hq @ samples.T
    cond_means = (joint.Hq_perp @ samples.T).T + (rq_inv_r12.T @ resid_q).T

    chol_c = np.linalg.cholesky(cond_cov)
    diffs = np.linalg.solve(chol_c, (yqp[None, :] - cond_means).T)
    logdet_c = 2.0 * np.sum(np.log(np.diag(chol_c)))
    k = cond_cov.shape[0]
    log_den = -0.5 * (k * math.log(2.0 * math.pi) + logdet_c + np.sum(diffs ** 2, axis=0))

    # ratio underflow-safe in log domain; values clipped at exp(700)
    half_log_ratio = np.clip(0.5 * (log_num - log_den), -700.0, 700.0)
    vals = (1.0 - np.exp(half_log_ratio)) ** 2
    bound = 0.5 * float(vals.mean())
    stderr = 0.5 * float(vals.std(ddof=1)) / math.sqrt(n_samples)
    return d_h, bound, stderr
