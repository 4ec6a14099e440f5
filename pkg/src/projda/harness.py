"""Experiment orchestration: declarative JSON configs, twin-experiment runs,
(p, omega, alpha) parameter sweeps with repetition management, and CSV/JSON
emission of the results.

Within one repetition every configured filter sees the same truth,
observations, and observation-noise realizations, so comparisons are
paired. All randomness derives from the base seed through stable hashing,
making outputs byte-for-byte reproducible.
"""

import csv
import hashlib
import itertools
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import models
from .diagnostics import summarize_run
from .filters import PF_KINDS, PROJECTED_KINDS, ConfigurationError, FilterConfig, run_filter
from .projection import ObservationModel

__all__ = [
    "ConfigError",
    "MissingCoverageError",
    "ExperimentConfig",
    "SweepResult",
    "derive_seed",
    "load_config",
    "run_experiment",
    "run_sweep",
    "emit_plot_data",
]

CONFIG_VERSION = 1
QUICK_REPETITIONS = 5

STEP_CSV_HEADER = ["step", "time", "filter", "rmse", "ess", "resampled"]
SWEEP_CSV_HEADER = [
    "filter", "p", "omega", "alpha",
    "mean_rmse", "std_rmse", "resample_pct", "diverged_count", "best",
]


class ConfigError(ValueError):
    """Invalid experiment configuration; message names the offending field."""


class MissingCoverageError(RuntimeError):
    """The requested figure needs grid points absent from the results."""


def derive_seed(base, repetition, role):
    """Stable 63-bit seed derived from (base seed, repetition, role string).

    Roles in use: "system" (shared stiff-linear construction), "truth",
    "filter:<label>", "tracker:<label>". Frozen: sha256 of
    "projda|{base}|{repetition}|{role}".
    """
    digest = hashlib.sha256(f"projda|{base}|{repetition}|{role}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def _fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated, declarative description of a twin experiment."""

    model_kind: str
    dim: int
    obs_interval: float
    filters: tuple
    n_steps: int
    spinup: int
    window: int
    base_seed: int
    repetitions: int = 1
    forcing: float = 8.0
    substeps: int = 5
    model_noise_var: float = 0.01
    truth_noise_var: float | None = None
    observed_indices: tuple = ()
    obs_var: float = 0.01
    init_std: float = 0.2
    init_bias: float = 0.0
    l96_transient_time: float = 10.0
    l96_perturb_std: float = 0.5
    rmse_ceiling: float | None = None
    sweep_p: tuple = ()
    sweep_omega: tuple = ()
    sweep_alpha: tuple = ()

    def __post_init__(self):
        if self.model_kind not in (models.STIFF_LINEAR, models.LORENZ96):
            raise ConfigError(f"model.kind: unknown kind {self.model_kind!r}")
        if self.dim < 1:
            raise ConfigError("model.dim: must be >= 1")
        if self.obs_interval <= 0:
            raise ConfigError("model.obs_interval: must be > 0")
        if self.substeps < 1:
            raise ConfigError("model.substeps: must be >= 1")
        if self.model_noise_var < 0:
            raise ConfigError("model.model_noise_var: must be >= 0")
        if self.truth_noise_var is not None and self.truth_noise_var < 0:
            raise ConfigError("model.truth_noise_var: must be >= 0")
        if not self.filters:
            raise ConfigError("filters: at least one filter required")
        if not self.observed_indices:
            raise ConfigError("observation: no observed variables")
        idx = np.asarray(self.observed_indices)
        if idx.min() < 0 or idx.max() >= self.dim:
            raise ConfigError("observation.indices: indices must lie in [0, dim)")
        if len(set(self.observed_indices)) != len(self.observed_indices):
            raise ConfigError("observation.indices: duplicate index")
        if self.obs_var <= 0:
            raise ConfigError("observation.obs_var: must be > 0")
        if self.n_steps < 1:
            raise ConfigError("n_steps: must be >= 1")
        if self.spinup < 0 or self.window < 1:
            raise ConfigError("spinup/window: need spinup >= 0 and window >= 1")
        if self.spinup + self.window > self.n_steps:
            raise ConfigError("n_steps: must cover spinup + window")
        if self.repetitions < 1:
            raise ConfigError("repetitions: must be >= 1")
        labels = [fc.label for fc in self.filters]
        if len(set(labels)) != len(labels):
            raise ConfigError("filters: duplicate filter labels")

    def build_model(self):
        if self.model_kind == models.STIFF_LINEAR:
            rng = np.random.default_rng(derive_seed(self.base_seed, 0, "system"))
            return models.build_stiff_linear(
                self.dim, rng, dt=self.obs_interval,
                model_noise_var=self.model_noise_var)
        return models.ModelSpec(
            kind=models.LORENZ96, dim=self.dim, obs_interval=self.obs_interval,
            forcing=self.forcing, substeps=self.substeps,
            model_noise_var=self.model_noise_var)

    def build_observation(self):
        return ObservationModel.selector(self.dim, self.observed_indices, self.obs_var)


def _parse_filters(raw_filters):
    if not isinstance(raw_filters, list):
        raise ConfigError("filters: must be a list")
    out = []
    for i, raw in enumerate(raw_filters):
        if not isinstance(raw, dict) or "kind" not in raw:
            raise ConfigError(f"filters[{i}]: must be an object with a 'kind' field")
        allowed = {"kind", "n_particles", "resample_threshold", "resample_noise",
                   "resample_alpha", "proj_rank", "inflation", "fd_epsilon", "name"}
        unknown = set(raw) - allowed
        if unknown:
            raise ConfigError(f"filters[{i}]: unknown fields {sorted(unknown)}")
        try:
            out.append(FilterConfig(**raw))
        except ConfigurationError as exc:
            raise ConfigError(f"filters[{i}]: {exc}") from exc
    return tuple(out)


def _parse_observed(obs_raw, dim):
    if "indices" in obs_raw:
        return tuple(int(i) for i in obs_raw["indices"])
    if "every" in obs_raw:
        every = int(obs_raw["every"])
        if every < 1:
            raise ConfigError("observation.every: must be >= 1")
        return tuple(range(0, dim, every))
    raise ConfigError("observation: need 'indices' or 'every'")


def load_config(source):
    """Parse and validate a JSON config from a path, file object, or dict."""
    if isinstance(source, dict):
        raw = source
    elif hasattr(source, "read"):
        raw = json.load(source)
    else:
        with open(source) as fh:
            raw = json.load(fh)
    if raw.get("version") != CONFIG_VERSION:
        raise ConfigError(f"version: expected {CONFIG_VERSION}, got {raw.get('version')!r}")
    for section in ("model", "observation", "filters"):
        if section not in raw:
            raise ConfigError(f"{section}: missing section")
    model = raw["model"]
    obs = raw["observation"]
    init = raw.get("init", {})
    sweep = raw.get("sweep", {})
    try:
        dim = int(model["dim"])
    except (KeyError, TypeError, ValueError):
        raise ConfigError("model.dim: missing or not an integer") from None
    for key, vals in sweep.items():
        if key not in ("p", "omega", "alpha"):
            raise ConfigError(f"sweep.{key}: unknown sweep parameter")
        if not isinstance(vals, list) or not vals:
            raise ConfigError(f"sweep.{key}: must be a non-empty list")
    try:
        return ExperimentConfig(
            model_kind=model.get("kind", ""),
            dim=dim,
            obs_interval=float(model.get("obs_interval", 0.0)),
            forcing=float(model.get("forcing", 8.0)),
            substeps=int(model.get("substeps", 5)),
            model_noise_var=float(model.get("model_noise_var", 0.0)),
            truth_noise_var=(float(model["truth_noise_var"])
                             if model.get("truth_noise_var") is not None else None),
            observed_indices=_parse_observed(obs, dim),
            obs_var=float(obs.get("obs_var", 0.0)),
            filters=_parse_filters(raw["filters"]),
            n_steps=int(raw.get("n_steps", 0)),
            spinup=int(raw.get("spinup", 0)),
            window=int(raw.get("window", 0)),
            repetitions=int(raw.get("repetitions", 1)),
            base_seed=int(raw.get("base_seed", 0)),
            init_std=float(init.get("std", 0.2)),
            init_bias=float(init.get("bias", 0.0)),
            l96_transient_time=float(init.get("l96_transient_time", 10.0)),
            l96_perturb_std=float(init.get("l96_perturb_std", 0.5)),
            rmse_ceiling=(float(raw["rmse_ceiling"]) if raw.get("rmse_ceiling")
                          is not None else None),
            sweep_p=tuple(int(v) for v in sweep.get("p", ())),
            sweep_omega=tuple(float(v) for v in sweep.get("omega", ())),
            sweep_alpha=tuple(float(v) for v in sweep.get("alpha", ())),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# truth generation and single runs

def make_truth(config, model, repetition):
    """Generate one repetition's truth, observations, and filter init mean."""
    rng = np.random.default_rng(derive_seed(config.base_seed, repetition, "truth"))
    obs = config.build_observation()
    if config.truth_noise_var is not None:
        # The truth may evolve with different (e.g. zero) model noise than the
        # forecast model the filters use — the classic setting where the
        # filters' additive noise stands in for model error.
        model = replace(model, model_noise_var=config.truth_noise_var)
    if config.model_kind == models.STIFF_LINEAR:
        u0 = rng.standard_normal(config.dim)
    else:
        u0 = config.forcing * np.ones(config.dim) \
            + config.l96_perturb_std * rng.standard_normal(config.dim)
        n_trans = int(round(config.l96_transient_time / config.obs_interval))
        for _ in range(n_trans):
            u0 = models.step_deterministic(model, u0)
    truth, ys = models.generate_truth_and_observations(
        model, obs, u0, config.n_steps, rng)
    if config.init_bias > 0:
        direction = rng.standard_normal(config.dim)
        direction /= np.linalg.norm(direction)
        init_mean = truth[0] + config.init_bias * direction
    else:
        init_mean = truth[0].copy()
    return truth, ys, init_mean


def _run_one_filter(config, model, obs, fc, truth, ys, init_mean, repetition):
    records = run_filter(
        fc, model, obs, truth, ys, init_mean, config.init_std,
        seed=derive_seed(config.base_seed, repetition, f"filter:{fc.label}"),
        tracker_seed=derive_seed(config.base_seed, repetition, f"tracker:{fc.label}"),
        rmse_ceiling=config.rmse_ceiling,
    )
    summary = summarize_run(records, config.spinup, config.window,
                            rmse_ceiling=config.rmse_ceiling)
    return records, summary


def _apply_quick(config, quick):
    if not quick:
        return config
    return replace(config, repetitions=min(config.repetitions, QUICK_REPETITIONS))


def _repetition_task(args):
    config, repetition = args
    model = config.build_model()
    obs = config.build_observation()
    truth, ys, init_mean = make_truth(config, model, repetition)
    out = {}
    for fc in config.filters:
        records, summary = _run_one_filter(
            config, model, obs, fc, truth, ys, init_mean, repetition)
        out[fc.label] = (records, summary)
    return repetition, out


def _map_tasks(task_fn, tasks, jobs):
    if jobs <= 1 or len(tasks) <= 1:
        return [task_fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(task_fn, tasks))


def run_experiment(config, out_dir=None, quick=False, jobs=1):
    """Run every configured filter over shared truths, one truth per repetition.

    Returns {repetition: {filter label: (records, RunSummary)}} and, when
    out_dir is given, writes per-repetition step CSVs and a summary JSON.
    """
    config = _apply_quick(config, quick)
    tasks = [(config, rep) for rep in range(config.repetitions)]
    results = dict(_map_tasks(_repetition_task, tasks, jobs))
    if out_dir is not None:
        _write_experiment_outputs(config, results, out_dir)
    return results


def _write_experiment_outputs(config, results, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    summary = {"config_version": CONFIG_VERSION, "base_seed": config.base_seed,
               "repetitions": config.repetitions, "runs": []}
    for rep in sorted(results):
        path = os.path.join(out_dir, f"steps_rep{rep:03d}.csv")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(STEP_CSV_HEADER)
            for label in [fc.label for fc in config.filters]:
                records, _ = results[rep][label]
                for r in records:
                    writer.writerow([
                        r.step, _fmt(r.step * config.obs_interval), label,
                        _fmt(r.rmse), _fmt(r.ess), _fmt(r.resampled)])
        for label in [fc.label for fc in config.filters]:
            _, s = results[rep][label]
            summary["runs"].append({
                "repetition": rep, "filter": label,
                "mean_rmse": s.mean_rmse, "resample_pct": s.resample_pct,
                "diverged": s.diverged,
            })
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def any_diverged(results):
    return any(s.diverged for per_rep in results.values()
               for _, s in per_rep.values())


# ---------------------------------------------------------------------------
# sweeps

@dataclass(frozen=True)
class SweepResult:
    filter_label: str
    kind: str
    p: int | None
    omega: float
    alpha: float
    mean_rmse: float
    std_rmse: float
    resample_pct: float
    diverged_count: int
    best: bool = False


def _grid_for_filter(config, fc):
    """Effective (p, omega, alpha) grid for one filter; non-applicable
    parameters collapse to the filter's own configured value."""
    omegas = config.sweep_omega or (fc.resample_noise,)
    if fc.kind in PROJECTED_KINDS:
        ps = config.sweep_p or (fc.proj_rank,)
        alphas = config.sweep_alpha or (fc.resample_alpha,)
        if fc.kind == "proj_pf":
            alphas = (fc.resample_alpha,)
    elif fc.kind in PF_KINDS:
        ps = (None,)
        alphas = (0.0,)
    else:
        ps = (None,)
        alphas = (0.0,)
        omegas = (0.0,)
    return list(itertools.product(ps, omegas, alphas))


def _sweep_task(args):
    config, fc, point, repetition = args
    p, omega, alpha = point
    fc_run = replace(fc, resample_noise=omega, resample_alpha=alpha,
                     proj_rank=(p if p is not None else fc.proj_rank))
    model = config.build_model()
    obs = config.build_observation()
    truth, ys, init_mean = make_truth(config, model, repetition)
    _, summary = _run_one_filter(config, model, obs, fc_run, truth, ys,
                                 init_mean, repetition)
    return (fc.label, point, repetition), summary


def run_sweep(config, out_dir=None, quick=False, jobs=1):
    """Sweep the (p, omega, alpha) grid for every filter.

    All grid points within a repetition share that repetition's truth and
    observations. Returns a list of SweepResult with the per-filter
    argmin-RMSE point flagged; writes sweep.csv when out_dir is given.
    """
    config = _apply_quick(config, quick)
    tasks = []
    for fc in config.filters:
        for point in _grid_for_filter(config, fc):
            for rep in range(config.repetitions):
                tasks.append((config, fc, point, rep))
    raw = dict(_map_tasks(_sweep_task, tasks, jobs))

    results = []
    for fc in config.filters:
        rows = []
        for point in _grid_for_filter(config, fc):
            p, omega, alpha = point
            sums = [raw[(fc.label, point, rep)] for rep in range(config.repetitions)]
            rmses = np.array([s.mean_rmse for s in sums])
            rows.append(SweepResult(
                filter_label=fc.label, kind=fc.kind, p=p, omega=omega, alpha=alpha,
                mean_rmse=float(rmses.mean()),
                std_rmse=float(rmses.std(ddof=1)) if len(rmses) > 1 else 0.0,
                resample_pct=float(np.mean([s.resample_pct for s in sums])),
                diverged_count=int(sum(s.diverged for s in sums)),
            ))
        best_i = int(np.argmin([r.mean_rmse for r in rows]))
        rows[best_i] = replace(rows[best_i], best=True)
        results.extend(rows)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "sweep.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(SWEEP_CSV_HEADER)
            for r in results:
                writer.writerow([
                    r.filter_label, "" if r.p is None else r.p,
                    _fmt(r.omega), _fmt(r.alpha), _fmt(r.mean_rmse),
                    _fmt(r.std_rmse), _fmt(r.resample_pct),
                    r.diverged_count, _fmt(r.best)])
    return results


def read_sweep_csv(path):
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append(SweepResult(
                filter_label=row["filter"], kind="",
                p=int(row["p"]) if row["p"] else None,
                omega=float(row["omega"]), alpha=float(row["alpha"]),
                mean_rmse=float(row["mean_rmse"]), std_rmse=float(row["std_rmse"]),
                resample_pct=float(row["resample_pct"]),
                diverged_count=int(row["diverged_count"]),
                best=row["best"] == "1"))
    return rows


FIGURE_IDS = ("l96_tune_p",)


def emit_plot_data(results_dir, figure_id, out_path=None):
    """Write one figure's backing data as CSV from a sweep results directory.

    ``l96_tune_p``: per-p best RMSE and resampling percentage for the
    projected optimal-proposal filter alongside the plain one.
    """
    if figure_id not in FIGURE_IDS:
        raise MissingCoverageError(
            f"unknown figure id {figure_id!r}; known: {', '.join(FIGURE_IDS)}")
    sweep_path = os.path.join(results_dir, "sweep.csv")
    if not os.path.exists(sweep_path):
        raise MissingCoverageError(f"no sweep.csv in {results_dir}")
    rows = read_sweep_csv(sweep_path)
    proj = [r for r in rows if r.p is not None]
    plain = [r for r in rows if r.p is None]
    if not proj or not plain:
        raise MissingCoverageError(
            "figure l96_tune_p needs both a p-swept filter and an unswept baseline")
    best_plain = min(plain, key=lambda r: r.mean_rmse)
    per_p = {}
    for r in proj:
        if r.p not in per_p or r.mean_rmse < per_p[r.p].mean_rmse:
            per_p[r.p] = r
    if out_path is None:
        out_path = os.path.join(results_dir, f"fig_{figure_id}.csv")
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["p", "mean_rmse_projoppf", "mean_rmse_oppf",
                         "resample_pct_projoppf", "resample_pct_oppf"])
        for p in sorted(per_p):
            r = per_p[p]
            writer.writerow([p, _fmt(r.mean_rmse), _fmt(best_plain.mean_rmse),
                             _fmt(r.resample_pct), _fmt(best_plain.resample_pct)])
    return out_path
