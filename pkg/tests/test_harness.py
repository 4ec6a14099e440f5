"""Tests for config parsing, seed derivation, experiment orchestration,
sweeps, figure emission, and the command-line interface."""

import copy
import json

import numpy as np
import pytest

from projda import cli, harness
from projda.harness import (
    ConfigError,
    MissingCoverageError,
    derive_seed,
    emit_plot_data,
    load_config,
    run_experiment,
    run_sweep,
)

BASE_CONFIG = {
    "version": 1,
    "model": {
        "kind": "stiff_linear",
        "dim": 20,
        "obs_interval": 0.1,
        "model_noise_var": 0.05,
        "truth_noise_var": 0.0,
    },
    "observation": {"every": 2, "obs_var": 0.0025},
    "filters": [
        {"kind": "pf", "n_particles": 40, "resample_noise": 0.02},
        {"kind": "proj_pf", "n_particles": 40, "proj_rank": 2,
         "resample_noise": 0.02},
    ],
    "n_steps": 12,
    "spinup": 4,
    "window": 8,
    "repetitions": 2,
    "base_seed": 11,
    "init": {"std": 0.2, "bias": 0.22},
}


def make_config(**overrides):
    raw = copy.deepcopy(BASE_CONFIG)
    for key, value in overrides.items():
        section, _, leaf = key.partition(".")
        if leaf:
            raw[section][leaf] = value
        else:
            raw[section] = value
    return raw


# ---------------------------------------------------------------------------
# seed derivation

def test_derive_seed_deterministic():
    assert derive_seed(42, 0, "truth") == derive_seed(42, 0, "truth")


def test_derive_seed_distinct_streams():
    seen = {derive_seed(base, rep, role)
            for base in range(10)
            for rep in range(100)
            for role in ("system", "truth", "filter:pf", "tracker:pf")}
    assert len(seen) == 10 * 100 * 4


def test_derive_seed_role_changes_stream():
    assert derive_seed(1, 0, "filter:pf") != derive_seed(1, 0, "filter:proj_pf")


def test_derive_seed_in_63_bit_range():
    s = derive_seed(123456789, 7, "truth")
    assert 0 <= s < 2 ** 63


# ---------------------------------------------------------------------------
# config parsing

def test_load_config_roundtrip(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(BASE_CONFIG))
    config = load_config(str(path))
    assert config.dim == 20
    assert config.observed_indices == tuple(range(0, 20, 2))
    assert config.truth_noise_var == 0.0
    assert config.init_bias == 0.22
    assert [fc.kind for fc in config.filters] == ["pf", "proj_pf"]


@pytest.mark.parametrize("raw,fragment", [
    (make_config(version=2), "version"),
    ({k: v for k, v in BASE_CONFIG.items() if k != "observation"}, "observation"),
    (make_config(**{"model.kind": "pendulum"}), "model.kind"),
    (make_config(**{"model.dim": "twenty"}), "model.dim"),
    (make_config(**{"model.obs_interval": -1.0}), "obs_interval"),
    (make_config(**{"model.truth_noise_var": -0.5}), "truth_noise_var"),
    (make_config(observation={"obs_var": 0.01}), "observation"),
    (make_config(observation={"indices": [0, 0, 1], "obs_var": 0.01}), "duplicate"),
    (make_config(observation={"indices": [25], "obs_var": 0.01}), "indices"),
    (make_config(observation={"every": 2, "obs_var": -1.0}), "obs_var"),
    (make_config(filters=[]), "filters"),
    (make_config(filters=[{"kind": "pf", "color": "red"}]), "filters[0]"),
    (make_config(filters=[{"kind": "warp_drive"}]), "filters[0]"),
    (make_config(n_steps=5), "n_steps"),
    (make_config(repetitions=0), "repetitions"),
    (make_config(sweep={"q": [1]}), "sweep.q"),
    (make_config(sweep={"p": []}), "sweep.p"),
])
def test_load_config_field_errors(raw, fragment):
    with pytest.raises(ConfigError, match=fragment.replace("[", "\\[")):
        load_config(raw)


def test_duplicate_filter_labels_rejected():
    raw = make_config(filters=[{"kind": "pf"}, {"kind": "pf"}])
    with pytest.raises(ConfigError, match="duplicate"):
        load_config(raw)
    named = make_config(filters=[{"kind": "pf", "name": "a"},
                                 {"kind": "pf", "name": "b"}])
    assert len(load_config(named).filters) == 2


# ---------------------------------------------------------------------------
# experiment runs and outputs

def test_run_experiment_outputs_byte_identical(tmp_path):
    config = load_config(BASE_CONFIG)
    d1, d2 = tmp_path / "a", tmp_path / "b"
    run_experiment(config, out_dir=str(d1))
    run_experiment(config, out_dir=str(d2), jobs=2)
    for name in ["steps_rep000.csv", "steps_rep001.csv", "summary.json"]:
        assert (d1 / name).read_bytes() == (d2 / name).read_bytes()


def test_run_experiment_step_csv_contract(tmp_path):
    config = load_config(BASE_CONFIG)
    run_experiment(config, out_dir=str(tmp_path))
    lines = (tmp_path / "steps_rep000.csv").read_text().splitlines()
    assert lines[0] == "step,time,filter,rmse,ess,resampled"
    # one row per (filter, step)
    assert len(lines) == 1 + 2 * config.n_steps
    first = lines[1].split(",")
    assert first[0] == "1" and first[2] == "pf"
    assert float(first[1]) == pytest.approx(0.1)
    assert float(first[3]) > 0
    assert first[5] in ("0", "1")


def test_run_experiment_summary_json(tmp_path):
    config = load_config(BASE_CONFIG)
    results = run_experiment(config, out_dir=str(tmp_path))
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["repetitions"] == 2
    assert len(summary["runs"]) == 4
    for entry in summary["runs"]:
        s = results[entry["repetition"]][entry["filter"]][1]
        assert entry["mean_rmse"] == s.mean_rmse
        assert entry["diverged"] == s.diverged


def test_quick_caps_repetitions():
    config = load_config(make_config(repetitions=9, n_steps=6, spinup=1, window=5))
    results = run_experiment(config, quick=True)
    assert len(results) == harness.QUICK_REPETITIONS


def test_shared_truth_pairs_filters():
    # within one repetition both filters assimilate identical observations;
    # the projected filter on the stiff system must not do worse by much
    config = load_config(BASE_CONFIG)
    results = run_experiment(config)
    for rep in results.values():
        assert set(rep) == {"pf", "proj_pf"}


def test_divergence_ceiling_flags(tmp_path):
    raw = make_config(rmse_ceiling=1e-12)
    config = load_config(raw)
    results = run_experiment(config)
    assert harness.any_diverged(results)


# ---------------------------------------------------------------------------
# sweeps and figure emission

SWEEP_CONFIG = {
    "version": 1,
    "model": {"kind": "stiff_linear", "dim": 20, "obs_interval": 0.1,
              "model_noise_var": 0.05, "truth_noise_var": 0.0},
    "observation": {"every": 2, "obs_var": 0.0025},
    "filters": [
        {"kind": "op_pf", "n_particles": 30},
        {"kind": "proj_op_pf", "n_particles": 30, "proj_rank": 2},
    ],
    "n_steps": 8,
    "spinup": 2,
    "window": 6,
    "repetitions": 2,
    "base_seed": 3,
    "sweep": {"p": [2, 4], "omega": [0.0, 0.02]},
}


def test_run_sweep_grid_and_best(tmp_path):
    config = load_config(SWEEP_CONFIG)
    rows = run_sweep(config, out_dir=str(tmp_path))
    plain = [r for r in rows if r.filter_label == "op_pf"]
    proj = [r for r in rows if r.filter_label == "proj_op_pf"]
    assert len(plain) == 2          # omega grid only
    assert len(proj) == 4           # p x omega
    assert sum(r.best for r in plain) == 1
    assert sum(r.best for r in proj) == 1
    best = min(proj, key=lambda r: r.mean_rmse)
    assert best.best
    assert (tmp_path / "sweep.csv").exists()


def test_sweep_matches_single_run_on_grid_point(tmp_path):
    config = load_config(SWEEP_CONFIG)
    rows = run_sweep(config)
    target = next(r for r in rows if r.filter_label == "proj_op_pf"
                  and r.p == 4 and r.omega == 0.02)
    direct_raw = copy.deepcopy(SWEEP_CONFIG)
    direct_raw.pop("sweep")
    direct_raw["filters"] = [{"kind": "proj_op_pf", "n_particles": 30,
                              "proj_rank": 4, "resample_noise": 0.02}]
    direct = run_experiment(load_config(direct_raw))
    rmses = [direct[rep]["proj_op_pf"][1].mean_rmse for rep in sorted(direct)]
    assert target.mean_rmse == pytest.approx(np.mean(rmses), abs=1e-12)


def test_sweep_csv_roundtrip(tmp_path):
    config = load_config(SWEEP_CONFIG)
    rows = run_sweep(config, out_dir=str(tmp_path))
    back = harness.read_sweep_csv(str(tmp_path / "sweep.csv"))
    assert len(back) == len(rows)
    for a, b in zip(rows, back):
        assert a.filter_label == b.filter_label
        assert a.p == b.p
        assert a.mean_rmse == b.mean_rmse    # repr() floats round-trip exactly
        assert a.best == b.best


def test_emit_figure_roundtrip(tmp_path):
    config = load_config(SWEEP_CONFIG)
    run_sweep(config, out_dir=str(tmp_path))
    out = emit_plot_data(str(tmp_path), "l96_tune_p")
    lines = (tmp_path / "fig_l96_tune_p.csv").read_text().splitlines()
    assert out.endswith("fig_l96_tune_p.csv")
    assert lines[0].startswith("p,mean_rmse")
    ps = [int(line.split(",")[0]) for line in lines[1:]]
    assert ps == [2, 4]


def test_emit_unknown_figure(tmp_path):
    with pytest.raises(MissingCoverageError):
        emit_plot_data(str(tmp_path), "nope")


def test_emit_missing_sweep(tmp_path):
    with pytest.raises(MissingCoverageError):
        emit_plot_data(str(tmp_path), "l96_tune_p")


# ---------------------------------------------------------------------------
# CLI

def write_config(tmp_path, raw, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(raw))
    return str(path)


def test_cli_validate_ok(tmp_path, capsys):
    path = write_config(tmp_path, BASE_CONFIG)
    assert cli.main(["validate", path]) == cli.EXIT_OK
    assert "OK" in capsys.readouterr().out


def test_cli_validate_bad_config(tmp_path, capsys):
    path = write_config(tmp_path, make_config(version=99))
    assert cli.main(["validate", path]) == cli.EXIT_CONFIG
    assert "error" in capsys.readouterr().err


def test_cli_missing_file_is_config_error(tmp_path):
    assert cli.main(["validate", str(tmp_path / "absent.json")]) == cli.EXIT_CONFIG


def test_cli_run_and_emit(tmp_path, capsys):
    cfg = write_config(tmp_path, SWEEP_CONFIG)
    out = str(tmp_path / "results")
    assert cli.main(["sweep", cfg, "--out", out]) == cli.EXIT_OK
    assert cli.main(["emit", out, "--figure", "l96_tune_p"]) == cli.EXIT_OK
    capsys.readouterr()


def test_cli_run_writes_outputs(tmp_path):
    cfg = write_config(tmp_path, BASE_CONFIG)
    out = str(tmp_path / "results")
    assert cli.main(["run", cfg, "--out", out, "--quick"]) == cli.EXIT_OK
    assert (tmp_path / "results" / "summary.json").exists()


def test_cli_run_divergence_exit_code(tmp_path):
    raw = make_config(rmse_ceiling=1e-12)
    cfg = write_config(tmp_path, raw)
    out = str(tmp_path / "results")
    assert cli.main(["run", cfg, "--out", out]) == cli.EXIT_DIVERGED


def test_cli_seed_override_changes_outputs(tmp_path):
    cfg = write_config(tmp_path, BASE_CONFIG)
    a, b, c = (str(tmp_path / d) for d in ("a", "b", "c"))
    assert cli.main(["run", cfg, "--out", a, "--seed", "1"]) == cli.EXIT_OK
    assert cli.main(["run", cfg, "--out", b, "--seed", "1"]) == cli.EXIT_OK
    assert cli.main(["run", cfg, "--out", c, "--seed", "2"]) == cli.EXIT_OK
    read = lambda d: (tmp_path / d / "steps_rep000.csv").read_bytes()
    assert read("a") == read("b")
    assert read("a") != read("c")
