import json
import math
import subprocess
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import yaml

from manifold_elites.archive import load_archive
from manifold_elites.errors import ConfigurationError
from manifold_elites.manifold import AeTrainConfig, load_model_file
from manifold_elites.presets import get_preset, preset_names
from manifold_elites.runner import (ALGORITHMS, METRICS_HEADER,
                                    ExperimentConfig, MetricsRecord,
                                    aggregate_curves, collect_runs, load_config,
                                    read_metrics, run_experiment, run_suite,
                                    write_metrics)

TINY_AE = AeTrainConfig(lr=1e-3, epochs=40, batch_size=32, early_stop_window=20)


def tiny_cfg(**kw):
    base = dict(env="kicker", grid="small", algorithm="poms", loops=1,
                iterations_per_loop=2, batch_budget=50, init_samples=100,
                latent_dim=4, ae_hidden=16, sigma_theta=0.01, ae=TINY_AE,
                seeds=(1,), workers=1)
    base.update(kw)
    return ExperimentConfig(**base)


# ---------------------------------------------------------------------------
# config


def test_config_defaults_match_reference_budgets():
    cfg = ExperimentConfig()
    assert cfg.iterations_per_loop == 100
    assert cfg.batch_budget == 200
    assert cfg.init_samples == 2000
    assert len(cfg.seeds) == 5


def test_config_validation_rejects_unknowns():
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"algorithm": "gradient-descent"}).validate()
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"no_such_field": 3})
    with pytest.raises(ConfigurationError):
        tiny_cfg(loops=0).validate()
    with pytest.raises(ConfigurationError):
        tiny_cfg(sigma_theta=0.0).validate()


def test_config_cell_count_check_names_dimensions():
    cfg = tiny_cfg(expected_total_cells=999)
    with pytest.raises(ConfigurationError, match=r"40 x 10"):
        cfg.validate()
    tiny_cfg(expected_total_cells=400).validate()


def test_config_yaml_round_trip(tmp_path):
    cfg = tiny_cfg(algorithm="mape-iso", sigma_theta=0.1)
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(cfg.resolved()))
    back = load_config(path)
    assert back == cfg


# ---------------------------------------------------------------------------
# metrics io


def test_metrics_round_trip(tmp_path):
    records = [
        MetricsRecord(0, 0, 100, 0.125, 0.0, float("nan"), 0.0),
        MetricsRecord(0, 1, 150, 0.25, 0.52, 1.2345678901234567, 0.0),
        MetricsRecord(1, 1, 200, 0.3333333333333333, 1.0, 0.5, 0.0),
    ]
    path = tmp_path / "metrics.csv"
    write_metrics(records, path)
    text = path.read_text()
    assert text.splitlines()[0] == METRICS_HEADER
    assert "\r" not in text
    back = read_metrics(path)
    assert len(back) == len(records)
    for a, b in zip(records, back):
        assert (a.loop, a.iteration, a.total_rollouts) == (b.loop, b.iteration,
                                                           b.total_rollouts)
        assert a.coverage == b.coverage
        assert a.latent_fraction == b.latent_fraction
        assert a.wall_time_s == b.wall_time_s
        assert (a.mean_recon_error == b.mean_recon_error
                or (math.isnan(a.mean_recon_error)
                    and math.isnan(b.mean_recon_error)))


def test_metrics_header_only_for_empty_records(tmp_path):
    path = tmp_path / "empty.csv"
    write_metrics([], path)
    assert path.read_text() == METRICS_HEADER + "\n"
    assert read_metrics(path) == []


def test_mixing_ratio_orientation():
    r = MetricsRecord(0, 1, 100, 0.1, latent_fraction=0.25,
                      mean_recon_error=1.0, wall_time_s=0.0)
    assert r.param_fraction == 0.75
    assert r.mixing_ratio == 0.75  # 1.0 means all parameter-space


# ---------------------------------------------------------------------------
# run accounting and structure


def test_rollout_accounting_exact():
    cfg = tiny_cfg(loops=1, iterations_per_loop=1, batch_budget=200,
                   init_samples=150)
    _archive, records = run_experiment(cfg, seed=3)
    assert records[-1].total_rollouts == 150 + 200
    assert [r.total_rollouts for r in records] == [150, 350]
    totals = [r.total_rollouts for r in records]
    assert totals == sorted(totals) and len(set(totals)) == len(totals)


def test_coverage_column_non_decreasing():
    cfg = tiny_cfg(loops=2, iterations_per_loop=3)
    _archive, records = run_experiment(cfg, seed=5)
    covs = [r.coverage for r in records]
    assert covs == sorted(covs)


def test_mixing_ratio_matches_branch_tags_poms_loop0():
    # loop 0 mixes parameter and latent branches with probability one half
    cfg = tiny_cfg(loops=1, iterations_per_loop=10, batch_budget=100)
    _archive, records = run_experiment(cfg, seed=11)
    batch_rows = [r for r in records if r.iteration > 0]
    mean_param = np.mean([r.param_fraction for r in batch_rows])
    assert mean_param == pytest.approx(0.5, abs=0.06)
    for r in batch_rows:
        # the fraction is an exact count over the batch
        n = r.latent_fraction * cfg.batch_budget
        assert abs(n - round(n)) < 1e-9


def test_mape_iso_has_no_latent_samples():
    cfg = tiny_cfg(algorithm="mape-iso", sigma_theta=0.1)
    _archive, records = run_experiment(cfg, seed=2)
    assert all(r.latent_fraction == 0.0 for r in records)
    assert all(math.isnan(r.mean_recon_error) for r in records)


def test_refit_updates_recon_error_on_next_loop(tmp_path):
    cfg = tiny_cfg(loops=2, iterations_per_loop=2)
    out = tmp_path / "run"
    _archive, records = run_experiment(cfg, seed=7, out_dir=out)
    loop0 = [r for r in records if r.loop == 0]
    loop1 = [r for r in records if r.loop == 1]
    assert all(math.isnan(r.mean_recon_error) for r in loop0)
    _model, eps0 = load_model_file(out / "model-loop-0.bin")
    assert loop1[0].mean_recon_error == eps0
    # one checkpoint per loop
    assert (out / "model-loop-1.bin").exists()


def test_random_search_checkpoint_cadence():
    cfg = tiny_cfg(algorithm="ps-uniform", loops=1, iterations_per_loop=15,
                   batch_budget=200, init_samples=1000)
    # total = 1000 + 3000 = 4000 -> checkpoints at 2000, 4000
    _archive, records = run_experiment(cfg, seed=1)
    assert [r.total_rollouts for r in records] == [2000, 4000]
    assert all(r.param_fraction == 1.0 for r in records)


def test_ps_glorot_runs_and_fills_cells():
    cfg = tiny_cfg(algorithm="ps-glorot", loops=1, iterations_per_loop=5,
                   batch_budget=100, init_samples=500)
    archive, records = run_experiment(cfg, seed=1)
    assert records[-1].total_rollouts == 1000
    assert len(archive) > 0


@pytest.mark.parametrize("algo", ["poms-pca", "poms-no-jacobian", "dde",
                                  "mape-isolinedd"])
def test_all_archive_algorithms_run(algo):
    cfg = tiny_cfg(algorithm=algo, loops=1, iterations_per_loop=2,
                   init_samples=120, batch_budget=30)
    archive, records = run_experiment(cfg, seed=9)
    assert records[-1].total_rollouts == 120 + 60
    assert len(archive) > 0
    if algo in ("dde", "mape-isolinedd"):
        # none of their branch tags are 'latent'
        assert all(r.latent_fraction == 0.0 for r in records)


def test_trajectory_dump_flag(tmp_path):
    cfg = tiny_cfg(loops=1, iterations_per_loop=1, dump_trajectories=True)
    out = tmp_path / "run"
    archive, _records = run_experiment(cfg, seed=2, out_dir=out)
    path = out / "trajectories.csv"
    lines = path.read_text().splitlines()
    assert lines[0].startswith("cell_key,eval_id,step,obs_0")
    keys = {int(line.split(",")[0]) for line in lines[1:]}
    assert keys == set(archive.cells.keys())


def test_outputs_written_and_archive_reloads(tmp_path):
    cfg = tiny_cfg(loops=1, iterations_per_loop=2)
    out = tmp_path / "run"
    archive, records = run_experiment(cfg, seed=4, out_dir=out)
    for name in ("metrics.csv", "archive.bin", "archive.csv", "manifest.json",
                 "model-loop-0.bin"):
        assert (out / name).exists(), name
    back = load_archive(out / "archive.bin")
    assert len(back) == len(archive)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["algorithm"] == "poms"
    assert manifest["seed"] == 4
    assert manifest["total_rollouts"] == records[-1].total_rollouts
    assert "metrics.csv" in manifest["files"]
    assert manifest["config"]["latent_dim"] == cfg.latent_dim


# ---------------------------------------------------------------------------
# determinism


def test_runs_reproducible_across_worker_counts(tmp_path):
    cfg = tiny_cfg(loops=1, iterations_per_loop=3, init_samples=400,
                   batch_budget=100)
    blobs = {}
    for workers in (1, 8):
        out = tmp_path / f"w{workers}"
        run_experiment(replace(cfg, workers=workers), seed=7, out_dir=out)
        blobs[workers] = ((out / "metrics.csv").read_bytes(),
                          (out / "archive.bin").read_bytes())
    assert blobs[1][0] == blobs[8][0]
    assert blobs[1][1] == blobs[8][1]


def test_repeat_run_byte_identical(tmp_path):
    cfg = tiny_cfg(loops=1, iterations_per_loop=2)
    a = tmp_path / "a"
    b = tmp_path / "b"
    run_experiment(cfg, seed=7, out_dir=a)
    run_experiment(cfg, seed=7, out_dir=b)
    for name in ("metrics.csv", "archive.bin", "archive.csv", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_rerun_into_dirty_directory_clears_stale_outputs(tmp_path):
    out = tmp_path / "run"
    run_experiment(tiny_cfg(loops=2, iterations_per_loop=1), seed=7, out_dir=out)
    assert (out / "model-loop-1.bin").exists()
    run_experiment(tiny_cfg(loops=1, iterations_per_loop=1), seed=7, out_dir=out)
    assert not (out / "model-loop-1.bin").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert "model-loop-1.bin" not in manifest["files"]


def test_different_seeds_differ():
    cfg = tiny_cfg(loops=1, iterations_per_loop=2)
    _a, rec_a = run_experiment(cfg, seed=1)
    _b, rec_b = run_experiment(cfg, seed=2)
    assert [r.coverage for r in rec_a] != [r.coverage for r in rec_b]


# ---------------------------------------------------------------------------
# suite / aggregation


def test_suite_writes_tree_and_aggregate(tmp_path):
    cfg = tiny_cfg(loops=1, iterations_per_loop=2, seeds=(1, 2, 3))
    out = tmp_path / "suite"
    rows = run_suite(cfg, out_root=out)
    for seed in (1, 2, 3):
        assert (out / "poms" / str(seed) / "metrics.csv").exists()
    assert (out / "aggregate.csv").exists()
    assert (out / "coverage.svg").exists()
    algos = {r["algorithm"] for r in rows}
    assert algos == {"poms"}
    # 5 run dirs for 5 seeds would hold too; here 3
    assert len(list(out.glob("poms/*"))) == 3


def test_aggregate_single_run_median_is_the_run():
    records = [MetricsRecord(0, 0, 100, 0.1, 0.0, float("nan"), 0.0),
               MetricsRecord(0, 1, 200, 0.2, 0.0, float("nan"), 0.0)]
    rows = aggregate_curves({"mape-iso": {1: records}})
    assert [r["coverage_median"] for r in rows] == [0.1, 0.2]
    assert [r["coverage_q25"] for r in rows] == [0.1, 0.2]


def test_aggregate_constant_curves_percentiles_equal_constant():
    records = [MetricsRecord(0, 0, 100, 0.5, 0.0, float("nan"), 0.0)]
    runs = {1: records, 2: records, 3: records, 4: records, 5: records}
    rows = aggregate_curves({"poms": runs})
    assert rows[0]["coverage_median"] == 0.5
    assert rows[0]["coverage_q25"] == 0.5
    assert rows[0]["coverage_q75"] == 0.5


def test_collect_runs_reads_tree(tmp_path):
    cfg = tiny_cfg(loops=1, iterations_per_loop=2, seeds=(1, 2))
    run_suite(cfg, out_root=tmp_path)
    runs = collect_runs(tmp_path)
    assert set(runs) == {"poms"}
    assert set(runs["poms"]) == {1, 2}


# ---------------------------------------------------------------------------
# plotting


def test_emit_plot_missing_file_lists_path(tmp_path):
    from manifold_elites.plotting import emit_plot
    missing = tmp_path / "nope" / "metrics.csv"
    with pytest.raises(FileNotFoundError, match="nope"):
        emit_plot([missing], tmp_path / "out.svg")


def test_emit_plot_band_bounded_by_min_max(tmp_path):
    cfg = tiny_cfg(loops=1, iterations_per_loop=3, seeds=(1, 2, 3, 4, 5))
    out = tmp_path / "suite"
    run_suite(cfg, out_root=out)
    # five seeds: five run directories plus one aggregate CSV
    assert len(list(out.glob("poms/*"))) == 5
    assert (out / "aggregate.csv").exists()
    runs = collect_runs(out)["poms"]
    curves = np.array([[r.coverage for r in rec] for rec in runs.values()])
    rows = aggregate_curves({"poms": runs})
    for i, row in enumerate(rows):
        assert curves[:, i].min() <= row["coverage_q25"] <= row["coverage_q75"]
        assert row["coverage_q75"] <= curves[:, i].max()
    svg = (out / "coverage.svg").read_text()
    assert svg.lstrip().startswith("<?xml")


# ---------------------------------------------------------------------------
# presets


def test_presets_materialise_and_validate():
    for name in preset_names():
        cfg = get_preset(name)
        cfg.validate()


def test_full_scale_preset_hyperparameters():
    cfg = get_preset("striker-full-poms")
    assert cfg.ae_hidden == 100
    assert cfg.latent_dim == 50
    assert cfg.sigma_theta == 0.1
    assert cfg.ae == AeTrainConfig()  # reference training regime
    k = get_preset("kicker-full-poms")
    assert k.latent_dim == 100
    assert k.sigma_theta == 0.01
    iso = get_preset("kicker-full-mape-iso")
    assert iso.sigma_theta == 0.1


def test_unknown_preset_rejected():
    with pytest.raises(ConfigurationError):
        get_preset("walker-small-poms")


# ---------------------------------------------------------------------------
# CLI


def run_cli(*args):
    return subprocess.run(
        [sys.executable, "-m", "manifold_elites.cli", *args],
        capture_output=True, text=True)


def write_tiny_yaml(path, **kw):
    cfg = tiny_cfg(**kw)
    path.write_text(yaml.safe_dump(cfg.resolved()))
    return cfg


def test_cli_run_and_determinism(tmp_path):
    cfg_path = tmp_path / "cfg.yaml"
    write_tiny_yaml(cfg_path, loops=1, iterations_per_loop=2)
    out1 = tmp_path / "o1"
    out2 = tmp_path / "o2"
    r1 = run_cli("run", "--config", str(cfg_path), "--seed", "7",
                 "--out", str(out1))
    assert r1.returncode == 0, r1.stderr
    r2 = run_cli("run", "--config", str(cfg_path), "--seed", "7",
                 "--out", str(out2))
    assert r2.returncode == 0
    a = out1 / "poms" / "7"
    b = out2 / "poms" / "7"
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "archive.bin").read_bytes() == (b / "archive.bin").read_bytes()


def test_cli_validate_config_reports_bad_total(tmp_path):
    cfg_path = tmp_path / "bad.yaml"
    data = tiny_cfg().resolved()
    data["expected_total_cells"] = 12345
    cfg_path.write_text(yaml.safe_dump(data))
    res = run_cli("validate-config", "--config", str(cfg_path))
    assert res.returncode == 1
    assert "12345" in res.stderr and "40 x 10" in res.stderr


def test_cli_validate_config_ok(tmp_path):
    cfg_path = tmp_path / "ok.yaml"
    write_tiny_yaml(cfg_path)
    res = run_cli("validate-config", "--config", str(cfg_path))
    assert res.returncode == 0
    assert "ok:" in res.stdout


def test_cli_inspect_archive(tmp_path):
    cfg = tiny_cfg(loops=1, iterations_per_loop=2)
    out = tmp_path / "run"
    run_experiment(cfg, seed=1, out_dir=out)
    res = run_cli("inspect-archive", str(out / "archive.bin"))
    assert res.returncode == 0
    assert "coverage" in res.stdout


def test_cli_unknown_preset_fails_cleanly():
    res = run_cli("run", "--preset", "not-a-preset")
    assert res.returncode == 1
    assert "error:" in res.stderr


def test_cli_list_presets():
    res = run_cli("--list-presets")
    assert res.returncode == 0
    assert "kicker-small-poms" in res.stdout
