"""Acceptance suite.

Each test implements one acceptance criterion at its stated tolerance and
prints one pass/fail line. The desk-scale ordering criteria share one
session-scoped set of runs (5 seeds x 8 algorithms x 2 environments).
"""

import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import yaml

from manifold_elites import envs, manifold as mf
from manifold_elites.archive import (Archive, BdSpec, CategoricalDim,
                                     ContinuousDim, bd_to_coords, bd_to_cell,
                                     load_archive, save_archive)
from manifold_elites.envs import (GRAVITY, ballistic_flight,
                                  bipedal_walker_bd_spec, kicker_bd_spec,
                                  striker_bd_spec, striker_policy_spec)
from manifold_elites.manifold import (LatentCovariance, ManifoldModel,
                                      MutationScale, decode, latent_covariance,
                                      sample_gaussian)
from manifold_elites.nets import (ParamVector, decoder_jacobian,
                                  finite_diff_jacobian, flatten_params, mlp)
from manifold_elites.operators import init_uniform
from manifold_elites.presets import get_preset
from manifold_elites.rng import DOMAIN_INIT, substream
from manifold_elites.runner import run_experiment

DESK_SEEDS = (1, 2, 3, 4, 5)
ARCHIVE_ALGOS = ("poms", "poms-pca", "poms-no-jacobian", "mape-iso",
                 "mape-isolinedd", "dde")
RANDOM_ALGOS = ("ps-uniform", "ps-glorot")


def report(criterion, passed, detail):
    status = "PASS" if passed else "FAIL"
    print(f"[{status}] criterion {criterion}: {detail}")
    assert passed, f"criterion {criterion}: {detail}"


# ---------------------------------------------------------------------------
# 1. Jacobian oracle


def test_criterion_1_jacobian_oracle():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        m = int(rng.integers(2, 11))
        p = int(rng.integers(10, 101))
        hd = int(rng.integers(4, 16))
        spec = mlp([m, hd, p], hidden=("elu" if rng.random() < 0.5 else "tanh"))
        pv = ParamVector(rng.uniform(-0.8, 0.8, spec.param_count), spec)
        z = rng.normal(size=m)
        exact = decoder_jacobian(spec, pv, z).entries
        approx = finite_diff_jacobian(spec, pv, z, h=1e-4).entries
        scale = np.maximum(np.maximum(np.abs(exact), np.abs(approx)), 1e-6)
        worst = max(worst, float(np.max(np.abs(exact - approx) / scale)))
    elapsed = time.perf_counter() - t0
    report(1, worst < 1e-4 and elapsed < 60.0,
           f"100 random decoders, max relative error {worst:.2e} "
           f"(< 1e-4), runtime {elapsed:.1f}s (< 60s)")


# ---------------------------------------------------------------------------
# 2. gradient oracle


def test_criterion_2_gradient_oracle():
    rng = np.random.default_rng(102)
    param_spec = mlp([2, 2, 2])  # 12-dimensional "policy" vectors
    enc_spec, dec_spec = mf.autoencoder_specs(12, 5, 2)
    model = ManifoldModel(mf.KIND_AUTOENCODER, 2, param_spec,
                          enc_spec, rng.uniform(-0.6, 0.6, enc_spec.param_count),
                          dec_spec, rng.uniform(-0.6, 0.6, dec_spec.param_count))
    n_params = enc_spec.param_count + dec_spec.param_count
    assert n_params <= 1000
    batch = rng.normal(size=(6, 12))

    _loss, enc_grad, dec_grad = mf._ae_loss_and_grads(model, batch)
    grad = np.concatenate([enc_grad, dec_grad])

    def loss_at(flat):
        probe = ManifoldModel(mf.KIND_AUTOENCODER, 2, param_spec,
                              enc_spec, flat[:enc_spec.param_count],
                              dec_spec, flat[enc_spec.param_count:])
        return mf.ae_loss(probe, batch)

    flat0 = np.concatenate([model.enc_params, model.dec_params])
    h = 1e-5
    fd = np.zeros(n_params)
    for i in range(n_params):
        up, dn = flat0.copy(), flat0.copy()
        up[i] += h
        dn[i] -= h
        fd[i] = (loss_at(up) - loss_at(dn)) / (2 * h)
    scale = np.maximum(np.maximum(np.abs(grad), np.abs(fd)), 1e-6)
    worst = float(np.max(np.abs(grad - fd) / scale))
    report(2, worst < 1e-4,
           f"AE loss gradient vs central differences on {n_params} "
           f"parameters, max relative error {worst:.2e} (< 1e-4)")


# ---------------------------------------------------------------------------
# 3. pushforward property


def test_criterion_3_pushforward_unit_sphere():
    rng = np.random.default_rng(103)
    m, p = 4, 24
    q = np.linalg.qr(rng.normal(size=(p, m)))[0]  # orthonormal columns
    dec_spec = mlp([m, p])
    dec_params = flatten_params(dec_spec, [(q.T, np.zeros(p))])
    enc_spec = mlp([p, m])
    model = ManifoldModel(mf.KIND_AUTOENCODER, m, mlp([p - 1, 1]), enc_spec,
                          np.zeros(enc_spec.param_count), dec_spec, dec_params)
    sigma = 0.1
    z = rng.normal(size=m)
    cov = latent_covariance(model, z, MutationScale(sigma))
    base = decode(model, z).values
    n = 100_000
    deltas = np.empty((n, p))
    for i in range(n):
        deltas[i] = decode(model, sample_gaussian(z, cov, rng)).values - base
    variances = [float(np.var(deltas @ q[:, j])) for j in range(m)]
    ok = all(0.09 <= v <= 0.11 for v in variances)
    report(3, ok,
           f"decoded perturbation variance along each column: "
           f"{[round(v, 4) for v in variances]} (all in [0.09, 0.11])")


# ---------------------------------------------------------------------------
# 4. archive invariants


def test_criterion_4_archive_invariants(tmp_path):
    spec = BdSpec((ContinuousDim(0.0, 1.0, 3), ContinuousDim(0.0, 1.0, 3),
                   CategoricalDim(2)))
    policy = mlp([2, 2])
    rng = np.random.default_rng(104)

    def pv():
        return ParamVector(rng.uniform(-1, 1, policy.param_count), policy)

    archive = Archive(spec)
    checks = []

    # exhaustive fill: every cell, keep-first idempotence per cell
    eval_id = 0
    for i in range(3):
        for j in range(3):
            for c in range(2):
                bd = ((i + 0.5) / 3, (j + 0.5) / 3, c)
                assert archive.insert(pv(), bd, eval_id=eval_id) is True
                eval_id += 1
                before = archive.elites()
                assert archive.insert(pv(), bd, eval_id=eval_id) is False
                eval_id += 1
                assert archive.elites() == before
    checks.append(archive.coverage() == 1.0)

    # bin-edge clamping
    checks.append(bd_to_coords(spec, (0.0, 1.0, 0)) == (0, 2, 0))
    checks.append(bd_to_coords(spec, (-5.0, 7.0, 1)) == (0, 2, 1))

    # coverage monotone under randomized sequences
    arch2 = Archive(spec)
    last = 0.0
    monotone = True
    for k in range(300):
        bd = (rng.uniform(-1, 2), rng.uniform(-1, 2), int(rng.integers(2)))
        arch2.insert(pv(), bd, eval_id=k)
        cov = arch2.coverage()
        monotone &= cov >= last
        last = cov
    checks.append(monotone)

    # persistence round-trip exactness
    path = tmp_path / "archive.bin"
    save_archive(arch2, path)
    back = load_archive(path)
    same = list(back.cells.keys()) == list(arch2.cells.keys())
    for key in arch2.cells:
        a, b = arch2.cells[key], back.cells[key]
        same &= (a.bd == b.bd and a.eval_id == b.eval_id
                 and np.array_equal(a.params.values, b.params.values)
                 and bd_to_cell(spec, b.bd) == key)
    checks.append(same)
    report(4, all(checks),
           "coverage monotone, keep-first idempotent, edges clamp, "
           "persistence exact (3x3x2 exhaustive + randomized)")


# ---------------------------------------------------------------------------
# 5. grid cardinalities


def test_criterion_5_grid_cardinalities():
    striker = striker_bd_spec().total_cells
    walker = bipedal_walker_bd_spec().total_cells
    kicker = kicker_bd_spec().total_cells
    ok = (striker, walker, kicker) == (15_300, 12_500, 10_000)
    report(5, ok,
           f"striker 30*30*17={striker}, walker 5*100*5*5={walker}, "
           f"kicker 200*50={kicker} (exact)")


# ---------------------------------------------------------------------------
# 6. determinism through the CLI


def test_criterion_6_cli_determinism(tmp_path):
    cfg = {
        "env": "kicker", "grid": "small", "algorithm": "poms", "loops": 1,
        "iterations_per_loop": 3, "batch_budget": 100, "init_samples": 300,
        "latent_dim": 4, "ae_hidden": 16, "sigma_theta": 0.01,
        "ae": {"lr": 1.0e-3, "epochs": 40, "batch_size": 32,
               "early_stop_window": 20},
        "seeds": [7],
    }
    cfg_path = tmp_path / "cfg.yaml"
    cfg_path.write_text(yaml.safe_dump(cfg))
    blobs = {}
    for tag, workers in (("a", 1), ("b", 8), ("c", 1), ("d", 8)):
        out = tmp_path / tag
        res = subprocess.run(
            [sys.executable, "-m", "manifold_elites.cli", "run",
             "--config", str(cfg_path), "--seed", "7",
             "--out", str(out), "--workers", str(workers)],
            capture_output=True, text=True)
        assert res.returncode == 0, res.stderr
        run_dir = out / "poms" / "7"
        blobs[tag] = ((run_dir / "metrics.csv").read_bytes(),
                      (run_dir / "archive.bin").read_bytes())
    ok = (blobs["a"] == blobs["b"] == blobs["c"] == blobs["d"])
    report(6, ok, "run --seed 7 byte-identical metrics.csv and archive.bin "
                  "across repeats and worker counts 1 and 8")


# ---------------------------------------------------------------------------
# 7. physics oracles


def test_criterion_7_physics_oracles():
    # projectile closed form
    worst = 0.0
    for vx, vy in [(5.0, 8.0), (12.0, 3.0), (-7.0, 10.0), (2.0, 14.0),
                   (9.0, 9.0)]:
        land_x, apex = ballistic_flight(0.0, 0.0, vx, vy)
        worst = max(worst, abs(land_x - 2 * vx * vy / GRAVITY),
                    abs(apex - vy * vy / (2 * GRAVITY)))
    projectile_ok = worst < 1e-3

    # striker containment and monotone post-actuation decay, 1000 policies
    policy = striker_policy_spec()
    thetas = [init_uniform(policy, substream(7, DOMAIN_INIT, 0, 0, i))
              for i in range(1000)]
    contained = True
    monotone = True
    w = envs.ACTUATION_WINDOW
    for traj in envs._striker_batch(thetas):
        px, py = traj.states[:, 6], traj.states[:, 7]
        contained &= bool(np.all((px >= 0) & (px <= envs.ARENA)
                                 & (py >= 0) & (py <= envs.ARENA)))
        speeds = np.hypot(traj.states[w + 1:, 8], traj.states[w + 1:, 9])
        monotone &= bool(np.all(np.diff(speeds) <= 1e-12))
    report(7, projectile_ok and contained and monotone,
           f"projectile range/apex max error {worst:.2e} (< 1e-3); puck "
           f"containment and monotone decay on 1000 random policies")


# ---------------------------------------------------------------------------
# desk-scale reproduction (criteria 8-11)


@pytest.fixture(scope="session")
def desk_results():
    """Final coverages and full metrics for 8 algorithms x 2 envs x 5 seeds."""
    results = {}
    for env in ("kicker", "striker"):
        t0 = time.perf_counter()
        for algo in ARCHIVE_ALGOS + RANDOM_ALGOS:
            cfg = get_preset(f"{env}-small-{algo}")
            finals = []
            records_by_seed = {}
            for seed in DESK_SEEDS:
                _archive, records = run_experiment(cfg, seed)
                finals.append(records[-1].coverage)
                records_by_seed[seed] = records
            results[(env, algo)] = {"finals": finals,
                                    "records": records_by_seed}
        results[(env, "_wall_time")] = time.perf_counter() - t0
    return results


def median_final(desk_results, env, algo):
    return float(np.median(desk_results[(env, algo)]["finals"]))


def test_criterion_8_q1_ordering(desk_results):
    kicker_poms = median_final(desk_results, "kicker", "poms")
    kicker_iso = median_final(desk_results, "kicker", "mape-iso")
    striker_poms = median_final(desk_results, "striker", "poms")
    striker_iso = median_final(desk_results, "striker", "mape-iso")
    ok = (kicker_poms >= kicker_iso) and (striker_poms >= striker_iso - 0.02)
    report(8, ok,
           f"kicker poms {kicker_poms:.4f} >= mape-iso {kicker_iso:.4f}; "
           f"striker poms {striker_poms:.4f} >= mape-iso {striker_iso:.4f} - 0.02")


def test_criterion_9_q2_jacobian_ablation(desk_results):
    poms = median_final(desk_results, "kicker", "poms")
    nojac = median_final(desk_results, "kicker", "poms-no-jacobian")
    ok = poms - nojac >= 0.03
    report(9, ok,
           f"kicker poms {poms:.4f} vs poms-no-jacobian {nojac:.4f}: "
           f"margin {poms - nojac:.4f} (>= 0.03)")


def test_criterion_10_random_search_floor(desk_results):
    failures = []
    for env in ("kicker", "striker"):
        for rand_algo in RANDOM_ALGOS:
            rand_cov = median_final(desk_results, env, rand_algo)
            for algo in ARCHIVE_ALGOS:
                arch_cov = median_final(desk_results, env, algo)
                if rand_cov > arch_cov:
                    failures.append(
                        f"{env}: {rand_algo} {rand_cov:.4f} > {algo} {arch_cov:.4f}")
    report(10, not failures,
           "random-search medians below every archive-based method on both "
           "environments" + ("" if not failures else f"; violations: {failures}"))


def test_criterion_11_mixing_trace(desk_results):
    records = desk_results[("kicker", "poms")]["records"][DESK_SEEDS[0]]
    loops = sorted({r.loop for r in records})
    per_loop_latent = {}
    for loop in loops:
        rows = [r for r in records if r.loop == loop and r.iteration > 0]
        per_loop_latent[loop] = float(np.mean([r.latent_fraction for r in rows]))
    first_loop_param = 1.0 - per_loop_latent[0]
    gated = [lp for lp in loops if lp >= 1]
    early = np.mean([per_loop_latent[lp] for lp in gated[:2]])
    late = np.mean([per_loop_latent[lp] for lp in gated[-2:]])
    ok = abs(first_loop_param - 0.5) <= 0.05 and late >= early
    report(11, ok,
           f"first-loop parameter fraction {first_loop_param:.3f} (0.5 +- 0.05); "
           f"latent fraction early loops {early:.3f} -> late loops {late:.3f} "
           f"(weakly increasing)")


def test_desk_suite_runtime(desk_results):
    kicker_t = desk_results[("kicker", "_wall_time")]
    striker_t = desk_results[("striker", "_wall_time")]
    print(f"[info] desk suite wall time: kicker {kicker_t / 60:.1f} min, "
          f"striker {striker_t / 60:.1f} min (budget: 30 min per environment)")
    assert kicker_t < 30 * 60
    assert striker_t < 30 * 60
