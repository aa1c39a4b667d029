"""Experiment orchestration: alternating search and manifold-learning phases,
multi-seed suites, metrics logging, and persistence.

Reproducibility contract: (config, seed) determines every output byte,
independent of worker count. Rollouts are evaluated in fixed-size chunks
dispatched to a thread pool and committed in eval-id order; all randomness
comes from keyed substreams. Wall-clock timing is only recorded when
record_timing is set, because timed outputs cannot be byte-stable.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .archive import Archive, export_csv, save_archive
from .envs import Env, env_constants, make_env
from .errors import ConfigurationError
from .manifold import (AeTrainConfig, MutationScale, encode_batch,
                       fit_autoencoder, fit_pca, init_autoencoder,
                       reconstruction_threshold, save_model_file)
from .nets import ParamVector
from .operators import (DDE_ARMS, IsoLineParams, UcbBanditState, dde_mutate,
                        init_glorot, init_uniform, mutate_iso, mutate_iso_line,
                        mutate_poms, mutate_poms_nojac, ucb_update)
from .rng import (DOMAIN_INIT, DOMAIN_MODEL_INIT, DOMAIN_MODEL_TRAIN,
                  DOMAIN_MUTATE, DOMAIN_SELECT, substream)

ALGORITHMS = ("poms", "poms-pca", "poms-no-jacobian", "mape-iso",
              "mape-isolinedd", "dde", "ps-uniform", "ps-glorot")
MANIFOLD_ALGORITHMS = ("poms", "poms-pca", "poms-no-jacobian", "dde")
RANDOM_SEARCH_ALGORITHMS = ("ps-uniform", "ps-glorot")

EVAL_CHUNK = 200               # fixed so worker count cannot change results
RANDOM_SEARCH_CHECKPOINT = 2000

METRICS_HEADER = ("loop,iteration,total_rollouts,coverage,mixing_ratio,"
                  "mean_recon_error,wall_time_s,param_fraction,latent_fraction")


@dataclass(frozen=True)
class ExperimentConfig:
    env: str = "kicker"
    variant: str = "normal"
    grid: str = "small"
    algorithm: str = "poms"
    loops: int = 2
    iterations_per_loop: int = 100
    batch_budget: int = 200
    init_samples: int = 2000
    latent_dim: int = 10
    ae_hidden: int = 48
    sigma_theta: float = 0.1
    sigma_iso: float = 0.01
    sigma_line: float = 0.2
    ucb_c: float = math.sqrt(2.0)
    ucb_alpha: float = 0.05
    nojac_use_gate: bool = True
    replace_on_collision: bool = False
    ae: AeTrainConfig = field(default_factory=AeTrainConfig)
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    out_dir: str = "out"
    workers: int = 1
    record_timing: bool = False
    dump_trajectories: bool = False
    expected_total_cells: Optional[int] = None

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(
                f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if self.env not in ("striker", "kicker"):
            raise ConfigurationError(f"unknown environment {self.env!r}")
        if self.variant not in ("normal", "mix-scale"):
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        if self.grid not in ("full", "small"):
            raise ConfigurationError(f"unknown grid {self.grid!r}")
        for name in ("loops", "iterations_per_loop", "batch_budget",
                     "init_samples", "latent_dim", "ae_hidden", "workers"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.sigma_theta <= 0:
            raise ConfigurationError("sigma_theta must be positive")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        bd_spec = make_env(self.env, self.variant, self.grid).spec.bd_spec
        if (self.expected_total_cells is not None
                and bd_spec.total_cells != self.expected_total_cells):
            sizes = " x ".join(str(d.size) for d in bd_spec.dims)
            raise ConfigurationError(
                f"declared total cells {self.expected_total_cells} do not match "
                f"the grid {sizes} = {bd_spec.total_cells}")

    def total_rollout_budget(self) -> int:
        return (self.init_samples
                + self.loops * self.iterations_per_loop * self.batch_budget)

    def resolved(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        unknown = set(data) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigurationError(f"unknown config fields: {sorted(unknown)}")
        if "ae" in data and isinstance(data["ae"], dict):
            ae_unknown = set(data["ae"]) - set(AeTrainConfig.__dataclass_fields__)
            if ae_unknown:
                raise ConfigurationError(f"unknown ae fields: {sorted(ae_unknown)}")
            data["ae"] = AeTrainConfig(**data["ae"])
        if "seeds" in data:
            data["seeds"] = tuple(int(s) for s in data["seeds"])
        return cls(**data)


def load_config(path) -> ExperimentConfig:
    import yaml
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path} does not contain a config mapping")
    return ExperimentConfig.from_dict(data)


@dataclass
class MetricsRecord:
    loop: int
    iteration: int
    total_rollouts: int
    coverage: float
    latent_fraction: float
    mean_recon_error: float
    wall_time_s: float

    @property
    def param_fraction(self) -> float:
        return 1.0 - self.latent_fraction

    @property
    def mixing_ratio(self) -> float:
        """1.0 means every sample came from the parameter space."""
        return self.param_fraction


def write_metrics(records: Sequence[MetricsRecord], path) -> None:
    """CSV, UTF-8, LF endings, full-precision floats via repr round-trip."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(METRICS_HEADER + "\n")
        for r in records:
            fh.write(",".join([
                str(r.loop), str(r.iteration), str(r.total_rollouts),
                repr(float(r.coverage)), repr(float(r.mixing_ratio)),
                repr(float(r.mean_recon_error)), repr(float(r.wall_time_s)),
                repr(float(r.param_fraction)), repr(float(r.latent_fraction)),
            ]) + "\n")


def read_metrics(path) -> list[MetricsRecord]:
    records = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            records.append(MetricsRecord(
                loop=int(row["loop"]), iteration=int(row["iteration"]),
                total_rollouts=int(row["total_rollouts"]),
                coverage=float(row["coverage"]),
                latent_fraction=float(row["latent_fraction"]),
                mean_recon_error=float(row["mean_recon_error"]),
                wall_time_s=float(row["wall_time_s"])))
    return records


class EvalPool:
    """Ordered rollout evaluation in fixed-size chunks.

    Chunk composition depends only on the sample order, never on the worker
    count, so results are byte-identical for any pool size.
    """

    def __init__(self, env: Env, workers: int = 1, chunk: int = EVAL_CHUNK):
        self.env = env
        self.workers = max(1, workers)
        self.chunk = chunk

    def evaluate(self, thetas: Sequence) -> list:
        chunks = [thetas[i:i + self.chunk]
                  for i in range(0, len(thetas), self.chunk)]
        if self.workers == 1 or len(chunks) <= 1:
            results = [self.env.rollout_batch(c) for c in chunks]
        else:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                results = list(pool.map(self.env.rollout_batch, chunks))
        return [traj for part in results for traj in part]


# ---------------------------------------------------------------------------
# single experiment


class _Run:
    """Mutable state of one experiment execution."""

    def __init__(self, cfg: ExperimentConfig, seed: int):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self.env = make_env(cfg.env, cfg.variant, cfg.grid)
        self.policy = self.env.spec.policy_spec
        self.archive = Archive(self.env.spec.bd_spec, cfg.replace_on_collision)
        self.pool = EvalPool(self.env, cfg.workers)
        self.records: list[MetricsRecord] = []
        self.eval_id = 0
        self.total_rollouts = 0
        self.degenerate_count = 0
        self.model = None
        self.epsilon_r: Optional[float] = None
        self.bandit: Optional[UcbBanditState] = None
        self.adam_carry = None
        self.refit_history: list[dict] = []
        self._t0 = time.perf_counter()

    def elapsed(self) -> float:
        return (time.perf_counter() - self._t0) if self.cfg.record_timing else 0.0

    def collection(self) -> list[ParamVector]:
        return [e.params for e in self.archive.elites()]

    def commit(self, theta: ParamVector, traj, loop: int) -> bool:
        this_id = self.eval_id
        self.eval_id += 1
        if traj.degenerate or not np.isfinite(theta.values).all():
            self.degenerate_count += 1
            return False
        bd = self.env.bd(traj)
        return self.archive.insert(theta, bd, eval_id=this_id, loop_index=loop)

    def record(self, loop: int, iteration: int, latent_fraction: float) -> None:
        recon = self.epsilon_r if self.epsilon_r is not None else float("nan")
        self.records.append(MetricsRecord(
            loop=loop, iteration=iteration, total_rollouts=self.total_rollouts,
            coverage=self.archive.coverage(), latent_fraction=latent_fraction,
            mean_recon_error=recon, wall_time_s=self.elapsed()))


def _mutate_one(run: _Run, parent, latent_ranges, rng) -> object:
    cfg = run.cfg
    algo = cfg.algorithm
    scale = MutationScale(cfg.sigma_theta)
    if algo == "mape-iso":
        return mutate_iso(parent.params, scale, rng, parent.eval_id)
    if algo == "mape-isolinedd":
        theta_a, theta_b = run.archive.sample_elites(2, rng)
        return mutate_iso_line(parent.params, theta_a, theta_b,
                               IsoLineParams(cfg.sigma_iso, cfg.sigma_line),
                               rng, parent.eval_id)
    if algo == "poms" or algo == "poms-pca":
        return mutate_poms(parent.params, run.model, run.epsilon_r, scale, rng,
                           parent.eval_id)
    if algo == "poms-no-jacobian":
        return mutate_poms_nojac(parent.params, run.model, latent_ranges, rng,
                                 epsilon_r=run.epsilon_r, scale=scale,
                                 use_gate=cfg.nojac_use_gate,
                                 parent_eval_id=parent.eval_id)
    if algo == "dde":
        return dde_mutate(parent.params, run.archive, run.model, run.bandit,
                          IsoLineParams(cfg.sigma_iso, cfg.sigma_line), rng,
                          parent.eval_id)
    raise ConfigurationError(f"no mutation operator for {algo!r}")


def _run_random_search(run: _Run) -> None:
    cfg = run.cfg
    draw = init_uniform if cfg.algorithm == "ps-uniform" else init_glorot
    budget = cfg.total_rollout_budget()
    batch_index = 0
    drawn = 0
    while drawn < budget:
        n = min(RANDOM_SEARCH_CHECKPOINT, budget - drawn)
        thetas = [draw(run.policy,
                       substream(run.seed, DOMAIN_INIT, 0, batch_index, i))
                  for i in range(n)]
        trajs = run.pool.evaluate(thetas)
        for theta, traj in zip(thetas, trajs):
            run.commit(theta, traj, 0)
        drawn += n
        batch_index += 1
        run.total_rollouts = drawn
        run.record(loop=0, iteration=batch_index, latent_fraction=0.0)


def _refit_manifold(run: _Run, loop: int, out_dir: Optional[Path]) -> None:
    cfg = run.cfg
    coll = run.collection()
    if cfg.algorithm == "poms-pca":
        run.model = fit_pca(coll, cfg.latent_dim)
        stats = None
    else:
        carry = None
        if not cfg.ae.reset_optimizer_moments_each_loop:
            carry = run.adam_carry
        run.model, stats = fit_autoencoder(
            coll, cfg.ae, warm_start=run.model,
            rng=substream(run.seed, DOMAIN_MODEL_TRAIN, loop),
            hidden_dim=cfg.ae_hidden, latent_dim=cfg.latent_dim,
            optimizer_state=carry)
        run.adam_carry = stats.optimizer_state
    run.epsilon_r = reconstruction_threshold(run.model, coll)
    run.refit_history.append({
        "loop": loop, "total_rollouts": run.total_rollouts,
        "epsilon_r": run.epsilon_r,
        "epochs_run": stats.epochs_run if stats else None,
        "early_stopped": stats.early_stopped if stats else None,
    })
    if out_dir is not None:
        save_model_file(out_dir / f"model-loop-{loop}.bin", run.model,
                        run.epsilon_r)


def _clear_previous_outputs(out_path: Path) -> None:
    """Remove artifacts of an earlier run so reused directories stay
    byte-reproducible (a shorter re-run must not inherit stale checkpoints)."""
    for name in ("metrics.csv", "archive.bin", "archive.csv",
                 "trajectories.csv", "manifest.json"):
        (out_path / name).unlink(missing_ok=True)
    for stale in out_path.glob("model-loop-*.bin"):
        stale.unlink()


def run_experiment(cfg: ExperimentConfig, seed: int,
                   out_dir=None) -> tuple[Archive, list[MetricsRecord]]:
    """Execute one (config, seed) run; write outputs when out_dir is given."""
    run = _Run(cfg, seed)
    out_path: Optional[Path] = None
    if out_dir is not None:
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)
        _clear_previous_outputs(out_path)

    if cfg.algorithm in RANDOM_SEARCH_ALGORITHMS:
        _run_random_search(run)
    else:
        _run_archive_search(run, out_path)

    if out_path is not None:
        write_metrics(run.records, out_path / "metrics.csv")
        save_archive(run.archive, out_path / "archive.bin")
        export_csv(run.archive, out_path / "archive.csv")
        if cfg.dump_trajectories:
            _dump_trajectories(run, out_path / "trajectories.csv")
        _write_manifest(run, out_path)
    return run.archive, run.records


def _run_archive_search(run: _Run, out_path: Optional[Path]) -> None:
    cfg = run.cfg
    seed = run.seed

    # initial collection: uniform policy draws, one substream per sample
    thetas = [init_uniform(run.policy, substream(seed, DOMAIN_INIT, 0, 0, i))
              for i in range(cfg.init_samples)]
    trajs = run.pool.evaluate(thetas)
    for theta, traj in zip(thetas, trajs):
        run.commit(theta, traj, 0)
    run.total_rollouts = cfg.init_samples
    run.record(loop=0, iteration=0, latent_fraction=0.0)

    if cfg.algorithm in ("poms", "poms-no-jacobian", "dde"):
        run.model = init_autoencoder(run.policy, cfg.ae_hidden, cfg.latent_dim,
                                     substream(seed, DOMAIN_MODEL_INIT))
    elif cfg.algorithm == "poms-pca":
        coll = run.collection()
        run.model = fit_pca(coll, cfg.latent_dim)
        run.epsilon_r = reconstruction_threshold(run.model, coll)
    if cfg.algorithm == "dde":
        run.bandit = UcbBanditState.fresh(DDE_ARMS, c=cfg.ucb_c,
                                          alpha=cfg.ucb_alpha)

    for loop in range(cfg.loops):
        for it in range(1, cfg.iterations_per_loop + 1):
            sel_rng = substream(seed, DOMAIN_SELECT, loop, it, 0)
            parents = run.archive.sample_elite_records(cfg.batch_budget, sel_rng)

            latent_ranges = None
            if cfg.algorithm == "poms-no-jacobian":
                z = encode_batch(run.model,
                                 np.stack([p.values for p in run.collection()]))
                latent_ranges = z.max(axis=0) - z.min(axis=0)

            outcomes = [
                _mutate_one(run, parent, latent_ranges,
                            substream(seed, DOMAIN_MUTATE, loop, it, i))
                for i, parent in enumerate(parents)
            ]
            children = run.pool.evaluate([o.child for o in outcomes])
            n_latent = 0
            for outcome, traj in zip(outcomes, children):
                inserted = run.commit(outcome.child, traj, loop)
                if outcome.branch == "latent":
                    n_latent += 1
                if cfg.algorithm == "dde":
                    run.bandit = ucb_update(run.bandit, outcome.branch, inserted)
            run.total_rollouts += cfg.batch_budget
            run.record(loop=loop, iteration=it,
                       latent_fraction=n_latent / cfg.batch_budget)

        if cfg.algorithm in MANIFOLD_ALGORITHMS:
            _refit_manifold(run, loop, out_path)


def _dump_trajectories(run: _Run, path) -> None:
    """Re-simulate every elite and dump per-step observations for debugging."""
    elites = run.archive.elites()
    trajs = run.pool.evaluate([e.params for e in elites])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        obs_dim = run.env.spec.obs_dim
        writer.writerow(["cell_key", "eval_id", "step"]
                        + [f"obs_{i}" for i in range(obs_dim)])
        for (key, elite), traj in zip(run.archive.cells.items(), trajs):
            for step, state in enumerate(traj.states):
                writer.writerow([key, elite.eval_id, step]
                                + [repr(float(v)) for v in state])


def _write_manifest(run: _Run, out_path: Path) -> None:
    files = {}
    for name in sorted(p.name for p in out_path.iterdir() if p.is_file()):
        if name == "manifest.json":
            continue
        blob = (out_path / name).read_bytes()
        files[name] = {"bytes": len(blob),
                       "sha256": hashlib.sha256(blob).hexdigest()}
    manifest = {
        "algorithm": run.cfg.algorithm,
        "seed": run.seed,
        "config": run.cfg.resolved(),
        "env_constants": env_constants(),
        "package_version": __version__,
        "prng": {
            "generator": "philox",
            "scheme": "SeedSequence(seed, spawn_key=(domain, loop, iteration, index))",
            "domains": {"init": DOMAIN_INIT, "select": DOMAIN_SELECT,
                        "mutate": DOMAIN_MUTATE, "model_init": DOMAIN_MODEL_INIT,
                        "model_train": DOMAIN_MODEL_TRAIN},
        },
        "total_rollouts": run.total_rollouts,
        "degenerate_rollouts": run.degenerate_count,
        "refits": run.refit_history,
        "files": files,
    }
    if run.cfg.record_timing:
        manifest["wall_time_s"] = time.perf_counter() - run._t0
    with open(out_path / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# suites and aggregation


def run_suite(cfg: ExperimentConfig, seeds: Optional[Sequence[int]] = None,
              out_root=None) -> list[dict]:
    """Run cfg over its seeds; write per-run trees plus aggregate outputs.

    The aggregate CSV and coverage plot are rebuilt from every run present
    under the output root, so suites for several algorithms accumulate into
    one comparison.
    """
    seeds = list(seeds) if seeds is not None else list(cfg.seeds)
    per_seed: dict[int, list[MetricsRecord]] = {}
    root = Path(out_root) if out_root is not None else None
    for seed in seeds:
        run_dir = root / cfg.algorithm / str(seed) if root is not None else None
        _archive, records = run_experiment(cfg, seed, run_dir)
        per_seed[seed] = records

    if root is not None:
        runs = collect_runs(root)
    else:
        runs = {cfg.algorithm: per_seed}
    rows = aggregate_curves(runs)
    if root is not None:
        write_aggregate(rows, root / "aggregate.csv")
        csvs = sorted(root.glob("*/*/metrics.csv"))
        from .plotting import emit_plot
        emit_plot(csvs, root / "coverage.svg")
    return rows


def collect_runs(out_root) -> dict[str, dict[int, list[MetricsRecord]]]:
    """All runs under an output root, keyed by algorithm then seed."""
    runs: dict[str, dict[int, list[MetricsRecord]]] = {}
    root = Path(out_root)
    for path in sorted(root.glob("*/*/metrics.csv")):
        algo = path.parent.parent.name
        seed = int(path.parent.name)
        runs.setdefault(algo, {})[seed] = read_metrics(path)
    return runs


def aggregate_curves(runs: dict[str, dict[int, list[MetricsRecord]]]) -> list[dict]:
    """Median and quartile coverage per rollout count, per algorithm."""
    rows: list[dict] = []
    for algo in sorted(runs):
        grids = None
        curves = []
        for seed in sorted(runs[algo]):
            records = runs[algo][seed]
            grid = [r.total_rollouts for r in records]
            if grids is None:
                grids = grid
            elif grid != grids:
                raise ConfigurationError(
                    f"runs of {algo!r} disagree on rollout grids; "
                    f"cannot aggregate")
            curves.append([r.coverage for r in records])
        arr = np.asarray(curves)
        med = np.median(arr, axis=0)
        q25 = np.percentile(arr, 25, axis=0)
        q75 = np.percentile(arr, 75, axis=0)
        for i, total in enumerate(grids):
            rows.append({"algorithm": algo, "total_rollouts": total,
                         "coverage_median": float(med[i]),
                         "coverage_q25": float(q25[i]),
                         "coverage_q75": float(q75[i])})
    return rows


def write_aggregate(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["algorithm", "total_rollouts", "coverage_median",
                         "coverage_q25", "coverage_q75"])
        for row in rows:
            writer.writerow([row["algorithm"], row["total_rollouts"],
                             repr(row["coverage_median"]),
                             repr(row["coverage_q25"]),
                             repr(row["coverage_q75"])])
