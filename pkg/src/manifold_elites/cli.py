"""Command-line interface: run, suite, plot, validate-config, inspect-archive."""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

from .archive import CategoricalDim, load_archive
from .envs import make_env
from .errors import ConfigurationError
from .presets import get_preset, preset_names
from .runner import (ExperimentConfig, load_config, run_experiment, run_suite)

ENV_OUT = "MANIFOLD_ELITES_OUT"
ENV_WORKERS = "MANIFOLD_ELITES_WORKERS"


def _add_config_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML config file")
    p.add_argument("--preset", help="named preset (see --list-presets)")
    p.add_argument("--algorithm", help="override: algorithm")
    p.add_argument("--env", help="override: environment name")
    p.add_argument("--variant", help="override: normal | mix-scale")
    p.add_argument("--grid", help="override: full | small")
    p.add_argument("--loops", type=int, help="override: outer loops")
    p.add_argument("--out", type=Path, help="output root directory")
    p.add_argument("--workers", type=int, help="evaluation worker threads")
    p.add_argument("--timing", action="store_true",
                   help="record wall-clock times (outputs stop being "
                        "byte-reproducible)")


def _resolve_config(args) -> ExperimentConfig:
    if args.config and args.preset:
        raise ConfigurationError("give either --config or --preset, not both")
    if args.config:
        cfg = load_config(args.config)
    elif args.preset:
        cfg = get_preset(args.preset)
    else:
        raise ConfigurationError("a --config file or --preset name is required")
    overrides = {}
    for name in ("algorithm", "env", "variant", "grid", "loops", "workers"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if args.out is not None:
        overrides["out_dir"] = str(args.out)
    elif os.environ.get(ENV_OUT):
        overrides["out_dir"] = os.environ[ENV_OUT]
    if "workers" not in overrides and os.environ.get(ENV_WORKERS):
        overrides["workers"] = int(os.environ[ENV_WORKERS])
    if getattr(args, "timing", False):
        overrides["record_timing"] = True
    cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


def _cmd_run(args) -> int:
    cfg = _resolve_config(args)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    run_dir = Path(cfg.out_dir) / cfg.algorithm / str(seed)
    archive, records = run_experiment(cfg, seed, run_dir)
    final = records[-1]
    print(f"{cfg.algorithm} seed {seed}: {final.total_rollouts} rollouts, "
          f"coverage {final.coverage:.4f} "
          f"({len(archive)}/{archive.total_cells} cells) -> {run_dir}")
    return 0


def _cmd_suite(args) -> int:
    cfg = _resolve_config(args)
    seeds = ([int(s) for s in args.seeds.split(",")] if args.seeds
             else list(cfg.seeds))
    rows = run_suite(cfg, seeds, Path(cfg.out_dir))
    last = [r for r in rows if r["algorithm"] == cfg.algorithm][-1]
    print(f"{cfg.algorithm} x {len(seeds)} seeds: median final coverage "
          f"{last['coverage_median']:.4f} -> {cfg.out_dir}")
    return 0


def _cmd_plot(args) -> int:
    from .plotting import emit_plot
    emit_plot(args.csvs, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_validate(args) -> int:
    cfg = load_config(args.config)
    cfg.validate()
    bd_spec = make_env(cfg.env, cfg.variant, cfg.grid).spec.bd_spec
    sizes = " x ".join(str(d.size) for d in bd_spec.dims)
    print(f"ok: {cfg.algorithm} on {cfg.env} ({cfg.variant}, {cfg.grid} grid "
          f"{sizes} = {bd_spec.total_cells} cells), "
          f"{cfg.total_rollout_budget()} rollouts over {len(cfg.seeds)} seeds")
    return 0


def _cmd_inspect(args) -> int:
    archive = load_archive(args.archive)
    dims = []
    for d in archive.spec.dims:
        if isinstance(d, CategoricalDim):
            dims.append(f"cat({d.cardinality})")
        else:
            dims.append(f"[{d.lo}, {d.hi}]x{d.bins}")
    print(f"grid: {' x '.join(dims)} = {archive.total_cells} cells")
    print(f"occupied: {len(archive)} (coverage {archive.coverage():.4f})")
    elites = archive.elites()
    if elites:
        ids = [e.eval_id for e in elites]
        loops = [e.loop_index for e in elites]
        print(f"eval ids: {min(ids)}..{max(ids)}; loops: {min(loops)}..{max(loops)}")
        for e in elites[:5]:
            bd = ", ".join(f"{v:.3f}" if isinstance(v, float) else str(v)
                           for v in e.bd)
            print(f"  eval {e.eval_id} loop {e.loop_index}: bd=({bd})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="manifold-elites",
        description="Quality-diversity policy search on learned parameter "
                    "manifolds")
    parser.add_argument("--list-presets", action="store_true",
                        help="print preset names and exit")
    sub = parser.add_subparsers(dest="command")

    p_run = sub.add_parser("run", help="run one (config, seed) experiment")
    _add_config_options(p_run)
    p_run.add_argument("--seed", type=int, help="seed (default: first in config)")
    p_run.set_defaults(fn=_cmd_run)

    p_suite = sub.add_parser("suite", help="run all seeds and aggregate")
    _add_config_options(p_suite)
    p_suite.add_argument("--seeds", help="comma-separated seed list override")
    p_suite.set_defaults(fn=_cmd_suite)

    p_plot = sub.add_parser("plot", help="render coverage curves to SVG")
    p_plot.add_argument("csvs", nargs="+", type=Path, help="metrics.csv files")
    p_plot.add_argument("--out", type=Path, required=True, help="output .svg")
    p_plot.set_defaults(fn=_cmd_plot)

    p_val = sub.add_parser("validate-config", help="check a config file")
    p_val.add_argument("--config", type=Path, required=True)
    p_val.set_defaults(fn=_cmd_validate)

    p_ins = sub.add_parser("inspect-archive", help="summarise an archive file")
    p_ins.add_argument("archive", type=Path)
    p_ins.set_defaults(fn=_cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.list_presets:
        for name in preset_names():
            print(name)
        return 0
    if not getattr(args, "fn", None):
        parser.print_help()
        return 1
    try:
        return args.fn(args)
    except (ConfigurationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
