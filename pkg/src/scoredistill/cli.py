"""Command line entry point: ``scoredistill {run,sweep,compare,plot,verify}``."""

from __future__ import annotations

import argparse
import copy
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import yaml

from .config import ExperimentConfig, apply_preset, default_config, load_config, set_path
from .errors import ConfigurationError
from .harness import run
from .records import emit, load_record
from .scheduler import PRESETS

OUT_DIR_ENV = "SCOREDISTILL_OUT_DIR"
SWEEP_PRESETS = {
    # CFG ablation: the usual scale against a very large one.  Consistency
    # functions follow the prompt-restricted flow without CFG, so only the
    # noise-prediction estimator responds to the scale.
    "cfg-ablation": {"cfg_scale": [7.5, 100.0], "estimator": ["sds_ddpm", "sds_lcm_gc"],
                     "plan.noise_policy": ["fresh"]},
    "estimators": {"estimator": ["sds_ddpm", "sds_lcm", "sds_lcm_gc", "ism", "vsd"]},
}

def parse_grid(text: str) -> dict:
    """``"a.b=1,2;c=x"`` or a sweep preset name -> {dotted key: [values]}."""
    if text in SWEEP_PRESETS:
        return copy.deepcopy(SWEEP_PRESETS[text])
    grid = {}
    for part in filter(None, (p.strip() for p in text.split(";"))):
        key, sep, values = part.partition("=")
        if not sep or not key.strip() or not values.strip():
            raise ConfigurationError(f"bad grid entry {part!r}; expected key=v1,v2")
        grid[key.strip()] = [yaml.safe_load(v) for v in values.split(",")]
    if not grid:
        raise ConfigurationError("empty grid")
    return grid


def expand_grid(base: ExperimentConfig, grid: dict) -> list[tuple[dict, ExperimentConfig]]:
    keys = sorted(grid)
    cells = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        data = base.to_dict()
        point = dict(zip(keys, combo))
        for k, v in point.items():
            set_path(data, k, v)
        cells.append((point, ExperimentConfig.from_dict(data)))
    return cells


def _out_dir(args) -> Path:
    return Path(args.out_dir or os.environ.get(OUT_DIR_ENV) or "runs")


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else default_config()
    if args.preset:
        cfg = apply_preset(cfg, args.preset)
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


def _trial_configs(cfg: ExperimentConfig, trials: int) -> list[ExperimentConfig]:
    out = []
    for k in range(trials):
        c = copy.deepcopy(cfg)
        c.seed = cfg.seed + k
        out.append(c)
    return out


def _execute(cfg: ExperimentConfig, out_dir: Path) -> dict:
    record = run(cfg, out_dir=out_dir)
    stem = out_dir / f"{record.config_hash[:16]}"
    for fmt in ("json", "csv", "svg"):
        emit(record, fmt, stem.with_suffix("." + fmt))
    return {"config_hash": record.config_hash, "seed": cfg.seed, "failed": record.failed,
            "path": str(stem.with_suffix(".json")), **record.metrics,
            "wall_time": record.wall_time}


def _map(configs, out_dir: Path, jobs: int):
    if jobs <= 1 or len(configs) <= 1:
        return [_execute(c, out_dir) for c in configs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_execute, configs, itertools.repeat(out_dir)))


def cmd_run(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    results = _map(_trial_configs(cfg, args.trials), out, args.jobs)
    for r in results:
        print(json.dumps(r, sort_keys=True))
    return 1 if any(r["failed"] for r in results) else 0


def cmd_sweep(args) -> int:
    base = _load(args)
    out = _out_dir(args)
    cells = expand_grid(base, parse_grid(args.grid))
    configs, points = [], []
    for point, cfg in cells:
        for c in _trial_configs(cfg, args.trials):
            configs.append(c)
            points.append(point)
    results = _map(configs, out, args.jobs)
    summary = [{**p, **r} for p, r in zip(points, results)]
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    for row in summary:
        print(json.dumps(row, sort_keys=True))
    return 1 if any(r["failed"] for r in results) else 0


def cmd_compare(args) -> int:
    a, b = load_record(args.record_a), load_record(args.record_b)
    if args.metric not in a.metrics or args.metric not in b.metrics:
        raise ConfigurationError(f"metric {args.metric!r} missing; available: {sorted(a.metrics)}")
    va, vb = a.metrics[args.metric], b.metrics[args.metric]
    print(f"{args.metric}: A={va:.6g} ({a.config['estimator']}) B={vb:.6g} ({b.config['estimator']}) "
          f"B-A={vb - va:+.6g}")
    return 0


def cmd_plot(args) -> int:
    path = emit(load_record(args.record), "svg", args.out)
    print(path)
    return 0


def cmd_verify(args) -> int:
    from .acceptance import CRITERIA, run_all
    numbers = sorted(CRITERIA) if not args.criteria else [int(c) for c in args.criteria.split(",")]
    verdicts = run_all(numbers)
    failed = [v.number for v in verdicts if not v.passed]
    print(f"{len(verdicts) - len(failed)}/{len(verdicts)} criteria passed" +
          (f"; failing: {failed}" if failed else ""))
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="base seed (trial k uses seed + k)")
    common.add_argument("--trials", type=int, default=1)
    common.add_argument("--out-dir", default=None, help=f"output directory (default ${OUT_DIR_ENV} or ./runs)")
    common.add_argument("--preset", choices=sorted(PRESETS), default=None)
    common.add_argument("--jobs", type=int, default=1, help="worker processes for trials and sweep cells")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="scoredistill", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", parents=[common], help="run one experiment (optionally several trials)")
    r.add_argument("config", nargs="?", help="YAML or JSON config; defaults if omitted")
    r.set_defaults(func=cmd_run)
    s = sub.add_parser("sweep", parents=[common], help="run a grid of configurations")
    s.add_argument("config", nargs="?")
    s.add_argument("--grid", required=True,
                   help=f"'key=v1,v2;other.key=v3' or a preset: {', '.join(sorted(SWEEP_PRESETS))}")
    s.set_defaults(func=cmd_sweep)
    c = sub.add_parser("compare", help="compare one metric between two JSON records")
    c.add_argument("record_a")
    c.add_argument("record_b")
    c.add_argument("--metric", default="mode_distance")
    c.set_defaults(func=cmd_compare)
    pl = sub.add_parser("plot", help="write the convergence SVG of a JSON record")
    pl.add_argument("record")
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    v = sub.add_parser("verify", help="run the acceptance checks")
    v.add_argument("--criteria", default=None, help="comma-separated criterion numbers")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
