"""Command-line entry point: ``scanmerge <stage|run|sweep> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .pipeline import (
    STAGES,
    ConfigError,
    PipelineConfig,
    RunLayout,
    StageError,
    run_pipeline,
    run_stage,
    summary_metrics,
    sweep,
)

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def _omega(text: str):
    return text if text == "auto" else float(text)


# stage -> (flag, config key, type, help)
STAGE_FLAGS = {
    "plan": [
        ("--n-rays", "planner.n_rays", int, "rays cast per candidate station"),
        ("--r-f", "planner.r_f", float, "facet neighborhood radius"),
        ("--t-c", "planner.t_c", float, "coverage fraction that stops selection"),
    ],
    "synth": [
        ("--cube-res", "synth.cube_resolution", int, "cube face size in pixels"),
        ("--fill-radius", "synth.fill_radius", float, "hole-filling radius in pixels"),
        ("--grad-thresh", "synth.grad_thresh", float, "depth-edge threshold per pixel"),
    ],
    "register": [
        ("--samples", "register.n_samples", int, "RANSAC minimal samples"),
        ("--thresh", "register.dist_thresh", float, "RANSAC inlier distance"),
    ],
    "merge": [
        ("--omega", "merge.omega", _omega, "'auto' or a fixed space weight"),
        ("--rc-exponent", "merge.rc_exponent", float, "log10 of the initial cost ratio"),
        ("--huber", "merge.huber_delta", float, "Huber threshold on whitened residuals"),
        ("--max-iters", "merge.max_iters", int, None),
        ("--tol", "merge.tol", float, "relative cost decrease that stops the solver"),
    ],
    "eval": [("--tau", "eval.tau", float, "distance threshold before scene scaling")],
}


def parse_value(text: str):
    """Interpret a command-line value as YAML (numbers, booleans, lists, strings)."""
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", "-c", type=Path, help="YAML or JSON configuration file")
    p.add_argument("--out", "-o", type=Path, default=Path("scanmerge_out"),
                   help="output root shared by all runs (default: %(default)s)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a configuration value, e.g. planner.t_c=0.3")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    p.add_argument("--force", action="store_true", help="rerun even if outputs exist")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="scanmerge", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    for st in STAGES + ("run",):
        p = sub.add_parser(st, help="run all stages" if st == "run" else f"run the {st} stage")
        _add_common(p)
        for owner in (STAGE_FLAGS if st == "run" else [st]):
            for flag, key, typ, text in STAGE_FLAGS.get(owner, []):
                p.add_argument(flag, dest=key, type=typ, metavar="VALUE", help=f"{text} ({key})" if text else key)
    p = sub.add_parser("sweep", help="one full run per value of a parameter")
    _add_common(p)
    p.add_argument("parameter", help="dotted configuration key, e.g. merge.rc_exponent")
    p.add_argument("values", nargs="*", help="values to try")
    p.add_argument("--csv", type=Path, help="result table (default: <out>/sweep_<parameter>.csv)")
    return ap


def load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
    sets = []
    for item in args.overrides:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        sets.append((key.strip(), parse_value(val)))
    if args.seed is not None:
        sets.append(("seed", args.seed))
    for flags in STAGE_FLAGS.values():
        for _, key, _, _ in flags:
            v = getattr(args, key, None)
            if v is not None:
                sets.append((key, v))
    for key, val in sets:
        cfg = cfg.with_value(key, val)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        if args.command == "sweep":
            csv_path = args.csv or args.out / f"sweep_{args.parameter.replace('.', '_')}.csv"
            csv_path.parent.mkdir(parents=True, exist_ok=True)
            rows = sweep(cfg, args.parameter, [parse_value(v) for v in args.values], args.out,
                         csv_path)
            failed = sum(r["status"] != "ok" for r in rows)
            print(f"{len(rows)} runs, {failed} failed -> {csv_path}")
            return EXIT_OK
        if args.command == "run":
            run_dir = run_pipeline(cfg, args.out, args.force)
        else:
            run_stage(cfg, args.command, args.out, args.force)
            run_dir = RunLayout(cfg, args.out).run_dir
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_STAGE
    print(f"run directory: {run_dir}")
    metrics = summary_metrics(run_dir)
    if metrics:
        print(json.dumps(metrics, indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
