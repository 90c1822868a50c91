"""Command line entry point: ``pfonet run | compare | validate-config | export``.

Exit codes: 0 success, 1 invalid config or arguments, 2 failure while
running, 3 a configured threshold was missed.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .field import grid_from_dict

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_THRESHOLD = 0, 1, 2, 3
OUTPUT_ROOT_ENV = "PFONET_OUTPUT_ROOT"

log = logging.getLogger("pfonet")


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _fail(code: int, stage: str, exc: BaseException) -> int:
    print(f"pfonet: {stage}: {exc}", file=sys.stderr)
    return code


def cmd_validate(args) -> int:
    try:
        cfg = ex.load_config(args.config)
    except ex.ConfigError as exc:
        return _fail(EXIT_VALIDATION, "validation", exc)
    if args.print:
        import yaml
        sys.stdout.write(yaml.safe_dump(cfg, sort_keys=True))
    else:
        print(f"ok: {cfg['experiment']} ({cfg['problem']})")
    return EXIT_OK


def cmd_run(args) -> int:
    try:
        cfg = ex.load_config(args.config)
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if overrides:
            cfg = ex.resolve_config(ex._merge(cfg, overrides))
    except ex.ConfigError as exc:
        return _fail(EXIT_VALIDATION, "validation", exc)
    if args.jobs < 1:
        return _fail(EXIT_VALIDATION, "validation", ValueError("--jobs must be at least 1"))
    out = Path(args.out) if args.out else output_root() / cfg["output_dir"]
    log.info("running %s into %s", cfg["experiment"], out)
    try:
        summary = ex.run_experiment(cfg, out, jobs=args.jobs)
    except Exception as exc:  # any stage failure maps to the runtime exit code
        log.debug("run failed", exc_info=True)
        return _fail(EXIT_RUNTIME, f"run {cfg['experiment']}", exc)
    for name, t in summary["thresholds"].items():
        print(f"{'PASS' if t['passed'] else 'FAIL'} {name}: {t['value']} (limit {t['limit']})")
    print(f"summary: {out / 'summary.json'}")
    return EXIT_OK if summary["passed"] else EXIT_THRESHOLD


def cmd_compare(args) -> int:
    try:
        report = ex.compare_runs(args.run_a, args.run_b)
    except ex.IncompatibleRunsError as exc:
        return _fail(EXIT_VALIDATION, "compare", exc)
    except (OSError, ValueError) as exc:
        return _fail(EXIT_RUNTIME, "compare", exc)
    if args.json:
        print(json.dumps(report, indent=1, sort_keys=True))
    else:
        r2 = "n/a" if report["r2"] is None else f"{report['r2']:.6g}"
        print("metric,value")
        print(f"count,{report['count']}")
        print(f"mse,{report['mse']:.6g}")
        print(f"r2,{r2}")
        print(f"max_error,{report['max_error']:.6g}")
    if args.min_r2 is not None and (report["r2"] is None or report["r2"] < args.min_r2):
        return EXIT_THRESHOLD
    return EXIT_OK


def export_run(run_dir: Path, dest: Path) -> list[Path]:
    """Tidy CSVs: one row per (field, node) and one per scalar summary entry."""
    meta, fields = ex.load_fields(run_dir)
    grid = grid_from_dict(meta["grid"])
    pts = grid.points()
    dest.mkdir(parents=True, exist_ok=True)
    written = []
    coord_names = ["x"] if grid.ndim == 1 else ["x", "y"]
    path = dest / "fields.csv"
    with open(path, "w") as fh:
        fh.write(",".join(["index", "node", *coord_names, "u"]) + "\n")
        for i, row in enumerate(fields):
            for j, (p, v) in enumerate(zip(pts, row)):
                coords = ",".join(repr(float(c)) for c in np.atleast_1d(p))
                fh.write(f"{i},{j},{coords},{float(v)!r}\n")
    written.append(path)
    summary_path = run_dir / "summary.json"
    if summary_path.exists():
        summary = json.loads(summary_path.read_text())
        path = dest / "summary.csv"
        with open(path, "w") as fh:
            fh.write("key,index,value\n")
            for key in sorted(summary):
                value = summary[key]
                if isinstance(value, list) and all(not isinstance(v, (dict, list)) for v in value):
                    for i, v in enumerate(value):
                        fh.write(f"{key},{i},{v}\n")
                elif not isinstance(value, (dict, list)):
                    fh.write(f"{key},,{value}\n")
        written.append(path)
    return written


def cmd_export(args) -> int:
    run_dir = Path(args.run)
    try:
        paths = export_run(run_dir, Path(args.out) if args.out else run_dir / "export")
    except ex.IncompatibleRunsError as exc:
        return _fail(EXIT_VALIDATION, "export", exc)
    except (OSError, ValueError) as exc:
        return _fail(EXIT_RUNTIME, "export", exc)
    for p in paths:
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pfonet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment from a config file or preset name")
    p.add_argument("config")
    p.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/<output_dir>)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--jobs", type=int, default=1,
                   help="worker processes for ground-truth generation")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("validate-config", help="resolve and check a config without running")
    p.add_argument("config")
    p.add_argument("--print", action="store_true", help="print the resolved config")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("compare", help="nodewise comparison of two runs' field artifacts")
    p.add_argument("run_a")
    p.add_argument("run_b")
    p.add_argument("--json", action="store_true")
    p.add_argument("--min-r2", type=float, help="exit 3 if r2 falls below this")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("export", help="write tidy CSVs for plotting")
    p.add_argument("run")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; this CLI reserves 2 for runtime failures
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
