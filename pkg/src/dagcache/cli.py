"""Command line front end.

Two subcommands:

  dagcache run   -- one (workload, policy, fraction) experiment; prints the
                    summary row and optionally writes a per-query detail CSV
  dagcache grid  -- cross product of axes from a config file and/or flags;
                    writes summary.csv plus optional detail files

The output directory resolves as: --out flag, else the DAGCACHE_OUT
environment variable, else the current directory.

Grid config files are key = value lines (comma separated lists allowed),
mirroring the grid fields, e.g.

    kinds = cubepoints, cubeslices
    distributions = uniform, zipf
    seeds = 1, 2, 3
    fractions = 0, 0.05, 0.16
    policies = nocache, infcache, lcslru
    scale = 0.01

Lines starting with # are comments.  Flags override file values.
"""

from __future__ import annotations

import argparse
import sys

from .harness import (
    ALL_POLICIES,
    DEFAULT_FRACTIONS,
    DEFAULT_SEEDS,
    ExperimentConfig,
    GridSpec,
    SUMMARY_COLUMNS,
    resolve_out_dir,
    run_experiment,
    run_grid,
    summary_row,
    write_detail,
)


def _csv_list(text, conv):
    return tuple(conv(part.strip()) for part in text.split(",") if part.strip())


def parse_grid_config(text: str) -> dict:
    """key = value lines -> field dict; unknown keys are an error."""
    fields = {}
    handlers = {
        "kinds": lambda v: _csv_list(v, str),
        "distributions": lambda v: _csv_list(v, str),
        "seeds": lambda v: _csv_list(v, int),
        "fractions": lambda v: _csv_list(v, float),
        "policies": lambda v: _csv_list(v, str),
        "scale": float,
        "queries": int,
        "warmup": int,
        "window": int,
        "decay": float,
    }
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip().lower()
        if key not in handlers:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        fields[key] = handlers[key](value.strip())
    return fields


def _add_common(p):
    p.add_argument("--scale", type=float, default=None, help="catalog scale factor")
    p.add_argument("--queries", type=int, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--window", type=int, default=None, help="representative set size")
    p.add_argument("--decay", type=float, default=None, help="representative set decay")
    p.add_argument("--out", default=None, help="output directory (or $DAGCACHE_OUT)")
    p.add_argument("--details", action="store_true",
                   help="also write per-query detail CSV files")


def build_parser():
    ap = argparse.ArgumentParser(
        prog="dagcache",
        description="query-result cache simulator over a star-schema workload")
    sub = ap.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment")
    run_p.add_argument("--policy", required=True, choices=ALL_POLICIES)
    run_p.add_argument("--kind", default="cubepoints",
                       choices=("cubepoints", "cubeslices"))
    run_p.add_argument("--distribution", default="uniform",
                       choices=("uniform", "zipf"))
    run_p.add_argument("--seed", type=int, default=1)
    run_p.add_argument("--fraction", type=float, default=0.05,
                       help="cache capacity as a fraction of the base data")
    _add_common(run_p)

    grid_p = sub.add_parser("grid", help="run a grid of experiments")
    grid_p.add_argument("--config", default=None, help="grid config file")
    grid_p.add_argument("--kinds", default=None, help="comma list of workload kinds")
    grid_p.add_argument("--distributions", default=None,
                        help="comma list of distributions")
    grid_p.add_argument("--seeds", default=None, help="comma list of seeds")
    grid_p.add_argument("--fractions", default=None,
                        help="comma list of cache fractions in [0, 1]")
    grid_p.add_argument("--policies", default=None, help="comma list of policies")
    grid_p.add_argument("--jobs", type=int, default=1,
                        help="process parallelism (output is order independent)")
    _add_common(grid_p)
    return ap


def _maybe(value, fallback):
    return fallback if value is None else value


def cmd_run(args) -> int:
    cfg_kwargs = dict(kind=args.kind, distribution=args.distribution,
                      seed=args.seed, policy=args.policy,
                      cache_fraction=args.fraction)
    for field in ("scale", "queries", "warmup", "window", "decay"):
        v = getattr(args, field)
        if v is not None:
            cfg_kwargs[field] = v
    config = ExperimentConfig(**cfg_kwargs)
    result = run_experiment(config)
    print(",".join(SUMMARY_COLUMNS))
    print(",".join(str(v) for v in summary_row(config, result.total_measured_ms)))
    if args.details:
        path = write_detail(result, resolve_out_dir(args.out))
        print(f"detail rows written to {path}", file=sys.stderr)
    return 0


def cmd_grid(args) -> int:
    fields = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as f:
            fields = parse_grid_config(f.read())
    if args.kinds:
        fields["kinds"] = _csv_list(args.kinds, str)
    if args.distributions:
        fields["distributions"] = _csv_list(args.distributions, str)
    if args.seeds:
        fields["seeds"] = _csv_list(args.seeds, int)
    if args.fractions:
        fields["fractions"] = _csv_list(args.fractions, float)
    if args.policies:
        fields["policies"] = _csv_list(args.policies, str)
    for field in ("scale", "queries", "warmup", "window", "decay"):
        v = getattr(args, field)
        if v is not None:
            fields[field] = v
    fields.setdefault("seeds", DEFAULT_SEEDS)
    fields.setdefault("fractions", DEFAULT_FRACTIONS)
    grid = GridSpec(**fields)
    out_dir = resolve_out_dir(args.out)
    summary_path, rows = run_grid(grid, out_dir, details=args.details,
                                  jobs=args.jobs)
    print(f"{len(rows)} summary rows written to {summary_path}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args)
        return cmd_grid(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
