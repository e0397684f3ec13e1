"""Experiment harness: single runs, grids, and deterministic CSV output.

A run is (workload spec, policy, cache fraction): the policy processes the
stream query by query and the harness logs one row per query plus a total
over the measured range (everything after the warmup prefix).  Totals are
kept as exact floats in memory; CSV cost columns are rounded half-up to
integer milliseconds, so replaying a run reproduces the files byte for byte.

A grid is the cross product of workload kinds, distributions, seeds, cache
fractions and policies.  Policies that ignore capacity (nocache, infcache)
are executed once per stream and their summary row is replicated across the
requested fractions.  Runs are independent, so an optional process pool can
execute them; rows are ordered by config key before writing, which keeps the
output identical at any parallelism level.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

from .baselines import POLICY_CLASSES
from .cache import IncrementalPolicy, VARIANTS
from .costmodel import CostParams
from .workload import (
    WorkloadSpec,
    build_star_catalog,
    generate_stream,
    star_join_tree,
    total_db_blocks,
)

INCREMENTAL_POLICIES = tuple(f"incremental-{v}" for v in VARIANTS)
ALL_POLICIES = tuple(sorted(POLICY_CLASSES)) + INCREMENTAL_POLICIES

DEFAULT_FRACTIONS = (0.0, 0.05, 0.16, 0.32, 0.50)
DEFAULT_SEEDS = (1, 2, 3, 4, 5)

ENV_OUT_DIR = "DAGCACHE_OUT"

SUMMARY_COLUMNS = ("workload", "distribution", "policy", "cache_fraction",
                   "seed", "scale", "queries", "warmup", "total_measured_ms")
DETAIL_COLUMNS = ("index", "plan_ms", "mat_ms", "occupancy_blocks",
                  "reused", "admitted", "evicted", "marked")


def round_ms(x: float) -> int:
    """Round half-up to integer milliseconds (0.5 always rounds toward +inf)."""
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class ExperimentConfig:
    """One benchmark run.  warmup + measured range must cover the stream."""

    kind: str = "cubepoints"
    distribution: str = "uniform"
    seed: int = 1
    scale: float = 0.01
    policy: str = "incremental-nofullcache"
    cache_fraction: float = 0.05
    queries: int = 1000
    warmup: int = 100
    window: int = 10
    decay: float = 0.9

    def __post_init__(self):
        WorkloadSpec(self.kind, self.distribution, self.seed, self.queries)
        if self.policy not in ALL_POLICIES:
            raise ValueError(
                f"policy must be one of {', '.join(ALL_POLICIES)}; got {self.policy!r}")
        if not (0.0 <= self.cache_fraction <= 1.0):
            raise ValueError(
                f"cache_fraction must be within [0, 1], got {self.cache_fraction!r}")
        if not (self.scale > 0.0):
            raise ValueError(f"scale must be positive, got {self.scale!r}")
        if self.warmup < 0:
            raise ValueError(f"warmup must be non-negative, got {self.warmup}")
        if self.warmup >= self.queries:
            raise ValueError(
                f"warmup ({self.warmup}) must leave a non-empty measured range"
                f" (queries = {self.queries})")

    @property
    def measured(self) -> int:
        return self.queries - self.warmup

    def workload_spec(self) -> WorkloadSpec:
        return WorkloadSpec(self.kind, self.distribution, self.seed, self.queries)


def make_policy(name, catalog, params, capacity_blocks, anchor=None,
                window=10, decay=0.9):
    """Instantiate a cache policy by CLI name."""
    if name in POLICY_CLASSES:
        return POLICY_CLASSES[name](catalog, params, capacity_blocks, anchor)
    if name in INCREMENTAL_POLICIES:
        variant = name.split("-", 1)[1]
        return IncrementalPolicy(catalog, params, capacity_blocks, anchor,
                                 variant=variant, window=window, decay=decay)
    raise ValueError(f"unknown policy {name!r}")


class ExperimentResult:
    """Per-query rows plus the measured-range total, all in float ms."""

    def __init__(self, config, rows, capacity_blocks):
        self.config = config
        self.rows = rows
        self.capacity_blocks = capacity_blocks
        self.total_measured_ms = math.fsum(
            r.total_cost for r in rows[config.warmup:])

    def recomputed_total(self) -> float:
        return math.fsum(r.total_cost for r in self.rows[self.config.warmup:])


def run_experiment(config: ExperimentConfig, params: CostParams | None = None,
                   catalog=None) -> ExperimentResult:
    if params is None:
        params = CostParams()
    if catalog is None:
        catalog = build_star_catalog(config.scale)
    capacity = config.cache_fraction * total_db_blocks(catalog, params)
    policy = make_policy(config.policy, catalog, params, capacity,
                         anchor=star_join_tree(),
                         window=config.window, decay=config.decay)
    rows = []
    for i, tree in enumerate(generate_stream(config.workload_spec(), catalog)):
        res = policy.step(tree, f"q{i}")
        # capacity must hold after every query, not just at the end
        policy.state.assert_capacity()
        rows.append(res)
    return ExperimentResult(config, rows, capacity)


# --------------------------------------------------------------------------
# CSV


def _ids(ids) -> str:
    return " ".join(str(i) for i in ids) if ids else "-"


def detail_rows(result: ExperimentResult):
    for r in result.rows:
        admitted = " ".join(f"{nid}:{size:.3f}" for nid, size in r.admitted)
        yield (r.index - 1, round_ms(r.plan_cost), round_ms(r.mat_cost),
               f"{r.occupancy:.3f}", _ids(r.reused), admitted or "-",
               _ids(r.evicted), _ids(r.marked))


def summary_row(config: ExperimentConfig, total_ms: float):
    return (config.kind, config.distribution, config.policy,
            f"{config.cache_fraction:g}", config.seed, f"{config.scale:g}",
            config.queries, config.warmup, round_ms(total_ms))


def _write_csv(path, header, rows):
    """Atomic-ish CSV write; leaves a .partial marker if the write fails."""
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        os.replace(tmp, path)
    except OSError:
        try:
            with open(f"{path}.partial", "w", encoding="utf-8") as f:
                f.write("write failed; output incomplete\n")
        except OSError:
            pass
        raise


def detail_filename(config: ExperimentConfig) -> str:
    pct = f"{config.cache_fraction * 100:g}"
    return (f"detail_{config.policy}_{config.kind}_{config.distribution}"
            f"_f{pct}_s{config.seed}.csv")


def write_detail(result: ExperimentResult, out_dir) -> str:
    path = os.path.join(out_dir, detail_filename(result.config))
    _write_csv(path, DETAIL_COLUMNS, detail_rows(result))
    return path


# --------------------------------------------------------------------------
# grids


@dataclass(frozen=True)
class GridSpec:
    """Cross product of workload and policy axes for run_grid."""

    kinds: tuple = ("cubepoints",)
    distributions: tuple = ("uniform", "zipf")
    seeds: tuple = DEFAULT_SEEDS
    fractions: tuple = DEFAULT_FRACTIONS
    policies: tuple = ALL_POLICIES
    scale: float = 0.01
    queries: int = 1000
    warmup: int = 100
    window: int = 10
    decay: float = 0.9

    def configs(self):
        out = []
        for kind in self.kinds:
            for dist in self.distributions:
                for seed in self.seeds:
                    for policy in self.policies:
                        for frac in self.fractions:
                            out.append(ExperimentConfig(
                                kind, dist, seed, self.scale, policy, frac,
                                self.queries, self.warmup, self.window,
                                self.decay))
        return out


# nocache has no cache and infcache has no capacity bound: one run covers
# every fraction of the same stream
CAPACITY_FREE = ("nocache", "infcache")


def _sort_key(config: ExperimentConfig):
    return (config.kind, config.distribution, config.policy,
            config.cache_fraction, config.seed)


def _run_one(config: ExperimentConfig):
    return run_experiment(config)


def run_grid(grid: GridSpec, out_dir=None, details=False, jobs=1):
    """Run every config, write summary.csv (one row per config), return rows.

    Returns (summary_path, rows) where rows are the written tuples in file
    order.  When out_dir is None nothing is written.
    """
    configs = grid.configs()
    todo, alias = {}, {}
    for cfg in configs:
        key = cfg if cfg.policy not in CAPACITY_FREE else replace(
            cfg, cache_fraction=0.0)
        alias[cfg] = key
        todo.setdefault(key, None)

    run_list = sorted(todo, key=_sort_key)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for cfg, result in zip(run_list, pool.map(_run_one, run_list)):
                todo[cfg] = result
    else:
        for cfg in run_list:
            todo[cfg] = _run_one(cfg)

    rows = []
    for cfg in sorted(configs, key=_sort_key):
        result = todo[alias[cfg]]
        rows.append(summary_row(cfg, result.total_measured_ms))

    summary_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        summary_path = os.path.join(out_dir, "summary.csv")
        _write_csv(summary_path, SUMMARY_COLUMNS, rows)
        if details:
            for cfg in sorted(configs, key=_sort_key):
                result = todo[alias[cfg]]
                # replicated policies reuse the shared run's rows per fraction
                write_detail(ExperimentResultView(cfg, result), out_dir)
    return summary_path, rows


class ExperimentResultView:
    """Re-badges a shared run under another config for detail replication."""

    def __init__(self, config, result):
        self.config = config
        self.rows = result.rows
        self.capacity_blocks = result.capacity_blocks
        self.total_measured_ms = result.total_measured_ms


def resolve_out_dir(flag_value=None) -> str:
    return flag_value or os.environ.get(ENV_OUT_DIR) or "."
