"""Disk-and-CPU cost model plus cardinality estimation.

Costs are wall-clock milliseconds as floats.  The model is block oriented:
every result has an estimated row count and row width, from which a block
count follows.  Operators consume inputs either by scanning a base relation
(seek plus read plus CPU per block) or by absorbing a pipelined stream (CPU
per block).  Hash and sort operators that exceed their memory grant pay one
extra write-plus-read pass over the oversized input.

Reading a stored result costs a seek plus read-and-CPU per block; storing a
result costs a seek plus a write per block.
"""

from __future__ import annotations

from dataclasses import dataclass

from .algebra import And, Atom, Catalog, Or

# Width charged per column of a derived (grouped) result, bytes.  Base
# relation widths come from the catalog; intermediate join widths add input
# widths, so only aggregation needs a per-column figure.
ATTR_WIDTH_BYTES = 8


@dataclass(frozen=True)
class CostParams:
    block_size_bytes: int = 4096
    seek_ms: float = 10.0
    read_ms_per_block: float = 2.0
    write_ms_per_block: float = 4.0
    cpu_ms_per_block: float = 0.2
    operator_memory_bytes: int = 6 * 2**20

    def validate(self):
        if self.block_size_bytes <= 0 or self.operator_memory_bytes <= 0:
            raise ValueError("block size and operator memory must be positive")
        for f in (self.seek_ms, self.read_ms_per_block, self.write_ms_per_block,
                  self.cpu_ms_per_block):
            if f < 0:
                raise ValueError("negative cost parameter")


@dataclass(frozen=True)
class Estimate:
    """Estimated size of one result: rows, bytes per row, blocks."""

    rows: float
    width_bytes: float
    blocks: float

    @staticmethod
    def of(rows, width_bytes, params: CostParams):
        # fractional blocks: results are accounted as packed bytes, so a
        # small result charges (and occupies) only its share of a block
        rows = max(0.0, float(rows))
        blocks = rows * width_bytes / params.block_size_bytes
        return Estimate(rows, float(width_bytes), blocks)


# --------------------------------------------------------------------------
# selectivity


def _range_selectivity(atom, info):
    lo, hi = info.min_value, info.max_value
    span = hi - lo + 1
    c = atom.constant
    if atom.comparator == "<":
        covered = min(c - 1, hi) - lo + 1
    elif atom.comparator == "<=":
        covered = min(c, hi) - lo + 1
    elif atom.comparator == ">":
        covered = hi - max(c + 1, lo) + 1
    else:  # >=
        covered = hi - max(c, lo) + 1
    if covered <= 0:
        # selectivity stays in (0, 1]: an empty range still charges one
        # domain point so downstream estimates never hit zero
        return 1.0 / span
    return min(1.0, covered / span)


def selectivity(pred, catalog: Catalog) -> float:
    """Fraction of input rows satisfying pred, assuming independent atoms.

    Equality selects 1/distinct_count; ranges select the covered fraction of
    the attribute's [min, max] domain; AND multiplies; OR combines
    independent complements.
    """
    if isinstance(pred, Atom):
        info = catalog.attribute(pred.attribute)
        if pred.comparator == "=":
            if pred.constant < info.min_value or pred.constant > info.max_value:
                return 1.0 / (info.max_value - info.min_value + 1)
            return 1.0 / info.distinct_count
        return _range_selectivity(pred, info)
    if isinstance(pred, And):
        s = 1.0
        for c in pred.children:
            s *= selectivity(c, catalog)
        return s
    if isinstance(pred, Or):
        miss = 1.0
        for c in pred.children:
            miss *= 1.0 - selectivity(c, catalog)
        return 1.0 - miss
    raise TypeError(f"not a predicate: {pred!r}")


# --------------------------------------------------------------------------
# output estimates


def estimate_scan(relation, params) -> Estimate:
    return Estimate.of(relation.row_count, relation.row_width_bytes, params)


def estimate_select(input_est, pred, catalog, params) -> Estimate:
    rows = input_est.rows * selectivity(pred, catalog)
    if input_est.rows >= 1.0:
        rows = max(rows, 1.0)  # a non-empty input never estimates to nothing
    return Estimate.of(rows, input_est.width_bytes, params)


def estimate_join(input_ests, conds, catalog, params) -> Estimate:
    """N-way join estimate: product of input rows times one reduction factor
    1/max(distinct(a), distinct(b)) per equality condition.

    Distinct counts are the base catalog figures, which makes a key to
    foreign-key join of a filtered dimension contract the fact side by
    exactly the dimension's filter fraction.  No condition means a cross
    product.
    """
    rows = 1.0
    width = 0.0
    for est in input_ests:
        rows *= est.rows
        width += est.width_bytes
    for a, b in conds:
        d = max(catalog.attribute(a).distinct_count, catalog.attribute(b).distinct_count)
        rows /= d
    return Estimate.of(rows, width, params)


def estimate_groupagg(input_est, groupby, catalog, params) -> Estimate:
    groups = 1.0
    for g in groupby:
        groups *= catalog.attribute(g).distinct_count
    rows = min(input_est.rows, groups)
    width = ATTR_WIDTH_BYTES * (len(groupby) + 1)
    return Estimate.of(rows, width, params)


# --------------------------------------------------------------------------
# operator and transfer costs


def scan_cost(est, params: CostParams) -> float:
    """Read a stored result or base relation: seek, then read+CPU per block."""
    return params.seek_ms + est.blocks * (params.read_ms_per_block + params.cpu_ms_per_block)


def pipeline_cost(est, params: CostParams) -> float:
    """Absorb a pipelined input stream: CPU per block only."""
    return est.blocks * params.cpu_ms_per_block


def spill_cost(est, params: CostParams) -> float:
    """One partitioning or sort pass when a build/sort input outgrows the
    operator memory grant: write plus re-read of every block."""
    if est.blocks * params.block_size_bytes <= params.operator_memory_bytes:
        return 0.0
    return est.blocks * (params.write_ms_per_block + params.read_ms_per_block)


def reuse_cost(est, params: CostParams) -> float:
    """Cost of answering from a cached copy of the result."""
    return scan_cost(est, params)


def materialization_cost(est, params: CostParams) -> float:
    """Cost of writing a result into the cache."""
    return params.seek_ms + est.blocks * params.write_ms_per_block


def operator_exec_cost(kind, input_ests, input_is_base, params: CostParams) -> float:
    """Execution cost of one operator, excluding the cost of computing its
    inputs.  Base relation inputs are scanned; other inputs are pipelined.
    Joins build on their smaller input; aggregation sorts its only input;
    selection streams and never spills.
    """
    total = 0.0
    for est, is_base in zip(input_ests, input_is_base):
        total += scan_cost(est, params) if is_base else pipeline_cost(est, params)
    if kind == "join" and len(input_ests) == 2:
        build = min(input_ests, key=lambda e: e.blocks)
        total += spill_cost(build, params)
    elif kind == "agg":
        total += spill_cost(input_ests[0], params)
    return total
