"""Star-schema benchmark workload: catalog builder and query stream generator.

The schema is a retail-style star: one fact table (ORDERS) joined to four
dimension tables (SUPPLIER, PART, CUSTOMER, TIME) on dense surrogate keys.
Scale 1.0 corresponds to roughly one gigabyte of raw base data; the catalog
builder scales row counts linearly and clamps distinct counts accordingly.

Query streams are cube-style aggregates: an optional conjunctive filter over
a fixed set of selectable attributes, then SUM(quantity) grouped by a subset
of five dimension attributes.  Two stream kinds differ only in comparator
choice (CubePoints uses equality atoms; CubeSlices mixes range comparators).
Two popularity regimes are supported: Uniform, and a Zipf(0.5) regime whose
rank-to-groupby-subset mapping rotates every ``ROTATION_INTERVAL`` queries so
the popular subsets drift over the stream.

All randomness flows through a splitmix64 hash of (seed, query index,
decision label), so any query can be regenerated independently of the rest
of the stream and streams are reproducible across processes.
"""

from __future__ import annotations

import math
from bisect import bisect_left
from dataclasses import dataclass
from functools import lru_cache

from .algebra import (
    And,
    Atom,
    AttributeInfo,
    COMPARATORS,
    Catalog,
    GroupAgg,
    Join,
    RelationInfo,
    Scan,
    Select,
    schema_of,
)

_MASK64 = (1 << 64) - 1

# scale-1.0 row counts and row widths (bytes)
_FACT_ROWS = 6_000_000
_SCALE1 = {
    "ORDERS": (_FACT_ROWS, 156),
    "SUPPLIER": (10_000, 160),
    "PART": (200_000, 156),
    "CUSTOMER": (150_000, 180),
    "TIME": (2_556, 64),
}

# non-key attribute -> (relation, scale-1 distinct count)
_PLAIN_ATTRS = {
    "quantity": ("ORDERS", 50),
    "s_nation": ("SUPPLIER", 25),
    "s_balance": ("SUPPLIER", 1000),
    "p_size": ("PART", 50),
    "p_retail": ("PART", 1000),
    "c_nation": ("CUSTOMER", 25),
    "c_balance": ("CUSTOMER", 1000),
    "month": ("TIME", 12),
    "year": ("TIME", 7),
}

# dimension primary key -> dimension relation
_DIM_KEYS = {
    "suppkey": "SUPPLIER",
    "partkey": "PART",
    "custkey": "CUSTOMER",
    "timekey": "TIME",
}

# attributes eligible for filter atoms, fixed order (draws index into this)
SELECT_ATTRS = (
    "quantity",
    "s_nation",
    "s_balance",
    "p_size",
    "p_retail",
    "c_nation",
    "c_balance",
    "month",
    "year",
)

# attributes eligible for grouping; 2**5 = 32 candidate group-by subsets
GROUPBY_ATTRS = ("s_nation", "p_size", "c_nation", "month", "year")
_N_SUBSETS = 1 << len(GROUPBY_ATTRS)

ZIPF_THETA = 0.5
ROTATION_INTERVAL = 32
MAX_ATOMS = 3


def _dense(name, distinct):
    return AttributeInfo(name, distinct, 1, distinct)


def build_star_catalog(scale: float = 1.0) -> Catalog:
    """Catalog for the star schema at the given linear scale factor.

    Row counts scale as ceil(rows * scale); distinct counts are clamped to
    the scaled row count and foreign keys always mirror the dimension key.
    """
    if not (scale > 0.0):
        raise ValueError(f"scale must be positive, got {scale!r}")

    rows = {name: max(1, math.ceil(n * scale)) for name, (n, _) in _SCALE1.items()}

    def plain(rel_name):
        out = []
        for attr, (owner, d1) in _PLAIN_ATTRS.items():
            if owner == rel_name:
                out.append(_dense(attr, min(d1, rows[rel_name])))
        return out

    relations = []
    for key, dim in _DIM_KEYS.items():
        n, width = rows[dim], _SCALE1[dim][1]
        relations.append(RelationInfo(
            dim, n, width, tuple([_dense(key, n)] + plain(dim)), primary_key=key))
    fact_attrs = [_dense(key, rows[_DIM_KEYS[key]]) for key in _DIM_KEYS]
    relations.append(RelationInfo(
        "ORDERS", rows["ORDERS"], _SCALE1["ORDERS"][1],
        tuple(fact_attrs + plain("ORDERS"))))
    return Catalog(relations)


def star_join_tree():
    """Left-deep join of the fact table with all four dimensions."""
    tree = Scan("ORDERS")
    for key, dim in _DIM_KEYS.items():
        tree = Join(key, key, tree, Scan(dim))
    return tree


def total_db_blocks(catalog: Catalog, params) -> float:
    """Raw size of all base relations in cost-model blocks."""
    return catalog.total_bytes() / params.block_size_bytes


# --------------------------------------------------------------------------
# deterministic randomness
#
# splitmix64 over a fold of the key parts.  Strings are folded with FNV-1a
# first so labels like "value" and "natoms" split the stream cleanly.


def _splitmix(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _fnv(text: str) -> int:
    v = 0xCBF29CE484222325
    for b in text.encode("utf-8"):
        v = ((v ^ b) * 0x100000001B3) & _MASK64
    return v


def _h(*parts) -> int:
    z = 0x243F6A8885A308D3
    for p in parts:
        if isinstance(p, str):
            p = _fnv(p)
        z = _splitmix(z ^ (p & _MASK64))
    return z


def _uniform(n: int, *key) -> int:
    """Integer in [0, n); modulo bias is negligible for n << 2**64."""
    if n <= 0:
        raise ValueError("empty range")
    return _h(*key) % n


@lru_cache(maxsize=None)
def _zipf_cdf(n: int):
    weights = [1.0 / (r + 1) ** ZIPF_THETA for r in range(n)]
    total = math.fsum(weights)
    cdf, acc = [], 0.0
    for w in weights:
        acc += w / total
        cdf.append(acc)
    cdf[-1] = 1.0
    return tuple(cdf)


def _zipf(n: int, *key) -> int:
    """Zipf(theta)-distributed rank in [0, n); rank 0 is the most popular."""
    u = _h(*key) / 2.0 ** 64
    return bisect_left(_zipf_cdf(n), u, hi=n - 1)


# --------------------------------------------------------------------------
# query stream


@dataclass(frozen=True)
class WorkloadSpec:
    """Identity of one query stream."""

    kind: str = "cubepoints"          # cubepoints | cubeslices
    distribution: str = "uniform"     # uniform | zipf
    seed: int = 1
    query_count: int = 1000

    def __post_init__(self):
        if self.kind not in ("cubepoints", "cubeslices"):
            raise ValueError(f"unknown workload kind {self.kind!r}")
        if self.distribution not in ("uniform", "zipf"):
            raise ValueError(f"unknown distribution {self.distribution!r}")
        if self.query_count < 1:
            raise ValueError("query_count must be at least 1")


def _draw_attrs(spec, i, natoms):
    """Distinct filter attributes; collisions re-draw with a retry counter."""
    chosen = []
    zipf = spec.distribution == "zipf"
    for j in range(natoms):
        retry = 0
        while True:
            key = (spec.seed, i, "attr", j, retry)
            if zipf:
                idx = _zipf(len(SELECT_ATTRS), *key)
            else:
                idx = _uniform(len(SELECT_ATTRS), *key)
            name = SELECT_ATTRS[idx]
            if name not in chosen:
                chosen.append(name)
                break
            retry += 1
    return chosen


def _draw_atom(spec, catalog, i, j, attr):
    info = catalog.attribute(attr)
    span = info.max_value - info.min_value + 1
    if spec.kind == "cubepoints":
        cmp_ = "="
    else:
        cmp_ = COMPARATORS[_uniform(len(COMPARATORS), spec.seed, i, "cmp", j)]
    if spec.distribution == "zipf":
        rank = _zipf(span, spec.seed, i, "value", j)
    else:
        rank = _uniform(span, spec.seed, i, "value", j)
    return Atom(attr, cmp_, info.min_value + rank)


def _draw_groupby(spec, i):
    if spec.distribution == "zipf":
        rank = _zipf(_N_SUBSETS, spec.seed, i, "groupby")
        mask = (rank + i // ROTATION_INTERVAL) % _N_SUBSETS
    else:
        mask = _uniform(_N_SUBSETS, spec.seed, i, "groupby")
    return tuple(a for b, a in enumerate(GROUPBY_ATTRS) if mask & (1 << b))


def assemble_query(atoms, groupby):
    """Query tree for a filter conjunction and a group-by attribute subset."""
    tree = star_join_tree()
    if len(atoms) == 1:
        tree = Select(atoms[0], tree)
    elif atoms:
        tree = Select(And(tuple(atoms)), tree)
    return GroupAgg(tuple(groupby), "quantity", tree)


def generate_query(spec: WorkloadSpec, catalog: Catalog, i: int):
    """Query tree for stream position i (0-based).  Pure in (spec, i)."""
    natoms = _uniform(MAX_ATOMS + 1, spec.seed, i, "natoms")
    attrs = _draw_attrs(spec, i, natoms)
    atoms = [_draw_atom(spec, catalog, i, j, a) for j, a in enumerate(attrs)]
    return assemble_query(atoms, _draw_groupby(spec, i))


def generate_stream(spec: WorkloadSpec, catalog: Catalog):
    for i in range(spec.query_count):
        yield generate_query(spec, catalog, i)


# --------------------------------------------------------------------------
# stream text format
#
# One query per line, tab separated:
#
#   <index>\t<atom [& atom]* or ->\t<groupby csv or ->
#
# e.g.  17\tquantity = 3 & p_size < 11\tmonth,year


def format_query_line(i, tree) -> str:
    node = tree
    assert isinstance(node, GroupAgg)
    groupby = ",".join(node.groupby) if node.groupby else "-"
    node = node.child
    atoms = []
    if isinstance(node, Select):
        pred = node.predicate
        children = pred.children if isinstance(pred, And) else (pred,)
        for a in children:
            atoms.append(f"{a.attribute} {a.comparator} {a.constant}")
    sel = " & ".join(atoms) if atoms else "-"
    return f"{i}\t{sel}\t{groupby}"


def parse_query_line(line: str):
    """Inverse of format_query_line; returns (index, tree)."""
    idx_s, sel, groupby = line.rstrip("\n").split("\t")
    atoms = []
    if sel != "-":
        for part in sel.split(" & "):
            attr, cmp_, const = part.split(" ")
            atoms.append(Atom(attr, cmp_, int(const)))
    gb = tuple(groupby.split(",")) if groupby != "-" else ()
    return int(idx_s), assemble_query(atoms, gb)


def save_stream(spec, catalog, path):
    with open(path, "w", encoding="utf-8") as f:
        for i, tree in enumerate(generate_stream(spec, catalog)):
            f.write(format_query_line(i, tree) + "\n")


def check_stream(spec: WorkloadSpec, catalog: Catalog) -> None:
    """Validate every generated tree against the catalog schema."""
    for tree in generate_stream(spec, catalog):
        schema_of(tree, catalog)
