"""Relational algebra fragment: catalogs, predicates, query trees.

The query language is deliberately small: scans of base relations, a single
selection predicate over integer attributes, equijoins, and one SUM aggregate
with an optional group-by list.  Everything is immutable and hashable so that
structural keys can be built on top of it without copying.

Attribute names are treated as global identifiers.  The same name may appear
in several relations (a fact foreign key and the dimension primary key it
references), but then every occurrence must carry identical statistics; the
catalog validates this.  Join conditions between same-named columns therefore
collapse naturally when schemas are unioned.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

COMPARATORS = ("=", "<", "<=", ">", ">=")


# --------------------------------------------------------------------------
# catalog


@dataclass(frozen=True)
class AttributeInfo:
    """Statistics for one integer-valued column."""

    name: str
    distinct_count: int
    min_value: int
    max_value: int

    def validate(self):
        if self.distinct_count < 1:
            raise ValueError(f"attribute {self.name}: distinct_count must be >= 1")
        if self.min_value > self.max_value:
            raise ValueError(f"attribute {self.name}: empty value domain")
        span = self.max_value - self.min_value + 1
        if self.distinct_count > span:
            raise ValueError(
                f"attribute {self.name}: distinct_count {self.distinct_count} "
                f"exceeds domain span {span}"
            )


@dataclass(frozen=True)
class RelationInfo:
    name: str
    row_count: int
    row_width_bytes: int
    attributes: tuple[AttributeInfo, ...]
    primary_key: str | None = None

    def validate(self):
        if self.row_count < 0:
            raise ValueError(f"relation {self.name}: negative row_count")
        if self.row_width_bytes <= 0:
            raise ValueError(f"relation {self.name}: row width must be positive")
        seen = set()
        for a in self.attributes:
            a.validate()
            if a.name in seen:
                raise ValueError(f"relation {self.name}: duplicate attribute {a.name}")
            seen.add(a.name)
            if self.row_count > 0 and a.distinct_count > self.row_count:
                raise ValueError(
                    f"relation {self.name}.{a.name}: distinct_count exceeds row_count"
                )
        if self.primary_key is not None and self.primary_key not in seen:
            raise ValueError(f"relation {self.name}: unknown primary key")

    def attribute(self, name):
        for a in self.attributes:
            if a.name == name:
                return a
        raise KeyError(f"relation {self.name} has no attribute {name}")


class Catalog:
    """Lookup structure over a set of base relations.

    Relation names are unique.  Attribute names may repeat across relations
    only when all occurrences agree on statistics, so an attribute name alone
    identifies a statistics entry.
    """

    def __init__(self, relations, block_size_bytes=4096):
        self.block_size_bytes = block_size_bytes
        self.relations: dict[str, RelationInfo] = {}
        self._attrs: dict[str, AttributeInfo] = {}
        for rel in relations:
            rel.validate()
            if rel.name in self.relations:
                raise ValueError(f"duplicate relation {rel.name}")
            self.relations[rel.name] = rel
            for a in rel.attributes:
                prev = self._attrs.get(a.name)
                if prev is not None and prev != a:
                    raise ValueError(
                        f"attribute {a.name} has conflicting statistics across relations"
                    )
                self._attrs[a.name] = a

    def relation(self, name) -> RelationInfo:
        try:
            return self.relations[name]
        except KeyError:
            raise KeyError(f"unknown relation {name}") from None

    def attribute(self, name) -> AttributeInfo:
        try:
            return self._attrs[name]
        except KeyError:
            raise KeyError(f"unknown attribute {name}") from None

    def has_attribute(self, name):
        return name in self._attrs

    def total_bytes(self):
        return sum(r.row_count * r.row_width_bytes for r in self.relations.values())


# --------------------------------------------------------------------------
# catalog text format
#
# Line oriented and diff friendly:
#
#   blocksize 4096
#   relation SUPPLIER rows 10000 width 160 pk suppkey
#   attr suppkey distinct 10000 min 1 max 10000
#   attr s_nation distinct 25 min 1 max 25
#
# Attribute lines belong to the most recent relation line.


def format_catalog(catalog: Catalog) -> str:
    lines = [f"blocksize {catalog.block_size_bytes}"]
    for rel in catalog.relations.values():
        head = f"relation {rel.name} rows {rel.row_count} width {rel.row_width_bytes}"
        if rel.primary_key:
            head += f" pk {rel.primary_key}"
        lines.append(head)
        for a in rel.attributes:
            lines.append(
                f"attr {a.name} distinct {a.distinct_count} "
                f"min {a.min_value} max {a.max_value}"
            )
    return "\n".join(lines) + "\n"


def parse_catalog(text: str) -> Catalog:
    block_size = 4096
    relations = []
    current = None  # (name, rows, width, pk, [attrs])

    def flush():
        if current is not None:
            name, rows, width, pk, attrs = current
            relations.append(RelationInfo(name, rows, width, tuple(attrs), pk))

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            if parts[0] == "blocksize":
                block_size = int(parts[1])
            elif parts[0] == "relation":
                flush()
                kv = dict(zip(parts[2::2], parts[3::2]))
                current = (parts[1], int(kv["rows"]), int(kv["width"]), kv.get("pk"), [])
            elif parts[0] == "attr":
                if current is None:
                    raise ValueError("attr line before any relation line")
                kv = dict(zip(parts[2::2], parts[3::2]))
                current[4].append(
                    AttributeInfo(parts[1], int(kv["distinct"]), int(kv["min"]), int(kv["max"]))
                )
            else:
                raise ValueError(f"unknown directive {parts[0]}")
        except (IndexError, KeyError, ValueError) as exc:
            raise ValueError(f"catalog line {lineno}: {raw!r}: {exc}") from None
    flush()
    return Catalog(relations, block_size)


def load_catalog(path) -> Catalog:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_catalog(fh.read())


def save_catalog(catalog, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_catalog(catalog))


# --------------------------------------------------------------------------
# predicates


@dataclass(frozen=True)
class Atom:
    attribute: str
    comparator: str
    constant: int

    def __post_init__(self):
        if self.comparator not in COMPARATORS:
            raise ValueError(f"bad comparator {self.comparator!r}")


@dataclass(frozen=True)
class And:
    children: tuple

    def __post_init__(self):
        if len(self.children) < 2:
            raise ValueError("And needs at least two children")


@dataclass(frozen=True)
class Or:
    children: tuple

    def __post_init__(self):
        if len(self.children) < 2:
            raise ValueError("Or needs at least two children")


def pred_key(p):
    """Total-order structural key for a canonical predicate."""
    if isinstance(p, Atom):
        return ("atom", p.attribute, p.comparator, p.constant)
    if isinstance(p, And):
        return ("and", tuple(pred_key(c) for c in p.children))
    return ("or", tuple(pred_key(c) for c in p.children))


def canonicalize(p):
    """Canonical form: nested same-kind nodes flattened, children sorted by
    structural key, duplicate siblings dropped, single-child AND/OR collapsed.
    """
    if isinstance(p, Atom):
        return p
    kind = And if isinstance(p, And) else Or
    flat = []
    for c in p.children:
        c = canonicalize(c)
        if isinstance(c, kind):
            flat.extend(c.children)
        else:
            flat.append(c)
    seen = {}
    for c in flat:
        seen.setdefault(pred_key(c), c)
    children = tuple(seen[k] for k in sorted(seen))
    if len(children) == 1:
        return children[0]
    return kind(children)


def pred_str(p):
    if isinstance(p, Atom):
        return f"{p.attribute}{p.comparator}{p.constant}"
    sep = "&" if isinstance(p, And) else "|"
    return "(" + sep.join(pred_str(c) for c in p.children) + ")"


def pred_attributes(p):
    if isinstance(p, Atom):
        return {p.attribute}
    out = set()
    for c in p.children:
        out |= pred_attributes(c)
    return out


_INF = float("inf")


def _atom_interval(a: Atom):
    """Closed integer interval of values satisfying the atom."""
    c = a.constant
    if a.comparator == "=":
        return (c, c)
    if a.comparator == "<":
        return (-_INF, c - 1)
    if a.comparator == "<=":
        return (-_INF, c)
    if a.comparator == ">":
        return (c + 1, _INF)
    return (c, _INF)


@lru_cache(maxsize=None)
def conjunct_intervals(p):
    """Per-attribute intervals when p is an atom or a pure conjunction of
    atoms; None for any other shape.  Cached by predicate value; callers
    must treat the returned dict as read-only."""
    atoms = [p] if isinstance(p, Atom) else list(p.children) if isinstance(p, And) else None
    if atoms is None:
        return None
    out = {}
    for a in atoms:
        if not isinstance(a, Atom):
            return None
        lo, hi = _atom_interval(a)
        plo, phi = out.get(a.attribute, (-_INF, _INF))
        out[a.attribute] = (max(plo, lo), min(phi, hi))
    return out


def _equality_values(p):
    """(attribute, values) when p is a disjunction of equality atoms over a
    single attribute, else None."""
    if not isinstance(p, Or):
        return None
    attr = None
    values = set()
    for c in p.children:
        if not isinstance(c, Atom) or c.comparator != "=":
            return None
        if attr is None:
            attr = c.attribute
        elif attr != c.attribute:
            return None
        values.add(c.constant)
    return attr, values


def predicate_implies(p, q) -> bool:
    """Sound, incomplete implication test: does every tuple satisfying p
    satisfy q?

    Handles conjunctions of range/equality atoms through per-attribute
    interval containment, disjunctions of equality atoms over one attribute,
    and generic structural decomposition.  Unsupported shapes return False.
    """
    if isinstance(q, And):
        return all(predicate_implies(p, qc) for qc in q.children)
    if isinstance(p, Or):
        return all(predicate_implies(pc, q) for pc in p.children)

    # p is now an Atom or an And; q is an Atom or an Or.
    intervals = conjunct_intervals(p)
    if intervals is not None and any(lo > hi for lo, hi in intervals.values()):
        return True  # p unsatisfiable, implication vacuous

    if isinstance(q, Atom):
        if intervals is None:
            # p conjoins non-atomic parts: enough if some conjunct alone implies q
            return isinstance(p, And) and any(
                predicate_implies(pc, q) for pc in p.children
            )
        lo, hi = intervals.get(q.attribute, (-_INF, _INF))
        qlo, qhi = _atom_interval(q)
        return qlo <= lo and hi <= qhi

    # q is a disjunction
    if any(predicate_implies(p, qc) for qc in q.children):
        return True
    eq = _equality_values(q)
    if eq is not None and intervals is not None:
        attr, values = eq
        lo, hi = intervals.get(attr, (-_INF, _INF))
        if lo == hi and lo in values:
            return True
    return False


# --------------------------------------------------------------------------
# query trees


@dataclass(frozen=True)
class Scan:
    relation: str


@dataclass(frozen=True)
class Select:
    predicate: object
    child: object


@dataclass(frozen=True)
class Join:
    left_attr: str
    right_attr: str
    left: object
    right: object


@dataclass(frozen=True)
class GroupAgg:
    groupby: tuple[str, ...]
    agg_attr: str
    child: object

    def __post_init__(self):
        object.__setattr__(self, "groupby", tuple(sorted(set(self.groupby))))


def sum_name(attr):
    """Output column name for SUM(attr); stable under re-aggregation."""
    return attr if attr.startswith("sum_") else "sum_" + attr


def schema_of(tree, catalog: Catalog) -> frozenset:
    """Output attribute set of a query tree; raises ValueError when a node
    references attributes its child does not produce."""
    if isinstance(tree, Scan):
        return frozenset(a.name for a in catalog.relation(tree.relation).attributes)
    if isinstance(tree, Select):
        schema = schema_of(tree.child, catalog)
        missing = pred_attributes(tree.predicate) - schema
        if missing:
            raise ValueError(f"selection references unknown attributes {sorted(missing)}")
        return schema
    if isinstance(tree, Join):
        left = schema_of(tree.left, catalog)
        right = schema_of(tree.right, catalog)
        if tree.left_attr not in left:
            raise ValueError(f"join attribute {tree.left_attr} missing from left input")
        if tree.right_attr not in right:
            raise ValueError(f"join attribute {tree.right_attr} missing from right input")
        return left | right
    if isinstance(tree, GroupAgg):
        schema = schema_of(tree.child, catalog)
        missing = set(tree.groupby) - schema
        if missing:
            raise ValueError(f"group-by references unknown attributes {sorted(missing)}")
        if tree.agg_attr not in schema:
            raise ValueError(f"aggregate references unknown attribute {tree.agg_attr}")
        return frozenset(tree.groupby) | {sum_name(tree.agg_attr)}
    raise TypeError(f"not a query tree node: {tree!r}")


def tree_relations(tree):
    """Multiset-free set of base relations mentioned by the tree."""
    if isinstance(tree, Scan):
        return {tree.relation}
    if isinstance(tree, (Select, GroupAgg)):
        return tree_relations(tree.child)
    if isinstance(tree, Join):
        return tree_relations(tree.left) | tree_relations(tree.right)
    raise TypeError(f"not a query tree node: {tree!r}")
