"""Best-plan search and cache-benefit evaluation over the query DAG.

The planner is one memoized pass: every equivalence node costs the cheapest
of "compute via one of my operations" and, when the node has a stored
instance, "read it back".  Reads win only when strictly cheaper, equal-cost
operations resolve to the lowest operation id, and float accumulation order
is fixed, so identical inputs always yield identical plans and costs.
"""

from __future__ import annotations

import math
from typing import Dict, Iterable, List, Optional, Tuple

from .costmodel import scan_cost
from .dag import QueryDag

# per-node plan choices besides an operation id
LEAF = -1   # base relation inside a plan; the consuming operator charges the scan
REUSE = -2  # read the stored instance
SCAN = -3   # base relation as the query root: one full scan


class Plan:
    """Operator choice per costed node, plus the walk down from the root."""

    __slots__ = ("root", "cost", "choices", "nodes", "reused")

    def __init__(self, root, cost, choices, nodes, reused):
        self.root = root
        self.cost = cost
        self.choices = choices  # eq id -> op id, or REUSE/LEAF/SCAN
        self.nodes = nodes      # result nodes on the plan, inputs first
        self.reused = reused    # subset of nodes read from the cache

    def __repr__(self):
        return f"Plan(root={self.root}, cost={self.cost:.3f}, nodes={len(self.nodes)})"


def _best(dag, eq_id, cached, memo):
    """(cost, choice) of the cheapest way to produce eq_id given the cached
    set.  eq_id must be pre-resolved; results are memoized per cached-set."""
    got = memo.get(eq_id)
    if got is not None:
        return got
    node = dag.nodes[eq_id]
    if node.kind == "rel":
        res = (0.0, LEAF)
        memo[eq_id] = res
        return res
    if eq_id in cached:
        best = node.reuse_cost
        choice = REUSE
    else:
        best = math.inf
        choice = None
    for oid in node.child_ops:  # ascending id: stable tie-break
        op = dag.ops[oid]
        cost = op.exec_cost
        feasible = True
        for inp in op.inputs:
            cost += _best(dag, inp, cached, memo)[0]
            if cost >= best:
                feasible = False
                break
        if feasible and cost < best:
            best = cost
            choice = oid
    if choice is None:
        raise ValueError(f"node {eq_id} has no operations and is not cached")
    res = (best, choice)
    memo[eq_id] = res
    return res


def _root_cost(dag, root, cached, memo) -> float:
    """Cost of answering root given the cached set.  A base relation as the
    query root costs its scan (elsewhere leaves cost 0 and the consumer
    charges the scan); the special case stays out of the shared memo."""
    node = dag.nodes[root]
    if node.kind == "rel":
        base = scan_cost(node.est, dag.params)
        if root in cached and node.reuse_cost < base:
            return node.reuse_cost
        return base
    return _best(dag, root, cached, memo)[0]


def resolve_set(dag, ids) -> frozenset:
    return frozenset(dag.find(e) for e in ids)


def optimize(dag: QueryDag, root, cached, memo=None) -> Plan:
    """Best plan for one root against a set of stored node ids."""
    root = dag.find(root)
    cached = resolve_set(dag, cached)
    if memo is None:
        memo = {}
    node = dag.nodes[root]
    if node.kind == "rel":
        base = scan_cost(node.est, dag.params)
        if root in cached and node.reuse_cost < base:
            return Plan(root, node.reuse_cost, {root: REUSE}, [root], [root])
        return Plan(root, base, {root: SCAN}, [], [])
    cost, _ = _best(dag, root, cached, memo)
    nodes: List[int] = []
    reused: List[int] = []
    choices: Dict[int, int] = {}
    seen = set()

    def visit(e):
        if e in seen:
            return
        seen.add(e)
        c = memo[e][1]
        choices[e] = c
        if c == LEAF:
            return
        if c == REUSE:
            nodes.append(e)
            reused.append(e)
            return
        for inp in dag.ops[c].inputs:
            visit(inp)
        nodes.append(e)

    visit(root)
    return Plan(root, cost, choices, nodes, reused)


def workload_cost(dag, items, cached, memo=None) -> float:
    """Weighted plan cost of a set of (root, weight) items under one shared
    memo.  Items are costed in the given order; keep it deterministic."""
    cached = resolve_set(dag, cached)
    if memo is None:
        memo = {}
    total = 0.0
    for root, weight in items:
        total += weight * _root_cost(dag, dag.find(root), cached, memo)
    return total


def benefit(dag, items, x, selected, x_is_free) -> float:
    """From-scratch benefit of adding x to the selected set, for the weighted
    workload items: savings minus what producing x itself costs.  A node on
    the current plan is free apart from its materialization write."""
    x = dag.find(x)
    s = resolve_set(dag, selected)
    memo_s: Dict[int, tuple] = {}
    base = workload_cost(dag, items, s, memo_s)
    with_x = workload_cost(dag, items, s | {x}, {})
    if x_is_free:
        term = dag.nodes[x].mat_cost
    else:
        term = _root_cost(dag, x, s, memo_s)
    return base - (with_x + term)


class BenefitSession:
    """Benefit evaluation bound to one DAG state and one weighted workload.

    Base plan costs are memoized per selected-set; each candidate evaluation
    recomputes only the candidate's ancestor cone on top of that base, which
    is float-identical to recomputing from scratch because nodes outside the
    cone cannot see the candidate.  Any DAG mutation invalidates the session.
    """

    def __init__(self, dag: QueryDag, items):
        self.dag = dag
        self.items = tuple((dag.find(r), float(w)) for r, w in items)
        self.epoch = dag.epoch
        self._bases: Dict[frozenset, tuple] = {}
        self._anc: Dict[int, frozenset] = {}
        self.visit_counts: Dict[int, int] = {}

    def _check(self):
        if self.dag.epoch != self.epoch:
            raise RuntimeError(
                "query DAG changed since this benefit session was created; "
                "build a new session")

    def _base(self, s_key):
        got = self._bases.get(s_key)
        if got is None:
            memo: Dict[int, tuple] = {}
            total = 0.0
            for r, w in self.items:
                total += w * _root_cost(self.dag, r, s_key, memo)
            got = (memo, total)
            self._bases[s_key] = got
        return got

    def ancestors(self, x) -> frozenset:
        """x plus every node from which x is reachable, via parent ops."""
        x = self.dag.find(x)
        got = self._anc.get(x)
        if got is None:
            seen = {x}
            stack = [x]
            nodes, ops = self.dag.nodes, self.dag.ops
            while stack:
                for oid in nodes[stack.pop()].parent_ops:
                    out = ops[oid].output
                    if out not in seen:
                        seen.add(out)
                        stack.append(out)
            got = frozenset(seen)
            self._anc[x] = got
        return got

    def base_cost(self, selected) -> float:
        self._check()
        return self._base(resolve_set(self.dag, selected))[1]

    def benefit(self, x, selected, x_is_free) -> float:
        return self.benefit_detail(x, selected, x_is_free)[0]

    def benefit_detail(self, x, selected, x_is_free, term_cost=None,
                       s_key=None):
        """(benefit, overlay, workload cost with x) — the overlay holds the
        recomputed (cost, choice) entries for x's ancestor cone and can seed
        the base memo of selected+{x} via advance().

        term_cost overrides the acquisition term when given: a node already
        sitting in the cache costs nothing to keep, so callers pass 0.0.
        s_key short-circuits re-resolving `selected` for callers that track
        the resolved set themselves."""
        self._check()
        dag = self.dag
        x = dag.find(x)
        if s_key is None:
            s_key = resolve_set(dag, selected)
        memo, base_total = self._base(s_key)
        anc = self.ancestors(x)
        sx = s_key | {x}
        overlay: Dict[int, tuple] = {}
        total = 0.0
        for r, w in self.items:
            total += w * self._overlay_root(r, sx, s_key, anc, memo, overlay)
        if term_cost is not None:
            term = term_cost
        elif x_is_free:
            term = dag.nodes[x].mat_cost
        else:
            term = _root_cost(dag, x, s_key, memo)
        return base_total - (total + term), overlay, total

    def advance(self, selected, x, overlay, with_total, s_key=None):
        """Register the base memo for selected+{x} from a benefit_detail
        evaluation of x at exactly that selected set.  Entries outside x's
        ancestor cone keep their values; stale cone entries are dropped and
        recomputed lazily."""
        self._check()
        dag = self.dag
        x = dag.find(x)
        if s_key is None:
            s_key = resolve_set(dag, selected)
        memo, _ = self._base(s_key)
        new_memo = dict(memo)
        for e in self.ancestors(x):
            new_memo.pop(e, None)
        new_memo.update(overlay)
        self._bases[s_key | {x}] = (new_memo, with_total)

    def advance_unchanged(self, selected, x):
        """Register the base memo for selected+{x} without an overlay, for
        picks known to change no workload plan cost (zero benefit at a zero
        acquisition term).  Values outside x's ancestor cone carry over;
        cone entries are dropped and recomputed lazily on demand."""
        self.advance_unchanged_many(selected, (x,))

    def advance_unchanged_many(self, selected, xs, s_key=None):
        """advance_unchanged for a run of picks, paying one memo copy total.
        Greedy callers defer their zero-benefit tail through this."""
        self._check()
        dag = self.dag
        xs = [dag.find(x) for x in xs]
        if s_key is None:
            s_key = resolve_set(dag, selected)
        memo, base_total = self._base(s_key)
        new_memo = dict(memo)
        for x in xs:
            for e in self.ancestors(x):
                new_memo.pop(e, None)
        self._bases[s_key | set(xs)] = (new_memo, base_total)

    def _overlay_root(self, e, sx, s_key, anc, memo, overlay):
        node = self.dag.nodes[e]
        if node.kind == "rel":
            base = scan_cost(node.est, self.dag.params)
            if e in sx and node.reuse_cost < base:
                return node.reuse_cost
            return base
        return self._overlay(e, sx, s_key, anc, memo, overlay)

    def _overlay(self, e, sx, s_key, anc, memo, overlay):
        if e not in anc:
            got = memo.get(e)
            if got is None:
                got = _best(self.dag, e, s_key, memo)
            return got[0]
        got = overlay.get(e)
        if got is not None:
            return got[0]
        self.visit_counts[e] = self.visit_counts.get(e, 0) + 1
        dag = self.dag
        node = dag.nodes[e]
        if node.kind == "rel":
            overlay[e] = (0.0, LEAF)
            return 0.0
        if e in sx:
            best = node.reuse_cost
            choice = REUSE
        else:
            best = math.inf
            choice = None
        for oid in node.child_ops:
            op = dag.ops[oid]
            cost = op.exec_cost
            feasible = True
            for inp in op.inputs:
                cost += self._overlay(inp, sx, s_key, anc, memo, overlay)
                if cost >= best:
                    feasible = False
                    break
            if feasible and cost < best:
                best = cost
                choice = oid
        if choice is None:
            raise ValueError(f"node {e} has no operations and is not cached")
        overlay[e] = (best, choice)
        return best


def root_recompute_cost(dag, root, cached, memo=None) -> Optional[float]:
    """Cheapest way to rebuild a stored top-level result from the current
    database and cache, ignoring its own stored instance.  None when nothing
    in the DAG can produce it any more."""
    root = dag.find(root)
    cached = resolve_set(dag, cached)
    if memo is None:
        memo = {}
    node = dag.nodes[root]
    if node.kind == "rel":
        return scan_cost(node.est, dag.params)
    best = math.inf
    for oid in node.child_ops:
        op = dag.ops[oid]
        cost = op.exec_cost
        for inp in op.inputs:
            cost += _best(dag, inp, cached, memo)[0]
            if cost >= best:
                break
        else:
            if cost < best:
                best = cost
    return None if math.isinf(best) else best


def render_plan(dag, plan: Plan) -> str:
    """Indented one-line-per-step view of a plan, inputs below consumers."""
    out: List[str] = []

    def describe(e):
        node = dag.nodes[e]
        if node.kind == "rel":
            return f"rel {node.rel_name}"
        return dag.render_sig(e)

    def visit(e, depth):
        pad = "  " * depth
        c = plan.choices.get(e)
        if c == REUSE:
            out.append(f"{pad}reuse #{e}: {describe(e)}")
            return
        if c == LEAF or c == SCAN:
            out.append(f"{pad}scan {dag.nodes[e].rel_name}")
            return
        op = dag.ops[c]
        out.append(f"{pad}{op.kind} #{e}: {describe(e)} "
                   f"[op {c}, exec {op.exec_cost:.3f}]")
        for inp in op.inputs:
            visit(inp, depth + 1)

    visit(plan.root, 0)
    return "\n".join(out)
