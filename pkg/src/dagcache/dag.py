"""Consolidated AND-OR DAG over logical query expressions.

Equivalence nodes stand for logical result sets; operation nodes stand for
concrete operators producing their output equivalence node from input
equivalence nodes.  The graph is bipartite and acyclic.  Queries from many
consumers are inserted into one shared DAG so that common subexpressions
collapse onto the same equivalence node.

Duplicate detection works through canonical structural signatures built
bottom-up from operator parameters and child signatures.  Join signatures are
flattened: nested joins contribute their constituents, and the constituent
list is sorted, so all associative and commutative variants of one join land
on a single equivalence node at insert time.  When two distinct nodes are
later proven equal (for example a literally inserted pushed-down form meeting
its unpushed twin), `unify` merges them and re-canonicalizes every operation
that touched the loser, cascading as needed.

Expansion generates, for every join equivalence node, the equivalence node of
every constituent subset and one join operation per ordered binary partition
(the fixpoint of join associativity plus commutativity, cross pairs
included), then pushes whole selection predicates below joins wherever the
predicate fits one input side.  Subsumption derivations add operations that
compute one node from another logically containing it: implied selections,
disjunction nodes over equality selections, and re-aggregation from finer
group-bys.

Estimates and per-operation execution costs are computed once at node and
operation creation time; they are pure functions of the catalog, so they
never change afterwards.
"""

from __future__ import annotations

import bisect
from collections import deque
from itertools import combinations

from .algebra import (
    Atom,
    GroupAgg,
    Join,
    Or,
    Scan,
    Select,
    conjunct_intervals,
    canonicalize,
    pred_attributes,
    pred_key,
    pred_str,
    schema_of,
    sum_name,
)
from .costmodel import (
    estimate_groupagg,
    estimate_join,
    estimate_scan,
    estimate_select,
    materialization_cost,
    operator_exec_cost,
    reuse_cost,
)

_FULL = (float("-inf"), float("inf"))


def _contained(p_iv, q_iv):
    """Every bound of q_iv contains the matching interval of p_iv.

    Equals full predicate implication for satisfiable pure conjunctions:
    conjunctions decompose per atom, and with nonempty intervals on the
    implying side the per-atom checks collapse to per-attribute containment.
    """
    for a, (qlo, qhi) in q_iv.items():
        plo, phi = p_iv.get(a, _FULL)
        if plo < qlo or phi > qhi:
            return False
    return True


class EqNode:
    """One equivalence node: a logical result set."""

    __slots__ = (
        "id", "sig", "kind", "schema", "est", "reuse_cost", "mat_cost",
        "child_ops", "parent_ops", "refcount", "pinned", "origin",
        "rel_name", "pred", "pred_attrs", "pred_profile", "input_id",
        "input_sig", "constituents", "conds", "groupby", "agg_attr",
        "expanded", "pushed",
    )

    def __init__(self, node_id, sig, kind):
        self.id = node_id
        self.sig = sig
        self.kind = kind  # 'rel' | 'sel' | 'join' | 'agg'
        self.schema = frozenset()
        self.est = None
        self.reuse_cost = 0.0
        self.mat_cost = 0.0
        self.child_ops = []   # op ids producing this node, kept sorted
        self.parent_ops = []  # op ids consuming this node
        self.refcount = 0
        self.pinned = False
        self.origin = "query"  # 'query' | 'push' | 'derived'
        self.rel_name = None
        self.pred = None
        self.pred_attrs = frozenset()
        self.pred_profile = None
        self.input_id = None
        self.input_sig = None
        self.constituents = ()
        self.conds = frozenset()
        self.groupby = ()
        self.agg_attr = None
        self.expanded = False
        self.pushed = False


class OpNode:
    """One operation node: a way of computing its output equivalence node."""

    __slots__ = ("id", "kind", "params_key", "pred", "conds", "groupby",
                 "agg_attr", "inputs", "output", "exec_cost")

    def __init__(self, op_id, kind, params_key, inputs, output, exec_cost):
        self.id = op_id
        self.kind = kind  # 'sel' | 'join' | 'agg'
        self.params_key = params_key
        self.pred = None
        self.conds = ()
        self.groupby = ()
        self.agg_attr = None
        self.inputs = inputs
        self.output = output
        self.exec_cost = exec_cost


def _norm_cond(a, b):
    return (a, b) if a <= b else (b, a)


class QueryDag:
    """Shared AND-OR DAG for a fixed catalog and cost parameter set."""

    def __init__(self, catalog, params):
        self.catalog = catalog
        self.params = params
        self.nodes: dict[int, EqNode] = {}
        self.ops: dict[int, OpNode] = {}
        self.sig_index: dict[tuple, int] = {}
        self.op_index: dict[tuple, int] = {}
        self.roots: dict[str, int] = {}
        self.merged: dict[int, int] = {}
        self.epoch = 0
        self._next_eq = 1
        self._next_op = 1
        self._pending_joins = deque()
        self._pending_selects = deque()
        self._sel_groups: dict[tuple, list[int]] = {}
        self._agg_groups: dict[tuple, list[int]] = {}
        self._implies_cache: dict[tuple, bool] = {}
        self._pred_profiles: dict = {}
        # groups re-scanned by the derivation passes; only membership events
        # (creation, shell revival, unification) can surface new pairs
        self._sel_dirty: set = set()
        self._agg_dirty: set = set()
        self._sel_rows: dict = {}
        self._released: set = set()
        # node ids already pair-scanned per selection group; dead ids linger
        # harmlessly (ids are never reused), re-created nodes get fresh ids
        self._sel_done: dict[tuple, set] = {}
        self._agg_done: dict[tuple, set] = {}
        self._rc_dirty = True

    # -- id forwarding across unification ---------------------------------

    def find(self, eq_id):
        """Resolve a possibly-unified node id to its surviving node."""
        while eq_id in self.merged:
            eq_id = self.merged[eq_id]
        return eq_id

    def node(self, eq_id) -> EqNode:
        return self.nodes[self.find(eq_id)]

    # -- signatures ---------------------------------------------------------

    def tree_signature(self, tree):
        """Canonical structural signature of a query tree, without mutating
        the DAG.  Equal up to join associativity/commutativity and predicate
        canonicalization."""
        if isinstance(tree, Scan):
            return ("rel", tree.relation)
        if isinstance(tree, Select):
            return ("sel", pred_key(canonicalize(tree.predicate)),
                    self.tree_signature(tree.child))
        if isinstance(tree, Join):
            lsig = self.tree_signature(tree.left)
            rsig = self.tree_signature(tree.right)
            conds = {_norm_cond(tree.left_attr, tree.right_attr)}
            parts = []
            for s in (lsig, rsig):
                if s[0] == "join":
                    conds.update(s[1])
                    parts.extend(s[2])
                else:
                    parts.append(s)
            return ("join", tuple(sorted(conds)), tuple(sorted(parts)))
        if isinstance(tree, GroupAgg):
            return ("agg", tree.groupby, tree.agg_attr,
                    self.tree_signature(tree.child))
        raise TypeError(f"not a query tree node: {tree!r}")

    # -- node/op construction ----------------------------------------------

    def _new_node(self, sig, kind) -> EqNode:
        node = EqNode(self._next_eq, sig, kind)
        self._next_eq += 1
        self.nodes[node.id] = node
        self.sig_index[sig] = node.id
        self.epoch += 1
        self._rc_dirty = True
        return node

    def _finish_node(self, node, est):
        node.est = est
        node.reuse_cost = reuse_cost(est, self.params)
        node.mat_cost = materialization_cost(est, self.params)

    def _ensure_rel(self, name):
        sig = ("rel", name)
        nid = self.sig_index.get(sig)
        if nid is not None:
            return nid
        rel = self.catalog.relation(name)
        node = self._new_node(sig, "rel")
        node.rel_name = name
        node.schema = frozenset(a.name for a in rel.attributes)
        self._finish_node(node, estimate_scan(rel, self.params))
        return node.id

    def _ensure_select(self, pred, input_id, origin):
        """Select node over input_id; also guarantees the direct operation."""
        input_id = self.find(input_id)
        child = self.nodes[input_id]
        pk = pred_key(pred)
        sig = ("sel", pk, child.sig)
        nid = self.sig_index.get(sig)
        if nid is None:
            node = self._new_node(sig, "sel")
            node.pred = pred
            node.pred_attrs = frozenset(pred_attributes(pred))
            node.pred_profile = self._pred_profile(pred, pk)
            node.input_id = input_id
            node.input_sig = child.sig
            node.schema = child.schema
            node.origin = origin
            self._finish_node(
                node, estimate_select(child.est, pred, self.catalog, self.params))
            self._sel_groups.setdefault(child.sig, []).append(node.id)
            self._sel_dirty.add(child.sig)
            self._pending_selects.append(node.id)
            nid = node.id
        else:
            node = self.nodes[nid]
            if node.input_id != input_id:
                node.input_id = input_id  # revived shell: refresh live link
                node.pushed = False
                self._sel_dirty.add(child.sig)
                self._pending_selects.append(nid)
        self._ensure_op("sel", pk, (input_id,), nid, pred=pred)
        return self.find(nid)

    def _ensure_agg(self, groupby, agg_attr, input_id):
        input_id = self.find(input_id)
        child = self.nodes[input_id]
        groupby = tuple(sorted(groupby))
        sig = ("agg", groupby, agg_attr, child.sig)
        nid = self.sig_index.get(sig)
        if nid is None:
            node = self._new_node(sig, "agg")
            node.groupby = groupby
            node.agg_attr = agg_attr
            node.input_id = input_id
            node.input_sig = child.sig
            node.schema = frozenset(groupby) | {sum_name(agg_attr)}
            self._finish_node(
                node, estimate_groupagg(child.est, groupby, self.catalog, self.params))
            self._agg_groups.setdefault((child.sig, sum_name(agg_attr)), []).append(node.id)
            self._agg_dirty.add((child.sig, sum_name(agg_attr)))
            nid = node.id
        else:
            node = self.nodes[nid]
            if node.input_id != input_id:
                node.input_id = input_id
                self._agg_dirty.add((child.sig, sum_name(agg_attr)))
        self._ensure_op("agg", (groupby, agg_attr), (input_id,), nid,
                        groupby=groupby, agg_attr=agg_attr)
        return self.find(nid)

    def _ensure_join_node(self, constituents, conds):
        """Join node over already-built constituent nodes (ids sorted)."""
        constituents = tuple(sorted(self.find(c) for c in constituents))
        sigs = tuple(sorted(self.nodes[c].sig for c in constituents))
        sig = ("join", tuple(sorted(conds)), sigs)
        nid = self.sig_index.get(sig)
        if nid is None:
            node = self._new_node(sig, "join")
            node.constituents = constituents
            node.conds = frozenset(conds)
            schema = set()
            for c in constituents:
                schema |= self.nodes[c].schema
            node.schema = frozenset(schema)
            ests = [self.nodes[c].est for c in constituents]
            self._finish_node(
                node, estimate_join(ests, sorted(conds), self.catalog, self.params))
            self._pending_joins.append(node.id)
            nid = node.id
        else:
            node = self.nodes[nid]
            if node.constituents != constituents:
                node.constituents = constituents  # revived shell
                node.expanded = False
                self._pending_joins.append(nid)
        return nid

    def _ensure_op(self, kind, params_key, inputs, output, pred=None,
                   conds=(), groupby=(), agg_attr=None):
        inputs = tuple(self.find(i) for i in inputs)
        output = self.find(output)
        key = (kind, params_key, inputs)
        oid = self.op_index.get(key)
        if oid is not None:
            op = self.ops[oid]
            if op.output != output:
                # the same operation cannot produce two different results:
                # its would-be outputs are one logical expression
                self.unify(op.output, output)
            return oid
        ests = [self.nodes[i].est for i in inputs]
        bases = [self.nodes[i].kind == "rel" for i in inputs]
        cost = operator_exec_cost(kind, ests, bases, self.params)
        op = OpNode(self._next_op, kind, params_key, inputs, output, cost)
        self._next_op += 1
        op.pred = pred
        op.conds = tuple(sorted(conds))
        op.groupby = tuple(groupby)
        op.agg_attr = agg_attr
        self.ops[op.id] = op
        self.op_index[key] = op.id
        self._insort(self.nodes[output].child_ops, op.id)
        for i in inputs:
            self._insort(self.nodes[i].parent_ops, op.id)
        self.epoch += 1
        self._rc_dirty = True
        return op.id

    @staticmethod
    def _insort(lst, value):
        if not lst or lst[-1] < value:
            lst.append(value)
            return
        i = bisect.bisect_left(lst, value)
        if i >= len(lst) or lst[i] != value:
            lst.insert(i, value)

    # -- query insertion -----------------------------------------------------

    def insert_query(self, tree, query_id) -> int:
        """Insert a query tree, reusing equivalence nodes by signature.
        Registers query_id as a root.  Returns the root equivalence id."""
        if query_id in self.roots:
            raise ValueError(f"query id {query_id!r} already registered")
        schema_of(tree, self.catalog)  # full validation before any mutation
        root = self._build(tree)
        self.roots[query_id] = root
        self._rc_dirty = True
        return root

    def register_root(self, query_id, eq_id) -> int:
        """Register an existing node as a root under query_id, protecting its
        whole derivation subtree from sweeps.  Cache policies use this to keep
        stored results recomputable after the originating query is removed."""
        if query_id in self.roots:
            raise ValueError(f"query id {query_id!r} already registered")
        nid = self.find(eq_id)
        if nid not in self.nodes:
            raise ValueError(f"unknown node id {eq_id}")
        self.roots[query_id] = nid
        self._rc_dirty = True
        return nid

    def _build(self, tree):
        if isinstance(tree, Scan):
            return self._ensure_rel(tree.relation)
        if isinstance(tree, Select):
            child = self._build(tree.child)
            return self._ensure_select(canonicalize(tree.predicate), child, "query")
        if isinstance(tree, GroupAgg):
            child = self._build(tree.child)
            return self._ensure_agg(tree.groupby, tree.agg_attr, child)
        # join: flatten nested join children into one constituent set
        left = self.find(self._build(tree.left))
        right = self.find(self._build(tree.right))
        cond = _norm_cond(tree.left_attr, tree.right_attr)
        constituents = []
        conds = {cond}
        for side in (left, right):
            n = self.nodes[side]
            if n.kind == "join":
                constituents.extend(n.constituents)
                conds.update(n.conds)
            else:
                constituents.append(side)
        nid = self._ensure_join_node(constituents, conds)
        crossing = self._crossing_conds(self.nodes[nid].conds, left, right)
        self._ensure_op("join", tuple(sorted(crossing)), (left, right), nid,
                        conds=crossing)
        return self.find(nid)

    # -- condition bookkeeping ----------------------------------------------

    def _cond_internal(self, cond, member_ids):
        a, b = cond
        has_a = [m for m in member_ids if a in self.nodes[m].schema]
        if a == b:
            return len(has_a) >= 2
        for i in has_a:
            for j in member_ids:
                if j != i and b in self.nodes[j].schema:
                    return True
        return False

    def _crossing_conds(self, conds, left_id, right_id):
        ls = self.nodes[left_id].schema
        rs = self.nodes[right_id].schema
        out = []
        for a, b in sorted(conds):
            if (a in ls and b in rs) or (a in rs and b in ls):
                out.append((a, b))
        return out

    # -- expansion ------------------------------------------------------------

    def expand(self):
        """Close the DAG under join reassociation/commutation and selection
        pushdown.  Idempotent; incremental over nodes added since the last
        call."""
        while self._pending_joins:
            nid = self._pending_joins.popleft()
            node = self.nodes.get(self.find(nid))
            if node is None or node.kind != "join" or node.expanded:
                continue
            self._expand_join(node)
        while self._pending_selects:
            nid = self._pending_selects.popleft()
            node = self.nodes.get(self.find(nid))
            if node is None or node.kind != "sel" or node.pushed:
                continue
            self._push_down(node)
        self._rc_dirty = True

    def _expand_join(self, top):
        members = top.constituents
        k = len(members)
        top.expanded = True
        if k < 2:
            return
        conds = top.conds
        full = (1 << k) - 1
        node_for = {}
        for i in range(k):
            node_for[1 << i] = members[i]
        # subset nodes in mask order, then every ordered binary partition
        for mask in range(3, full + 1):
            if mask & (mask - 1) == 0:
                continue
            ids = tuple(members[i] for i in range(k) if mask >> i & 1)
            sub_conds = [c for c in sorted(conds) if self._cond_internal(c, ids)]
            nid = self._ensure_join_node(ids, sub_conds)
            self.nodes[nid].expanded = True
            node_for[mask] = nid
            sub = (mask - 1) & mask
            while sub:
                comp = mask ^ sub
                l, r = node_for[sub], node_for[comp]
                crossing = self._crossing_conds(self.nodes[nid].conds, l, r)
                self._ensure_op("join", tuple(sorted(crossing)), (l, r), nid,
                                conds=crossing)
                sub = (sub - 1) & mask

    def _push_down(self, sel):
        """Offer plans that apply sel's predicate below each join operation
        of its input whenever the predicate fits entirely on one side."""
        sel.pushed = True
        if sel.origin == "derived":
            return  # subsumption-built nodes are reuse targets, not plans
        target = self.nodes.get(self.find(sel.input_id))
        if target is None or target.kind != "join":
            return
        pa = sel.pred_attrs
        out_id = sel.id
        for op_id in list(target.child_ops):
            op = self.ops.get(op_id)
            if op is None or op.kind != "join":
                continue
            e1, e2 = op.inputs
            if pa <= self.nodes[e1].schema:
                inner = self._ensure_select(sel.pred, e1, "push")
                self._ensure_op("join", op.params_key, (inner, e2),
                                out_id, conds=op.conds)
            if pa <= self.nodes[e2].schema:
                inner = self._ensure_select(sel.pred, e2, "push")
                self._ensure_op("join", op.params_key, (e1, inner),
                                out_id, conds=op.conds)

    # -- subsumption derivations ----------------------------------------------

    def _implies(self, p1, k1, p2, k2):
        key = (k1, k2)
        hit = self._implies_cache.get(key)
        if hit is None:
            from .algebra import predicate_implies
            hit = predicate_implies(p1, p2)
            self._implies_cache[key] = hit
        return hit

    def _pred_profile(self, pred, key):
        """(mentioned attrs, duplicate-attr flag, required attrs, intern id,
        interval map, unsat flag) for `pred`.

        `required` is the attribute set a predicate pins in every branch:
        the union over conjuncts, None when a disjunction appears anywhere
        (a disjunct may leave any attribute open).  A satisfiable
        duplicate-free predicate cannot imply one whose required attrs it
        never mentions, so pairs failing that test skip the full check.
        The intern id stands in for the deeply nested predicate key in
        implication-cache lookups.

        The interval map is per-attribute bounds when the predicate is a
        pure conjunction of atoms (else None).  For two such predicates the
        full implication test reduces to interval containment: the implying
        side is either unsatisfiable or lies within every bound of the
        implied side.
        """
        prof = self._pred_profiles.get(key)
        if prof is not None:
            return prof
        mentioned = []

        def walk(p):
            if isinstance(p, Atom):
                mentioned.append(p.attribute)
                return {p.attribute}
            req = None
            for c in p.children:
                r = walk(c)
                if not isinstance(p, Or) and r is not None:
                    req = r if req is None else req | r
            # a disjunction may be a tautology over its attribute, so it
            # requires nothing for implication purposes
            return None if isinstance(p, Or) else req

        req = walk(pred)
        attrs = frozenset(mentioned)
        ivals = conjunct_intervals(pred)
        unsat = ivals is not None and any(lo > hi for lo, hi in ivals.values())
        prof = (attrs, len(mentioned) > len(attrs), req,
                len(self._pred_profiles), ivals, unsat)
        self._pred_profiles[key] = prof
        return prof

    def add_subsumption_derivations(self):
        """Add derivation operations between logically contained nodes:

        (a) selection pairs over one input where one predicate implies the
            other get a filtering operation from the weaker node;
        (b) equality selections on one attribute of a common input spawn a
            disjunction node covering all of them;
        (c) group-by pairs over one input are closed under group-by union,
            with re-aggregation operations from finer to coarser.

        Idempotent.  Mutually implied selection pairs are unified.
        """
        self._disjunction_nodes()
        self._selection_derivations()
        self._groupby_closure()
        self._rc_dirty = True

    def _disjunction_nodes(self):
        # dirty set read but not consumed; the selection pass clears it
        for input_sig in sorted(self._sel_dirty):
            if input_sig not in self._sel_groups:
                continue
            input_id = self.sig_index.get(input_sig)
            if input_id is None:
                continue  # input swept; nothing to build from
            members = self._live_group(self._sel_groups, input_sig)
            by_attr = {}
            for nid in members:
                node = self.nodes[nid]
                p = node.pred
                if (node.origin == "query" and isinstance(p, Atom)
                        and p.comparator == "="):
                    by_attr.setdefault(p.attribute, {})[p.constant] = p
            for attr in sorted(by_attr):
                atoms = by_attr[attr]
                if len(atoms) < 2:
                    continue
                or_pred = canonicalize(Or(tuple(atoms[c] for c in sorted(atoms))))
                sig = ("sel", pred_key(or_pred), input_sig)
                if sig in self.sig_index:
                    continue
                self._ensure_select(or_pred, input_id, "derived")

    # below this group size the candidate index costs more than it saves
    _BUCKET_MIN = 64

    def _selection_derivations(self):
        # each unordered pair is scanned once, when its younger member first
        # appears; ops between surviving pairs are never swept, so the pass
        # stays equivalent to a full rescan while doing amortized O(new) work
        scan = sorted(self._sel_dirty)
        self._sel_dirty.clear()
        for input_sig in scan:
            if input_sig not in self._sel_groups:
                continue
            done = self._sel_done.setdefault(input_sig, set())
            state = self._sel_rows.get(input_sig)
            if state is None:
                # rows by id / rows by attr set / attr -> attr sets using it /
                # rows needing a full scan
                state = self._sel_rows[input_sig] = ({}, {}, {}, [])
            rows_d, buckets, postings, mixed = state
            while True:
                members = self._live_group(self._sel_groups, input_sig)
                new = [m for m in members if m not in done]
                if not new:
                    break
                # (id, sig pred_key, pred, *profile, index) rows, kept across
                # scans so the pair loop touches no node objects on the common
                # unrelated-pair path; dead ids are simply never selected
                index = len(members) >= self._BUCKET_MIN
                if index:
                    # rows processed this iteration leave `pos` so probes
                    # order them last, as a plain append-and-rescan would
                    pos = {m: i for i, m in enumerate(members)}
                else:
                    seen_rows = [rows_d[m] for m in members if m in rows_d]
                restart = False
                appended = []
                for n1 in new:
                    node1 = self.nodes[n1]
                    k1 = node1.sig[1]  # ("sel", pred_key, input_sig)
                    attrs1, dup1, req1, pk1, iv1, un1 = node1.pred_profile
                    pure1 = iv1 is not None
                    if index:
                        bounded = pure1 and not un1 and len(attrs1) <= 6
                        seen_rows = self._candidate_rows(
                            state, pos, attrs1, bounded) + appended
                    for row in seen_rows:
                        iv2 = row[7]
                        if pure1 and iv2 is not None:
                            attrs2 = row[3]
                            fwd = un1 or (attrs2 <= attrs1
                                          and _contained(iv1, iv2))
                            bwd = row[8] or (attrs1 <= attrs2
                                             and _contained(iv2, iv1))
                            if not (fwd or bwd):
                                continue
                            n2, k2, pred2 = row[0], row[1], row[2]
                        else:
                            n2, k2, pred2, attrs2, dup2, req2, pk2, iv2, un2 = row
                            fwd = ((dup1 or req2 is None or req2 <= attrs1)
                                   and self._implies(node1.pred, pk1, pred2, pk2))
                            bwd = ((dup2 or req1 is None or req1 <= attrs2)
                                   and self._implies(pred2, pk2, node1.pred, pk1))
                        if fwd and bwd:
                            self.unify(n1, n2)  # mutually implied: one result
                            restart = True
                            break
                        if fwd:
                            self._ensure_op("sel", k1, (n2,), n1, pred=node1.pred)
                        if bwd:
                            self._ensure_op("sel", k2, (n1,), n2, pred=pred2)
                    if restart:
                        break
                    row = (n1, k1, node1.pred) + node1.pred_profile
                    rows_d[n1] = row
                    if pure1 and not un1:
                        bucket = buckets.get(attrs1)
                        if bucket is None:
                            bucket = buckets[attrs1] = []
                            for a in attrs1:
                                postings.setdefault(a, set()).add(attrs1)
                        bucket.append(row)
                    else:
                        # unsatisfiable or disjunctive: relates regardless of
                        # attribute coverage, so every probe must see it
                        mixed.append(row)
                    if index:
                        appended.append(row)
                        pos.pop(n1, None)
                    else:
                        seen_rows.append(row)
                    done.add(n1)
                if not restart:
                    break

    @staticmethod
    def _candidate_rows(state, pos, attrs, bounded):
        """Live seen rows that could relate to a predicate over `attrs`,
        ordered as a plain member scan would visit them.

        For a satisfiable pure conjunction only rows whose attribute set
        contains or is contained by `attrs` can participate, which the
        bucket index serves without touching the rest."""
        rows_d, buckets, postings, mixed, _ = state
        if not bounded:
            return [rows_d[m] for m in pos if m in rows_d]
        keys = set()
        n = len(attrs)
        for r in range(n + 1):
            for sub in combinations(attrs, r):
                key = frozenset(sub)
                if key in buckets:
                    keys.add(key)
        supersets = None
        for a in attrs:
            posting = postings.get(a)
            if not posting:
                supersets = None
                break
            supersets = posting if supersets is None else supersets & posting
        if supersets:
            keys.update(supersets)
        cands = []
        for key in keys:
            for row in buckets[key]:
                if row[0] in pos:
                    cands.append(row)
        for row in mixed:
            if row[0] in pos:
                cands.append(row)
        cands.sort(key=lambda r: pos[r[0]])
        return cands

    def _groupby_closure(self):
        scan = sorted(self._agg_dirty)
        self._agg_dirty.clear()
        for group_key in scan:
            if group_key not in self._agg_groups:
                continue
            input_sig, agg_name = group_key
            done = self._agg_done.setdefault(group_key, set())
            while True:
                members = self._live_group(self._agg_groups, group_key)
                if all(m in done for m in members):
                    break
                added = False
                infos = [(m, frozenset(self.nodes[m].groupby)) for m in members]
                for i, (n1, g1) in enumerate(infos):
                    for n2, g2 in infos[i + 1:]:
                        # surviving pairs keep their derivation ops, so only
                        # pairs with a fresh member need any work
                        if n1 in done and n2 in done:
                            continue
                        union = g1 | g2
                        if union == g1:
                            self._reagg_op(n1, n2)
                        elif union == g2:
                            self._reagg_op(n2, n1)
                        else:
                            input_id = self.sig_index.get(input_sig)
                            if input_id is None:
                                continue
                            attr = self.nodes[n1].agg_attr
                            sig = ("agg", tuple(sorted(union)), attr, input_sig)
                            if sig not in self.sig_index:
                                nid = self._ensure_agg(union, attr, input_id)
                                self.nodes[nid].origin = "derived"
                                added = True
                done.update(m for m, _ in infos)
                if not added:
                    break

    def _reagg_op(self, src, dst):
        """dst's group-by is a subset of src's: re-aggregate src's partial sums."""
        dst_node = self.nodes[dst]
        attr = sum_name(dst_node.agg_attr)
        self._ensure_op("agg", (dst_node.groupby, attr), (src,), dst,
                        groupby=dst_node.groupby, agg_attr=attr)

    def _live_group(self, groups, key):
        lst = groups.get(key, [])
        live = sorted({self.find(n) for n in lst if self.find(n) in self.nodes})
        groups[key] = live
        return live

    # -- unification ------------------------------------------------------------

    def unify(self, e1, e2) -> int:
        """Merge two equivalence nodes proven to denote the same result set.
        The lower id survives.  Operations touching the loser are rewritten;
        key collisions cascade into further unifications."""
        queue = deque([(e1, e2)])
        survivor = None
        while queue:
            a, b = queue.popleft()
            a, b = self.find(a), self.find(b)
            if a == b:
                if survivor is None:
                    survivor = a
                continue
            keep_id, drop_id = (a, b) if a < b else (b, a)
            if survivor is None:
                survivor = keep_id
            keep, drop = self.nodes[keep_id], self.nodes[drop_id]
            self.merged[drop_id] = keep_id
            for n in (keep, drop):
                if n.kind == "sel":
                    self._sel_dirty.add(n.input_sig)
                elif n.kind == "agg":
                    self._agg_dirty.add((n.input_sig, sum_name(n.agg_attr)))
            # producers of the dropped node now produce the survivor
            for oid in drop.child_ops:
                op = self.ops[oid]
                op.output = keep_id
                self._insort(keep.child_ops, oid)
            # consumers of the dropped node are re-keyed; collisions merge
            for oid in list(drop.parent_ops):
                op = self.ops.get(oid)
                if op is None:
                    continue
                old_key = (op.kind, op.params_key, op.inputs)
                if self.op_index.get(old_key) == oid:
                    del self.op_index[old_key]
                op.inputs = tuple(keep_id if i == drop_id else i for i in op.inputs)
                new_key = (op.kind, op.params_key, op.inputs)
                other = self.op_index.get(new_key)
                if other is None:
                    self.op_index[new_key] = oid
                    self._insort(keep.parent_ops, oid)
                else:
                    # duplicate operation: keep the older one
                    dup = self.ops[other]
                    if dup.output != op.output:
                        queue.append((dup.output, op.output))
                    self._drop_op(oid)
            del self.sig_index[drop.sig]
            keep.pinned = keep.pinned or drop.pinned
            for qid, rid in self.roots.items():
                if rid == drop_id:
                    self.roots[qid] = keep_id
            del self.nodes[drop_id]
            self.epoch += 1
        self._rc_dirty = True
        return self.find(survivor)

    def _drop_op(self, oid):
        op = self.ops.pop(oid, None)
        if op is None:
            return
        key = (op.kind, op.params_key, op.inputs)
        if self.op_index.get(key) == oid:
            del self.op_index[key]
        out = self.nodes.get(op.output)
        if out and oid in out.child_ops:
            out.child_ops.remove(oid)
        for i in op.inputs:
            n = self.nodes.get(i)
            if n and oid in n.parent_ops:
                n.parent_ops.remove(oid)
        self.epoch += 1

    # -- reference counting, removal -----------------------------------------

    def _reachable_from(self, root_id):
        return self._reachable_from_many((root_id,))

    def _reachable_from_many(self, root_ids):
        seen = set()
        stack = list(root_ids)
        nodes = self.nodes
        ops = self.ops
        while stack:
            nid = stack.pop()
            if nid in seen:
                continue
            seen.add(nid)
            for oid in nodes[nid].child_ops:
                for i in ops[oid].inputs:
                    if i not in seen:
                        stack.append(i)
        return seen

    def refresh_refcounts(self):
        if not self._rc_dirty:
            return
        for node in self.nodes.values():
            node.refcount = 0
        for root in set(self.roots.values()):
            weight = sum(1 for r in self.roots.values() if r == root)
            for nid in self._reachable_from(root):
                self.nodes[nid].refcount += weight
        self._rc_dirty = False

    def remove_query(self, query_id, sweep=True):
        """Unregister a root and sweep every node no longer reachable from a
        registered root, keeping pinned (cached) nodes as reusable shells.
        Batch removals pass sweep=False and call sweep() once afterwards."""
        if query_id not in self.roots:
            raise ValueError(f"unknown query id {query_id!r}")
        self._released.add(self.roots.pop(query_id))
        if sweep:
            self.sweep()
        else:
            self._rc_dirty = True

    def sweep(self):
        """Drop nodes orphaned by root removals since the last sweep.

        Every surviving node is root-reachable (cached nodes carry keeper
        roots), so only the released roots' downward cones can contain
        casualties; liveness re-enters a cone at remaining-root members and
        at inputs of operations whose output lies outside it.
        """
        resolved = {self.find(r) for r in self._released}
        removed = {r for r in resolved
                   if r in self.nodes and r not in set(self.roots.values())}
        self._released.clear()
        nodes = self.nodes
        ops = self.ops
        cone = set()
        stack = list(removed)
        while stack:
            nid = stack.pop()
            if nid in cone:
                continue
            cone.add(nid)
            for oid in nodes[nid].child_ops:
                for i in ops[oid].inputs:
                    if i not in cone:
                        stack.append(i)
        rooted = set(self.roots.values())
        seed = []
        for nid in cone:
            if nid in rooted:
                seed.append(nid)
                continue
            for oid in nodes[nid].parent_ops:
                op = ops.get(oid)
                if op is not None and op.output not in cone:
                    seed.append(nid)
                    break
        live = set(seed)
        stack = seed
        while stack:
            nid = stack.pop()
            for oid in nodes[nid].child_ops:
                for i in ops[oid].inputs:
                    if i in cone and i not in live:
                        live.add(i)
                        stack.append(i)
        dead_nodes = [nid for nid in cone
                      if nid not in live and not nodes[nid].pinned]
        # an operation survives only with a live output and all-live inputs,
        # i.e. dies exactly when it touches a dead node
        dead_ops = set()
        for nid in dead_nodes:
            node = nodes[nid]
            dead_ops.update(node.child_ops)
            dead_ops.update(node.parent_ops)
        for oid in sorted(dead_ops):
            self._drop_op(oid)
        for nid in dead_nodes:
            node = nodes.pop(nid)
            del self.sig_index[node.sig]
            # a shrunken selection group may need a smaller disjunction rebuilt
            if node.kind == "sel":
                self._sel_dirty.add(node.input_sig)
            elif node.kind == "agg":
                self._agg_dirty.add((node.input_sig, sum_name(node.agg_attr)))
        self._rc_dirty = True
        self.epoch += 1

    def pin(self, eq_id):
        self.nodes[self.find(eq_id)].pinned = True

    def unpin(self, eq_id):
        nid = self.find(eq_id)
        node = self.nodes.get(nid)
        if node is not None:
            node.pinned = False

    # -- analysis ---------------------------------------------------------------

    def sharable_nodes(self):
        """Nodes reachable from at least two roots, plus nodes that can occur
        twice within a single plan of one root."""
        self.refresh_refcounts()
        out = {nid for nid, n in self.nodes.items() if n.refcount >= 2}
        distinct_roots = set(self.roots.values())
        for root in distinct_roots:
            reach = self._reachable_from(root)
            for x in reach:
                if x in out:
                    continue
                if self._max_occurrences(root, x) >= 2:
                    out.add(x)
        return out

    def _max_occurrences(self, root, x):
        memo = {}

        def count(v):
            if v == x:
                return 1
            hit = memo.get(v)
            if hit is not None:
                return hit
            best = 0
            for oid in self.nodes[v].child_ops:
                total = 0
                for i in self.ops[oid].inputs:
                    total += count(i)
                    if total >= 2:
                        break
                best = max(best, min(2, total))
                if best >= 2:
                    break
            memo[v] = best
            return best

        return count(root)

    # -- debug export -------------------------------------------------------------

    def render_sig(self, sig):
        kind = sig[0]
        if kind == "rel":
            return sig[1]
        if kind == "sel":
            return f"sel[{self._render_pred_key(sig[1])}]({self.render_sig(sig[2])})"
        if kind == "join":
            conds = ",".join(f"{a}~{b}" for a, b in sig[1])
            parts = ",".join(self.render_sig(s) for s in sig[2])
            return f"join[{conds}]{{{parts}}}"
        gby = ",".join(sig[1]) or "-"
        return f"agg[{gby};sum({sig[2]})]({self.render_sig(sig[3])})"

    def _render_pred_key(self, pk):
        kind = pk[0]
        if kind == "atom":
            return f"{pk[1]}{pk[2]}{pk[3]}"
        sep = "&" if kind == "and" else "|"
        return "(" + sep.join(self._render_pred_key(c) for c in pk[1]) + ")"

    def to_dot(self):
        lines = ["digraph qdag {", "  rankdir=BT;"]
        self.refresh_refcounts()
        for nid in sorted(self.nodes):
            n = self.nodes[nid]
            label = self.render_sig(n.sig).replace('"', "'")
            extra = " pinned" if n.pinned else ""
            lines.append(
                f'  e{nid} [shape=ellipse label="e{nid} rc={n.refcount}{extra}\\n{label}"];')
        for oid in sorted(self.ops):
            op = self.ops[oid]
            if op.kind == "sel":
                label = f"sel {pred_str(op.pred)}"
            elif op.kind == "join":
                label = "join " + ",".join(f"{a}~{b}" for a, b in op.conds)
            else:
                label = "agg " + (",".join(op.groupby) or "-")
            lines.append(f'  o{oid} [shape=box label="o{oid} {label}"];')
            for i in op.inputs:
                lines.append(f"  e{i} -> o{oid};")
            lines.append(f"  o{oid} -> e{op.output};")
        lines.append("}")
        return "\n".join(lines) + "\n"

    # -- structural invariants (used heavily by the test suite) -----------------

    def check_invariants(self):
        for sig, nid in self.sig_index.items():
            assert nid in self.nodes, f"signature maps to dead node {nid}"
            assert self.nodes[nid].sig == sig
        sigs = [n.sig for n in self.nodes.values()]
        assert len(sigs) == len(set(sigs)), "duplicate signatures"
        for oid, op in self.ops.items():
            assert op.output in self.nodes
            assert all(i in self.nodes for i in op.inputs)
            assert oid in self.nodes[op.output].child_ops
            for i in op.inputs:
                assert oid in self.nodes[i].parent_ops
            key = (op.kind, op.params_key, op.inputs)
            assert self.op_index.get(key) == oid
        for nid, node in self.nodes.items():
            for oid in node.child_ops:
                assert self.ops[oid].output == nid
            for oid in node.parent_ops:
                assert nid in self.ops[oid].inputs
        # acyclicity via iterative DFS over equivalence nodes
        WHITE, GREY, BLACK = 0, 1, 2
        color = {nid: WHITE for nid in self.nodes}
        for start in self.nodes:
            if color[start] != WHITE:
                continue
            stack = [(start, iter(self._succ(start)))]
            color[start] = GREY
            while stack:
                nid, it = stack[-1]
                advanced = False
                for nxt in it:
                    if color[nxt] == GREY:
                        raise AssertionError(f"cycle through node {nxt}")
                    if color[nxt] == WHITE:
                        color[nxt] = GREY
                        stack.append((nxt, iter(self._succ(nxt))))
                        advanced = True
                        break
                if not advanced:
                    color[nid] = BLACK
                    stack.pop()
        # reference counts against a recomputed oracle
        self._rc_dirty = True
        self.refresh_refcounts()

    def _succ(self, nid):
        out = []
        for oid in self.nodes[nid].child_ops:
            out.extend(self.ops[oid].inputs)
        return out
