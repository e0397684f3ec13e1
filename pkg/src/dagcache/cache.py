"""Cache management: recent-query window, greedy selection, admission.

The manager keeps a sliding window of recent queries as a stand-in for the
future workload, greedily selects which result nodes deserve cache space by
benefit per block, and reconciles the selection with the cache through
mark/unmark admission over an LCS/LRU unmarked pool.

Every cached node stays pinned in the DAG, and its derivation subtree is kept
alive through a keeper root, so recompute costs and subsumption paths remain
available long after the originating query left the window.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from typing import Dict, Iterable, List, Optional, Tuple

from .dag import QueryDag
from .optimizer import (BenefitSession, optimize, resolve_set,
                        root_recompute_cost)

_EPS = 1e-9


class RepresentativeSet:
    """Window of the most recent query instances with geometric decay.

    weight(root) sums decay^age over the window occurrences mapping to that
    root, age 0 being the newest instance.
    """

    def __init__(self, window: int = 10, decay: float = 0.9):
        if window < 1:
            raise ValueError("window must be at least 1")
        if not 0.0 < decay <= 1.0:
            raise ValueError("decay must be in (0, 1]")
        self.window = window
        self.decay = decay
        self._entries = deque()  # (query_id, root id), newest on the right

    def __len__(self):
        return len(self._entries)

    def record(self, query_id, root) -> List[str]:
        """Append the newest instance; return query ids pushed out."""
        self._entries.append((query_id, root))
        evicted = []
        while len(self._entries) > self.window:
            evicted.append(self._entries.popleft()[0])
        return evicted

    def items(self, dag: QueryDag) -> List[Tuple[int, float]]:
        """Weighted (root, weight) pairs, aggregated over resolved ids and
        ordered by id so downstream float sums are reproducible."""
        weights: Dict[int, float] = {}
        for age, (_, root) in enumerate(reversed(self._entries)):
            rid = dag.find(root)
            weights[rid] = weights.get(rid, 0.0) + self.decay ** age
        return sorted(weights.items())

    def query_ids(self):
        return [qid for qid, _ in self._entries]


class CacheEntry:
    __slots__ = ("node", "size", "marked", "last_use", "access_count",
                 "stored_cost", "rebuild_cost", "ring", "admitted", "keeper")

    def __init__(self, node, size, now, keeper, marked=False, stored_cost=None,
                 rebuild_cost=None):
        self.node = node
        self.size = size
        self.marked = marked
        self.last_use = now
        self.access_count = 1  # the computing query is the first access
        self.stored_cost = stored_cost
        self.rebuild_cost = rebuild_cost  # from-scratch cost, cache ignored
        self.ring = deque([now], maxlen=10)
        self.admitted = now
        self.keeper = keeper


class CacheState:
    """Materialized nodes with bookkeeping shared by every policy."""

    def __init__(self, dag: QueryDag, capacity_blocks):
        self.dag = dag
        self.capacity = float(capacity_blocks)
        self.entries: Dict[int, CacheEntry] = {}
        self.used = 0.0
        self._keeper_seq = 0

    def ids(self) -> frozenset:
        return frozenset(self.entries)

    def has(self, node_id) -> bool:
        return node_id in self.entries

    def free(self) -> float:
        return self.capacity - self.used

    def fits(self, size) -> bool:
        return self.used + size <= self.capacity + _EPS

    def admit(self, node_id, now, marked=False, stored_cost=None,
              rebuild_cost=None) -> CacheEntry:
        node_id = self.dag.find(node_id)
        if node_id in self.entries:
            raise ValueError(f"node {node_id} already cached")
        size = self.dag.nodes[node_id].est.blocks
        if not self.fits(size):
            raise ValueError(f"admission of {size} blocks exceeds capacity")
        keeper = f"__cache_{self._keeper_seq}__"
        self._keeper_seq += 1
        self.dag.register_root(keeper, node_id)
        self.dag.pin(node_id)
        entry = CacheEntry(node_id, size, now, keeper, marked, stored_cost,
                           rebuild_cost)
        self.entries[node_id] = entry
        self.used += size
        return entry

    def evict(self, node_id, sweep=True):
        entry = self.entries.pop(node_id)
        self.used -= entry.size
        self.dag.unpin(node_id)
        self.dag.remove_query(entry.keeper, sweep=sweep)

    def evict_many(self, node_ids):
        for nid in node_ids:
            self.evict(nid, sweep=False)
        if node_ids:
            self.dag.sweep()

    def touch(self, node_id, now):
        entry = self.entries[node_id]
        entry.last_use = now
        entry.access_count += 1
        entry.ring.append(now)

    def remap(self):
        """Re-key entries after DAG mutations; unification may have merged a
        cached node into a surviving one."""
        stale = [nid for nid in self.entries if self.dag.find(nid) != nid]
        for nid in stale:
            entry = self.entries.pop(nid)
            new_id = self.dag.find(nid)
            other = self.entries.get(new_id)
            if other is None:
                entry.node = new_id
                entry.size = self.dag.nodes[new_id].est.blocks
                self.entries[new_id] = entry
            else:
                # two stored results turned out to be the same result set
                keep, drop = (other, entry) if other.admitted <= entry.admitted \
                    else (entry, other)
                keep.node = new_id
                keep.size = self.dag.nodes[new_id].est.blocks
                keep.marked = keep.marked or drop.marked
                keep.last_use = max(keep.last_use, drop.last_use)
                keep.access_count += drop.access_count
                stamps = sorted(set(keep.ring) | set(drop.ring))
                keep.ring = deque(stamps[-10:], maxlen=10)
                if drop.stored_cost is not None:
                    keep.stored_cost = drop.stored_cost if keep.stored_cost is None \
                        else min(keep.stored_cost, drop.stored_cost)
                self.entries[new_id] = keep
                self.dag.remove_query(drop.keeper, sweep=False)
            self.dag.pin(new_id)
        if stale:
            self.used = math.fsum(e.size for e in self.entries.values())

    def assert_capacity(self):
        total = math.fsum(e.size for e in self.entries.values())
        self.used = total
        if total > self.capacity + max(_EPS, self.capacity * 1e-12):
            raise AssertionError(
                f"cache over capacity: {total} > {self.capacity} blocks")


def lcs_lru_victims(state: CacheState, needed, incoming=None):
    """Unmarked victims freeing `needed` blocks: largest first, oldest use
    breaking size ties.  With incoming=(size, stamp) only entries worse than
    the newcomer under the same order qualify (strictly larger, or equal size
    and less recently used).  None when the pool cannot free enough."""
    if needed <= _EPS:
        return []
    pool = [e for e in state.entries.values() if not e.marked]
    if incoming is not None:
        size, stamp = incoming
        pool = [e for e in pool
                if e.size > size or (e.size == size and e.last_use < stamp)]
    pool.sort(key=lambda e: (-e.size, e.last_use, e.node))
    victims, freed = [], 0.0
    for e in pool:
        victims.append(e.node)
        freed += e.size
        if freed >= needed - _EPS:
            return victims
    return None


class Pick:
    __slots__ = ("node", "benefit", "density", "size")

    def __init__(self, node, benefit, density, size):
        self.node = node
        self.benefit = benefit
        self.density = density
        self.size = size

    def __repr__(self):
        return (f"Pick(node={self.node}, benefit={self.benefit:.3f}, "
                f"density={self.density:.6f}, size={self.size:.1f})")


def greedy_select(dag: QueryDag, session: BenefitSession, candidates,
                  cache_size, free_set, pruning=True, cached=(),
                  retention=None) -> List[Pick]:
    """Iteratively pick the feasible candidate with the highest benefit per
    block until the best pick's raw benefit turns negative or nothing fits.

    Acquisition terms: candidates in `cached` charge nothing (the result is
    already stored), free_set nodes charge only their materialization write,
    everything else charges full recompute cost.  Ties in benefit density
    are broken by `retention` score descending (callers pass from-scratch
    recompute cost per block, so when the window offers no signal the picks
    that are costliest to reproduce keep their slots), then by smaller size,
    then by lower node id.  With pruning enabled, stale densities sit in a
    max-heap and only the top is re-evaluated (selection is identical to
    the exhaustive loop whenever benefits never increase as the selection
    grows); candidates too large for the remaining space are dropped for
    good, which is exact since selections only grow.
    """
    free = resolve_set(dag, free_set)
    held = resolve_set(dag, cached)
    retention = retention or {}
    sizes = {}
    for c in candidates:
        rid = dag.find(c)
        node = dag.nodes[rid]
        if node.kind == "rel":
            continue  # base relations are never cached
        sizes[rid] = node.est.blocks
    cands = sorted(sizes)

    picks: List[Pick] = []
    selected: List[int] = []
    used = 0.0
    dropped = set()
    taken = set()

    synced = 0
    cur_key = frozenset()
    synced_key = cur_key

    def evaluate(y):
        # fold any deferred zero-cost picks into the session base first
        nonlocal synced, synced_key
        if synced < len(selected):
            session.advance_unchanged_many(selected[:synced], selected[synced:],
                                           s_key=synced_key)
            synced, synced_key = len(selected), cur_key
        if y in held:
            b, overlay, total = session.benefit_detail(y, selected, False,
                                                       term_cost=0.0,
                                                       s_key=cur_key)
        else:
            b, overlay, total = session.benefit_detail(y, selected, y in free,
                                                       s_key=cur_key)
        return b, b / sizes[y], overlay, total

    def rank(d, y):
        # max-heap orderings negate; higher density, then higher retention
        # score, then smaller size, then lower id
        return (-d, -retention.get(y, 0.0), sizes[y], y)

    if pruning:
        evals = {}
        heap = []
        round_no = 0
        for y in cands:
            if sizes[y] > cache_size + _EPS:
                dropped.add(y)
                continue
            b, d, ov, tot = evaluate(y)
            evals[y] = (b, d, ov, tot, round_no)
            heap.append((*rank(d, y),))
        heapq.heapify(heap)
        while heap:
            entry = heapq.heappop(heap)
            y = entry[-1]
            if y in taken or y in dropped:
                continue
            if used + sizes[y] > cache_size + _EPS:
                dropped.add(y)
                continue
            b, d, ov, tot, stamp = evals[y]
            if stamp != round_no:
                # a cached candidate's benefit is bounded below by zero and
                # never grows as the selection grows, so a stored zero is
                # final; its stale overlay is discarded because a zero-cost
                # zero-benefit pick changes no plan cost anyway
                if b == 0.0 and y in held:
                    ov = tot = None
                    evals[y] = (b, d, ov, tot, round_no)
                else:
                    b, d, ov, tot = evaluate(y)
                    evals[y] = (b, d, ov, tot, round_no)
                    heapq.heappush(heap, rank(d, y))
                    continue
            if b < 0:
                break
            picks.append(Pick(y, b, d, sizes[y]))
            taken.add(y)
            used += sizes[y]
            if ov is not None:
                # evaluated this round, so the session base matches `selected`
                session.advance(selected, y, ov, tot, s_key=cur_key)
                selected.append(y)
                cur_key = cur_key | {y}
                synced, synced_key = len(selected), cur_key
            else:
                selected.append(y)  # frozen zero: fold lazily if ever needed
                cur_key = cur_key | {y}
            round_no += 1
    else:
        remaining = list(cands)
        while remaining:
            feasible = [y for y in remaining if used + sizes[y] <= cache_size + _EPS]
            remaining = feasible  # infeasible candidates never fit again
            if not feasible:
                break
            best = None
            for y in feasible:
                b, d, ov, tot = evaluate(y)
                if best is None or rank(d, y) < rank(best[1], best[0]):
                    best = (y, d, b, ov, tot)
            y, d, b, ov, tot = best
            if b < 0:
                break
            picks.append(Pick(y, b, d, sizes[y]))
            used += sizes[y]
            session.advance(selected, y, ov, tot, s_key=cur_key)
            selected.append(y)
            cur_key = cur_key | {y}
            synced, synced_key = len(selected), cur_key
            remaining.remove(y)

    for p in picks:
        assert p.benefit >= 0.0, "accepted a negative-benefit pick"
    return picks


class StepResult:
    """Everything the harness logs about one processed query."""

    __slots__ = ("index", "query_id", "plan_cost", "mat_cost", "reused",
                 "admitted", "evicted", "marked", "occupancy")

    def __init__(self, index, query_id, plan_cost, mat_cost, reused,
                 admitted, evicted, marked, occupancy):
        self.index = index
        self.query_id = query_id
        self.plan_cost = plan_cost
        self.mat_cost = mat_cost
        self.reused = reused      # node ids read from cache by the plan
        self.admitted = admitted  # (node id, size blocks) in admission order
        self.evicted = evicted    # node ids
        self.marked = marked      # marked set after the query
        self.occupancy = occupancy

    @property
    def total_cost(self):
        return self.plan_cost + self.mat_cost


class EngineBase:
    """Shared per-query plumbing: one DAG, one cache state, a step counter.

    An optional anchor query (typically the workload's bare join tree) is
    registered permanently so the join-subset lattice is expanded once
    instead of per query; being a root it never changes any plan cost.
    """

    name = "base"

    def __init__(self, catalog, params, capacity_blocks, anchor=None):
        self.catalog = catalog
        self.params = params
        self.dag = QueryDag(catalog, params)
        self.state = CacheState(self.dag, capacity_blocks)
        self.now = 0
        if anchor is not None:
            self.dag.insert_query(anchor, "__anchor__")
            self.dag.expand()

    def _prepare(self, tree, query_id, subsume=True) -> int:
        # a tree whose signature already resolves to a live node adds nothing:
        # insertion is idempotent and the expansion and subsumption closures
        # are already saturated for every node it would touch
        known = self.dag.sig_index.get(self.dag.tree_signature(tree))
        if known is not None:
            if query_id is not None:
                self.dag.register_root(query_id, known)
            return self.dag.find(known)
        root = self.dag.insert_query(tree, query_id)
        self.dag.expand()
        if subsume:
            self.dag.add_subsumption_derivations()
        self.state.remap()
        return self.dag.find(root)

    def step(self, tree, query_id=None) -> StepResult:
        raise NotImplementedError

    def _result(self, query_id, plan_cost, mat_cost, reused=(), admitted=(),
                evicted=()):
        marked = tuple(sorted(
            nid for nid, e in self.state.entries.items() if e.marked))
        return StepResult(self.now, query_id, plan_cost, mat_cost,
                          tuple(reused), tuple(admitted), tuple(evicted),
                          marked, self.used_blocks())

    def used_blocks(self):
        return self.state.used


VARIANTS = ("finalquery", "nofullcache", "fullcache")


class IncrementalPolicy(EngineBase):
    """Greedy benefit-driven cache management over the consolidated DAG.

    Variants: finalquery considers only each query's root for caching;
    nofullcache admits exactly the greedy selection; fullcache additionally
    offers unselected plan results to the unmarked LCS/LRU pool.
    """

    def __init__(self, catalog, params, capacity_blocks, anchor=None,
                 variant="nofullcache", window=10, decay=0.9, pruning=True):
        super().__init__(catalog, params, capacity_blocks, anchor)
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        self.variant = variant
        self.name = f"incremental-{variant}"
        self.repset = RepresentativeSet(window, decay)
        self.pruning = pruning

    def step(self, tree, query_id=None) -> StepResult:
        self.now += 1
        qid = query_id if query_id is not None else f"q{self.now}"
        root = self._prepare(tree, qid)
        cached = self.state.ids()
        plan = optimize(self.dag, root, cached)
        for nid in plan.reused:
            self.state.touch(nid, self.now)

        # window bookkeeping; retired queries release their DAG refs
        retired = self.repset.record(qid, root)
        for old in retired:
            self.dag.remove_query(old, sweep=False)
        if retired:
            self.dag.sweep()

        if self.variant == "finalquery":
            plan_cands = [plan.root] if self.dag.nodes[plan.root].kind != "rel" else []
        else:
            plan_cands = list(plan.nodes)
        candidates = set(plan_cands)
        candidates.update(nid for nid, e in self.state.entries.items() if e.marked)

        picks: List[Pick] = []
        if candidates and self.state.capacity > _EPS:
            session = BenefitSession(self.dag, self.repset.items(self.dag))
            retention = {}
            for nid, e in self.state.entries.items():
                if e.rebuild_cost is not None and e.size > 0.0:
                    retention[self.dag.find(nid)] = e.rebuild_cost / e.size
            picks = greedy_select(self.dag, session, candidates,
                                  self.state.capacity, free_set=plan.nodes,
                                  pruning=self.pruning,
                                  cached=self.state.ids(),
                                  retention=retention)

        sel_set = {p.node for p in picks}
        # previously marked nodes not reselected become unmarked (and thereby
        # evictable); reselected cached nodes just keep their mark
        for nid, entry in self.state.entries.items():
            entry.marked = nid in sel_set

        mat_cost = 0.0
        admitted: List[Tuple[int, float]] = []
        evicted: List[int] = []
        plan_set = set(plan.nodes)
        for p in picks:
            nid = p.node
            if self.state.has(nid):
                continue
            if nid not in plan_set:
                # carried-over selection that was never materialized: only
                # plan nodes can be written this turn
                continue
            need = p.size - self.state.free()
            victims = lcs_lru_victims(self.state, need)
            assert victims is not None, "marked set exceeded capacity"
            if victims:
                self.state.evict_many(victims)
                evicted.extend(victims)
            rebuild = root_recompute_cost(self.dag, nid, frozenset())
            self.state.admit(nid, self.now, marked=True, stored_cost=plan.cost,
                             rebuild_cost=rebuild)
            mat_cost += self.dag.nodes[nid].mat_cost
            admitted.append((nid, p.size))

        if self.variant == "fullcache":
            for nid in plan.nodes:  # inputs first
                if nid in sel_set or self.state.has(nid):
                    continue
                size = self.dag.nodes[nid].est.blocks
                need = size - self.state.free()
                victims = lcs_lru_victims(self.state, need,
                                          incoming=(size, self.now))
                if victims is None:
                    continue
                if victims:
                    self.state.evict_many(victims)
                    evicted.extend(victims)
                rebuild = root_recompute_cost(self.dag, nid, frozenset())
                self.state.admit(nid, self.now, marked=False,
                                 stored_cost=plan.cost, rebuild_cost=rebuild)
                mat_cost += self.dag.nodes[nid].mat_cost
                admitted.append((nid, size))

        self.state.assert_capacity()
        return self._result(qid, plan.cost, mat_cost, plan.reused,
                            admitted, evicted)
