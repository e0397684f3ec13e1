"""Reference caching policies sharing the per-query engine interface.

All of them run the same DAG pipeline per query and differ only in what they
admit and evict; plan choice always comes from the optimizer against the
policy's current cache contents.
"""

from __future__ import annotations

import math
from typing import List, Tuple

from .cache import EngineBase, StepResult, _EPS, lcs_lru_victims
from .optimizer import optimize, root_recompute_cost


class NoCachePolicy(EngineBase):
    """Every query planned against an empty cache; per-query cost is a pure
    function of the query, so identical signatures are memoized."""

    name = "nocache"

    def __init__(self, catalog, params, capacity_blocks=0.0, anchor=None):
        super().__init__(catalog, params, 0.0, anchor)
        self._memo = {}

    def step(self, tree, query_id=None) -> StepResult:
        self.now += 1
        qid = query_id if query_id is not None else f"q{self.now}"
        sig = self.dag.tree_signature(tree)
        cost = self._memo.get(sig)
        if cost is None:
            # subsumption derivations can never beat direct computation when
            # nothing is cached, so skip deriving them
            root = self._prepare(tree, qid, subsume=False)
            cost = optimize(self.dag, root, frozenset()).cost
            self._memo[sig] = cost
            self.dag.remove_query(qid)
        return self._result(qid, cost, 0.0)


class InfCachePolicy(EngineBase):
    """Unbounded cache of every first-seen query result, materialization
    free by definition; exact repeats cost just the stored-result read."""

    name = "infcache"

    def __init__(self, catalog, params, capacity_blocks=None, anchor=None):
        super().__init__(catalog, params, math.inf, anchor)
        self._seen = {}

    def step(self, tree, query_id=None) -> StepResult:
        self.now += 1
        qid = query_id if query_id is not None else f"q{self.now}"
        sig = self.dag.tree_signature(tree)
        hit = self._seen.get(sig)
        if hit is not None:
            nid = self.dag.find(hit)
            self.state.touch(nid, self.now)
            return self._result(qid, self.dag.nodes[nid].reuse_cost, 0.0,
                                reused=(nid,))
        root = self._prepare(tree, qid)
        plan = optimize(self.dag, root, self.state.ids())
        for nid in plan.reused:
            self.state.touch(nid, self.now)
        admitted: Tuple = ()
        if not self.state.has(root) and self.dag.nodes[root].kind != "rel":
            entry = self.state.admit(root, self.now, stored_cost=plan.cost)
            admitted = ((root, entry.size),)
        self._seen[sig] = root
        self.dag.remove_query(qid)
        return self._result(qid, plan.cost, 0.0, reused=plan.reused,
                            admitted=admitted)


class LcsLruPolicy(EngineBase):
    """Final and intermediate plan results compete for space; an incoming
    result only displaces entries larger than it (older-use breaking size
    ties), and eviction prefers the largest, then least recently used."""

    name = "lcslru"

    def step(self, tree, query_id=None) -> StepResult:
        self.now += 1
        qid = query_id if query_id is not None else f"q{self.now}"
        root = self._prepare(tree, qid)
        plan = optimize(self.dag, root, self.state.ids())
        for nid in plan.reused:
            self.state.touch(nid, self.now)
        mat = 0.0
        admitted: List[Tuple[int, float]] = []
        evicted: List[int] = []
        for nid in plan.nodes:  # inputs before consumers
            if self.state.has(nid):
                continue
            size = self.dag.nodes[nid].est.blocks
            if size > self.state.capacity + _EPS:
                continue
            need = size - self.state.free()
            victims = lcs_lru_victims(self.state, need, incoming=(size, self.now))
            if victims is None:
                continue
            if victims:
                self.state.evict_many(victims)
                evicted.extend(victims)
            self.state.admit(nid, self.now, stored_cost=plan.cost)
            mat += self.dag.nodes[nid].mat_cost
            admitted.append((nid, size))
        self.dag.remove_query(qid)
        self.state.assert_capacity()
        return self._result(qid, plan.cost, mat, plan.reused, admitted, evicted)


class _MetricPolicy(EngineBase):
    """Shared skeleton for the top-level-results-only metric policies."""

    def _metric_new(self, plan_cost, size) -> float:
        raise NotImplementedError

    def _metric_entry(self, entry, memo) -> float:
        raise NotImplementedError

    def step(self, tree, query_id=None) -> StepResult:
        self.now += 1
        qid = query_id if query_id is not None else f"q{self.now}"
        root = self._prepare(tree, qid)
        plan = optimize(self.dag, root, self.state.ids())
        for nid in plan.reused:
            self.state.touch(nid, self.now)
        mat = 0.0
        admitted: List[Tuple[int, float]] = []
        evicted: List[int] = []
        size = self.dag.nodes[root].est.blocks
        if (not self.state.has(root) and self.dag.nodes[root].kind != "rel"
                and size <= self.state.capacity + _EPS):
            need = size - self.state.free()
            if need <= _EPS:
                victims = []
            else:
                victims = self._victims(need, self._metric_new(plan.cost, size))
            if victims is not None:
                if victims:
                    self.state.evict_many(victims)
                    evicted.extend(victims)
                self.state.admit(root, self.now, stored_cost=plan.cost)
                mat += self.dag.nodes[root].mat_cost
                admitted.append((root, size))
        self.dag.remove_query(qid)
        self.state.assert_capacity()
        return self._result(qid, plan.cost, mat, plan.reused, admitted, evicted)

    def _victims(self, need, incoming_metric):
        """Lowest-metric entries first, evicted only while strictly below the
        incoming metric; None declines the admission atomically."""
        memo = {}
        scored = sorted(
            ((self._metric_entry(e, memo), e.node, e.size)
             for e in self.state.entries.values()),
            key=lambda t: (t[0], t[1]))
        victims, freed = [], 0.0
        for metric, nid, size in scored:
            if freed >= need - _EPS:
                break
            if metric >= incoming_metric:
                return None
            victims.append(nid)
            freed += size
        return victims if freed >= need - _EPS else None


class DynaMatPolicy(_MetricPolicy):
    """Keeps top-level results by accesses x admission-time compute cost per
    block, accesses counted over the entire history."""

    name = "dynamat"

    def _metric_new(self, plan_cost, size):
        return plan_cost / size  # access count starts at 1

    def _metric_entry(self, entry, memo):
        return entry.access_count * entry.stored_cost / entry.size


class WatchmanPolicy(_MetricPolicy):
    """Keeps top-level results by rate-of-use x current recompute cost per
    block; rate comes from a ring of the last ten access stamps."""

    name = "watchman"

    def _rate(self, entry) -> float:
        k = len(entry.ring)
        if k >= 2:
            return k / (self.now - entry.ring[0])
        return 1.0 / (self.now - entry.admitted + 1)

    def _metric_new(self, plan_cost, size):
        return 1.0 * plan_cost / size  # first access is right now: rate 1

    def _metric_entry(self, entry, memo):
        cost = root_recompute_cost(self.dag, entry.node, self.state.ids(), memo)
        if cost is None:
            cost = entry.stored_cost
        return self._rate(entry) * cost / entry.size


POLICY_CLASSES = {
    "nocache": NoCachePolicy,
    "infcache": InfCachePolicy,
    "lcslru": LcsLruPolicy,
    "dynamat": DynaMatPolicy,
    "watchman": WatchmanPolicy,
}
