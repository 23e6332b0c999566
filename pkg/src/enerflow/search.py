"""Two-level search: assignment sweeps inside, graph rewrites outside.

The inner level walks the space of algorithm assignments of one fixed
graph: starting from the lowest applicable algorithm id per node, it
scans the distance-<= d neighborhood in a fixed order, takes any strict
improvement immediately, and repeats until a full sweep changes nothing.
For cost functions that are linear in time and energy the d=1 sweep is
exact, because such costs separate per node.

The outer level explores the space of equivalent graphs with a best-first
queue. A candidate graph enters the queue if its cost beats `alpha` times
the best cost known when it was generated; at alpha=1 this degenerates to
greedy descent, larger alpha widens the explored frontier. A visited set
of canonical hashes keeps inverse-rule pairs from cycling, and stale
queue entries (no longer within the alpha bound) are dropped at dequeue.

Brute-force counterparts of both levels serve as test oracles.
"""

from __future__ import annotations

import heapq
import itertools
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .cost import (
    Assignment,
    CostDatabase,
    CostFunction,
    node_cost_table,
    normalization_refs,
)
from .errors import InfeasibleConstraint, SpaceTooLarge
from .graph import Graph, canonical_hash
from .profiling import ProfilerSpec, ensure_profiled
from .rules import SubstitutionRule, neighbors


@dataclass
class SearchConfig:
    """Knobs for the outer/inner search.

    alpha >= 1 relaxes the outer enqueue bound; d >= 1 is the inner
    neighborhood radius in assignment distance. The caps bound queue
    growth and graph growth (None means 4x the origin's node count).
    """

    alpha: float = 1.05
    d: int = 1
    max_queue: int = 100_000
    max_graph_nodes: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 1.0:
            raise ValueError(f"alpha must be >= 1, got {self.alpha}")
        if self.d < 1:
            raise ValueError(f"d must be >= 1, got {self.d}")
        if self.max_queue < 1:
            raise ValueError("max_queue must be >= 1")
        if self.max_graph_nodes is not None and self.max_graph_nodes < 1:
            raise ValueError("max_graph_nodes must be >= 1")


@dataclass
class SearchStats:
    graphs_explored: int = 0        # dequeued and expanded
    graphs_generated: int = 0       # neighbor graphs produced
    graphs_deduped: int = 0         # neighbors already seen
    expanded_at_best: int = 0       # expansions whose cost equalled the best
    assignments_evaluated: int = 0
    inner_sweeps: int = 0
    best_updates: int = 0
    queue_pruned: int = 0
    queue_cap_hits: int = 0
    node_cap_hits: int = 0
    new_cost_records: int = 0
    wall_time_ms: float = field(default=0.0, compare=False)


@dataclass
class OptimizationResult:
    graph: Graph
    assignment: Assignment
    cost: float
    time_ms: float
    energy: float
    power_w: float
    stats: SearchStats


# ---------------------------------------------------------------------------
# Inner search (assignment sweeps) and its brute-force oracle
# ---------------------------------------------------------------------------

def default_assignment(g: Graph, db: CostDatabase) -> Assignment:
    """Lowest applicable algorithm id per node (the inner-search start)."""
    table = node_cost_table(g, db)
    return {nid: rows[0][0] for nid, (_, rows) in table.items()}


def _sweep(g: Graph, db: CostDatabase, f: CostFunction, d: int) -> tuple[Assignment, float, float, float, int, int]:
    """Runs the improvement sweep; returns (assignment, cost, time, energy,
    evaluations, sweeps)."""
    table = node_cost_table(g, db)
    nids = sorted(table)
    per: dict[int, dict[int, tuple[float, float]]] = {
        nid: {alg: (t, e) for alg, t, e in rows} for nid, (_, rows) in table.items()
    }
    assign: Assignment = {nid: table[nid][1][0][0] for nid in nids}
    t_total = sum(per[nid][assign[nid]][0] for nid in nids)
    e_total = sum(per[nid][assign[nid]][1] for nid in nids)
    cost = f.from_totals(t_total, e_total)
    evals = 0
    sweeps = 0

    if not nids:
        return assign, cost, t_total, e_total, evals, sweeps

    radius = min(d, len(nids))
    changed = True
    while changed:
        changed = False
        sweeps += 1
        for k in range(1, radius + 1):
            for combo in itertools.combinations(nids, k):
                alternatives = [
                    [alg for alg in sorted(per[nid]) if alg != assign[nid]]
                    for nid in combo
                ]
                if any(not alts for alts in alternatives):
                    continue
                for choice in itertools.product(*alternatives):
                    dt = de = 0.0
                    for nid, alg in zip(combo, choice):
                        cur_t, cur_e = per[nid][assign[nid]]
                        new_t, new_e = per[nid][alg]
                        dt += new_t - cur_t
                        de += new_e - cur_e
                    candidate = f.from_totals(t_total + dt, e_total + de)
                    evals += 1
                    if candidate < cost:
                        for nid, alg in zip(combo, choice):
                            assign[nid] = alg
                        t_total += dt
                        e_total += de
                        cost = candidate
                        changed = True
    return assign, cost, t_total, e_total, evals, sweeps


def inner_search(g: Graph, db: CostDatabase, f: CostFunction, d: int = 1) -> Assignment:
    """d-locally optimal algorithm assignment for `g` (see module docs)."""
    assign, *_ = _sweep(g, db, f, d)
    return assign


def brute_force_assignment(g: Graph, db: CostDatabase, f: CostFunction,
                           max_points: int = 10**6) -> Assignment:
    """Exhaustive assignment oracle: global minimum, ties broken by the
    lexicographically smallest algorithm-id vector (ascending node ids)."""
    table = node_cost_table(g, db)
    nids = sorted(table)
    if not nids:
        return {}
    rows = [table[nid][1] for nid in nids]
    total = math.prod(len(r) for r in rows)
    if total > max_points:
        raise SpaceTooLarge(f"{total} assignments exceed the bound {max_points}")
    t_grid = np.array([t for _, t, _ in rows[0]])
    e_grid = np.array([e for _, _, e in rows[0]])
    for r in rows[1:]:
        t_grid = np.add.outer(t_grid, np.array([t for _, t, _ in r]))
        e_grid = np.add.outer(e_grid, np.array([e for _, _, e in r]))
    cost_grid = f.from_totals(t_grid, e_grid)
    flat = int(np.argmin(cost_grid))  # first minimum = lexicographic tie-break
    indices = np.unravel_index(flat, cost_grid.shape)
    return {nid: rows[i][int(idx)][0] for i, (nid, idx) in enumerate(zip(nids, indices))}


# ---------------------------------------------------------------------------
# Outer search (graph space) and its brute-force oracle
# ---------------------------------------------------------------------------

def _evaluate(g: Graph, db: CostDatabase, f: CostFunction, d: int,
              use_inner: bool, stats: SearchStats) -> tuple[Assignment, float, float, float]:
    if use_inner:
        assign, cost, t, e, evals, sweeps = _sweep(g, db, f, d)
        stats.assignments_evaluated += evals
        stats.inner_sweeps += sweeps
        return assign, cost, t, e
    table = node_cost_table(g, db)
    assign = {nid: rows[0][0] for nid, (_, rows) in table.items()}
    per = {nid: rows[0] for nid, (_, rows) in table.items()}
    t = sum(row[1] for row in per.values())
    e = sum(row[2] for row in per.values())
    stats.assignments_evaluated += 1
    return assign, f.from_totals(t, e), t, e


def _node_cap(cfg: SearchConfig, g0: Graph) -> int:
    if cfg.max_graph_nodes is not None:
        return cfg.max_graph_nodes
    return 4 * max(1, len(g0.compute_nodes()))


def outer_search(g0: Graph, rules: list[SubstitutionRule], db: CostDatabase,
                 f: CostFunction, cfg: SearchConfig, profiler: ProfilerSpec | None,
                 use_inner: bool = True, db_append_path: str | None = None) -> OptimizationResult:
    """Best-first search over the rewrite space of `g0` (see module docs).

    Newly generated graphs are profiled on demand when `profiler` is given;
    with `profiler=None` every signature must already be in `db`. The result
    never costs more than (g0, inner_search(g0)). Cap hits are reported in
    the stats rather than raised.
    """
    started = time.perf_counter()
    stats = SearchStats()
    node_cap = _node_cap(cfg, g0)

    if profiler is not None:
        stats.new_cost_records += ensure_profiled(g0, db, profiler, db_append_path)
    assign0, cost0, t0, e0 = _evaluate(g0, db, f, cfg.d, use_inner, stats)
    best = (g0, assign0, cost0, t0, e0)

    h0 = canonical_hash(g0)
    visited = {h0}
    heap: list[tuple[float, int]] = [(cost0, h0)]
    pending: dict[int, Graph] = {h0: g0}

    while heap:
        cost, digest = heapq.heappop(heap)
        if cost > cfg.alpha * best[2]:
            stats.queue_pruned += 1
            pending.pop(digest, None)
            continue
        g = pending.pop(digest)
        stats.graphs_explored += 1
        if cost == best[2]:
            stats.expanded_at_best += 1
        for candidate in neighbors(g, rules):
            stats.graphs_generated += 1
            h = canonical_hash(candidate)
            if h in visited:
                stats.graphs_deduped += 1
                continue
            visited.add(h)
            if len(candidate.compute_nodes()) > node_cap:
                stats.node_cap_hits += 1
                continue
            if profiler is not None:
                stats.new_cost_records += ensure_profiled(candidate, db, profiler, db_append_path)
            c_assign, c_cost, c_t, c_e = _evaluate(candidate, db, f, cfg.d, use_inner, stats)
            prev_best = best[2]
            if c_cost < prev_best:
                best = (candidate, c_assign, c_cost, c_t, c_e)
                stats.best_updates += 1
            if c_cost < cfg.alpha * prev_best:
                if len(heap) >= cfg.max_queue:
                    stats.queue_cap_hits += 1
                else:
                    heapq.heappush(heap, (c_cost, h))
                    pending[h] = candidate

    stats.wall_time_ms = (time.perf_counter() - started) * 1000.0
    g_best, a_best, c_best, t_best, e_best = best
    power = e_best / t_best if t_best > 0 else 0.0
    return OptimizationResult(g_best, a_best, c_best, t_best, e_best, power, stats)


def closure(g0: Graph, rules: list[SubstitutionRule], max_graphs: int,
            max_graph_nodes: int | None = None) -> list[Graph]:
    """BFS closure of `g0` under the rules, deduplicated by canonical hash.

    Raises SpaceTooLarge past `max_graphs`. Graphs above the node cap are
    not expanded (matching the outer search's growth cap).
    """
    seen = {canonical_hash(g0)}
    out = [g0]
    frontier = [g0]
    while frontier:
        nxt: list[Graph] = []
        for g in frontier:
            for candidate in neighbors(g, rules):
                h = canonical_hash(candidate)
                if h in seen:
                    continue
                seen.add(h)
                if max_graph_nodes is not None and len(candidate.compute_nodes()) > max_graph_nodes:
                    continue
                out.append(candidate)
                if len(out) > max_graphs:
                    raise SpaceTooLarge(f"rewrite closure exceeds {max_graphs} graphs")
                nxt.append(candidate)
        frontier = nxt
    return out


def brute_force_space(g0: Graph, rules: list[SubstitutionRule], db: CostDatabase,
                      f: CostFunction, max_graphs: int = 10**4,
                      max_points: int = 10**6, profiler: ProfilerSpec | None = None,
                      max_graph_nodes: int | None = None) -> OptimizationResult:
    """Exhaustive oracle: enumerate the whole rewrite closure and brute-force
    the assignment of every member; global minimum, first-found on ties."""
    started = time.perf_counter()
    stats = SearchStats()
    best: tuple[Graph, Assignment, float, float, float] | None = None
    graphs = closure(g0, rules, max_graphs, max_graph_nodes)
    for g in graphs:
        stats.graphs_explored += 1
        if profiler is not None:
            stats.new_cost_records += ensure_profiled(g, db, profiler)
        assign = brute_force_assignment(g, db, f, max_points)
        table = node_cost_table(g, db)
        per = {nid: {a: (tt, ee) for a, tt, ee in rows} for nid, (_, rows) in table.items()}
        t = sum(per[nid][assign[nid]][0] for nid in per)
        e = sum(per[nid][assign[nid]][1] for nid in per)
        cost = f.from_totals(t, e)
        stats.assignments_evaluated += math.prod(len(rows) for _, rows in table.values()) if table else 1
        if best is None or cost < best[2]:
            best = (g, assign, cost, t, e)
    stats.wall_time_ms = (time.perf_counter() - started) * 1000.0
    g_best, a_best, c_best, t_best, e_best = best
    power = e_best / t_best if t_best > 0 else 0.0
    return OptimizationResult(g_best, a_best, c_best, t_best, e_best, power, stats)


# ---------------------------------------------------------------------------
# Constrained optimization via binary search on the energy weight
# ---------------------------------------------------------------------------

def constrained_optimize(g0: Graph, rules: list[SubstitutionRule], db: CostDatabase,
                         cfg: SearchConfig, time_bound_ms: float,
                         profiler: ProfilerSpec | None,
                         iterations: int = 20,
                         db_append_path: str | None = None) -> OptimizationResult:
    """Least-energy result whose modeled time stays within `time_bound_ms`.

    Scalarizes with linear(w) over metrics normalized to the origin graph's
    per-metric optima and binary-searches w: a feasible midpoint moves the
    window toward the energy-heavy side, an infeasible one toward the
    time-heavy side. Endpoints w=1 (pure energy) and w=0 (pure time) are
    evaluated first; raises InfeasibleConstraint when even w=0 misses the
    bound. Among all feasible results seen, lowest modeled energy wins.
    """
    if profiler is not None:
        ensure_profiled(g0, db, profiler, db_append_path)
    if not g0.compute_nodes():
        # nothing to schedule: zero time always satisfies the bound
        return outer_search(g0, rules, db, CostFunction("time"), cfg, profiler,
                            db_append_path=db_append_path)
    t_ref, e_ref, p_ref = normalization_refs(g0, db)

    def run(w: float) -> OptimizationResult:
        f = CostFunction.linear(w).with_refs(t_ref, e_ref, p_ref)
        return outer_search(g0, rules, db, f, cfg, profiler, db_append_path=db_append_path)

    energy_opt = run(1.0)
    if energy_opt.time_ms <= time_bound_ms:
        return energy_opt

    time_opt = run(0.0)
    if time_opt.time_ms > time_bound_ms:
        raise InfeasibleConstraint(time_opt.time_ms)

    best = time_opt
    lo, hi = 0.0, 1.0
    for _ in range(iterations):
        mid = (lo + hi) / 2.0
        result = run(mid)
        if result.time_ms <= time_bound_ms:
            lo = mid
            if result.energy < best.energy:
                best = result
        else:
            hi = mid
    return best
