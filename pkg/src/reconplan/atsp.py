"""Open-path asymmetric TSP solver for viewpoint ordering.

Instances are dense cost matrices whose row/column 0 is the start node; a
solution is a path visiting every node exactly once starting at 0, with no
return arc (cost matrices from the planner carry an all-zero column 0, the
standard open-tour reduction). Small instances are solved exactly by a
Held-Karp dynamic program, larger ones by nearest-neighbor construction
polished with reversal-free relocation (Or-opt) and exact-delta 2-opt.
"""

from __future__ import annotations

import numpy as np

from .errors import UnreachableViewpoint

EXACT_NODE_LIMIT = 12  # Held-Karp when n - 1 <= this


def _check_reachability(cost: np.ndarray) -> None:
    n = cost.shape[0]
    bad = []
    for h in range(1, n):
        col = np.delete(cost[:, h], h)
        if not np.any(np.isfinite(col)):
            bad.append(h)
    if bad:
        raise UnreachableViewpoint(sorted(bad))


def held_karp(cost: np.ndarray):
    """Exact minimum open path from node 0 over all nodes; (cost, order)."""
    n = cost.shape[0]
    m = n - 1
    sub = cost[1:, 1:]
    size = 1 << m
    dp = np.full((size, m), np.inf)
    parent = np.full((size, m), -1, dtype=np.int64)
    for j in range(m):
        dp[1 << j, j] = cost[0, j + 1]
    for mask in range(1, size):
        bits = [j for j in range(m) if mask >> j & 1]
        if len(bits) < 2:
            continue
        for j in bits:
            pm = mask ^ (1 << j)
            cand = dp[pm, bits] + sub[bits, j]
            cand[bits.index(j)] = np.inf  # j itself is not in pm
            k = int(np.argmin(cand))
            if np.isfinite(cand[k]):
                dp[mask, j] = cand[k]
                parent[mask, j] = bits[k]
    full = size - 1
    last = int(np.argmin(dp[full]))
    best = dp[full, last]
    if not np.isfinite(best):
        raise UnreachableViewpoint(sorted(range(1, n)))
    order = [last]
    mask = full
    while parent[mask, order[-1]] >= 0:
        prev = int(parent[mask, order[-1]])
        mask ^= 1 << order[-1]
        order.append(prev)
    order = [0] + [j + 1 for j in reversed(order)]
    return float(best), order


def path_cost(cost: np.ndarray, order) -> float:
    order = np.asarray(order)
    return float(np.sum(cost[order[:-1], order[1:]]))


def _nearest_neighbor(cost: np.ndarray, first: int | None = None):
    """Greedy construction from node 0, optionally forcing the first hop."""
    n = cost.shape[0]
    order = [0] if first is None else [0, first]
    remaining = set(range(1, n)) - set(order)
    while remaining:
        here = order[-1]
        cands = sorted(remaining)
        costs = cost[here, cands]
        k = int(np.argmin(costs))
        if not np.isfinite(costs[k]):
            raise UnreachableViewpoint(sorted(remaining))
        order.append(cands[k])
        remaining.discard(cands[k])
    return order


def _or_opt_pass(cost: np.ndarray, order: list) -> bool:
    """Relocate runs of 1-3 nodes (orientation kept); True when improved."""
    n = len(order)
    for run in (1, 2, 3):
        for i in range(1, n - run + 1):
            seg = order[i : i + run]
            pre, post = order[i - 1], order[i + run] if i + run < n else None
            removed = cost[pre, seg[0]] + (cost[seg[-1], post] if post is not None else 0.0)
            bridge = cost[pre, post] if post is not None else 0.0
            rest = order[:i] + order[i + run :]
            for k in range(1, len(rest) + 1):
                if k == i:  # same slot
                    continue
                a = rest[k - 1]
                b = rest[k] if k < len(rest) else None
                added = cost[a, seg[0]] + (cost[seg[-1], b] if b is not None else 0.0)
                cut = cost[a, b] if b is not None else 0.0
                delta = (added - cut) - (removed - bridge)
                if delta < -1e-12:
                    order[:] = rest[:k] + seg + rest[k:]
                    return True
    return False


def _two_opt_pass(cost: np.ndarray, order: list) -> bool:
    """Segment reversal with the exact asymmetric delta; True when improved."""
    n = len(order)
    for i in range(1, n - 1):
        for j in range(i + 1, n):
            seg = order[i : j + 1]
            before = cost[order[i - 1], seg[0]] + path_cost(cost, seg)
            after = cost[order[i - 1], seg[-1]] + path_cost(cost, seg[::-1])
            if j + 1 < n:
                before += cost[seg[-1], order[j + 1]]
                after += cost[seg[0], order[j + 1]]
            if after < before - 1e-12:
                order[i : j + 1] = seg[::-1]
                return True
    return False


def _polish(cost: np.ndarray, order: list, budget: int) -> int:
    """Run improving moves until a local optimum; returns moves spent."""
    moves = 0
    while moves < budget:
        if _or_opt_pass(cost, order) or _two_opt_pass(cost, order):
            moves += 1
            continue
        break
    return moves


def heuristic_path(cost: np.ndarray, seed: int = 0):
    """Multi-start local search; (cost, order).

    Nearest-neighbor tours (plain, and with the cheapest first hops forced)
    are each polished by Or-opt and 2-opt; the best is then perturbed with
    reversal-free double-bridge kicks and re-polished. The total number of
    accepted improving moves is capped at 10 n^2.
    """
    n = cost.shape[0]
    budget = 10 * n * n
    rng = np.random.default_rng(seed)
    finite = np.isfinite(cost[0, 1:])
    hops = [h + 1 for h in np.argsort(cost[0, 1:]) if finite[h]]
    starts = [None] + hops[: min(n - 1, 12)]
    best_total, best_order = np.inf, None
    used = 0
    construction_error = None
    for first in starts:
        if used >= budget:
            break
        try:
            order = _nearest_neighbor(cost, first)
        except UnreachableViewpoint as exc:
            construction_error = exc
            continue
        used += _polish(cost, order, budget - used)
        total = path_cost(cost, order)
        if total < best_total:
            best_total, best_order = total, order[:]
    if best_order is None and construction_error is not None:
        raise construction_error
    kicks = min(5 * n, 60) if n > 5 else 0
    for _ in range(kicks):
        if used >= budget:
            break
        order = best_order[:]
        a, b, c = sorted(rng.choice(range(1, n), size=3, replace=False))
        order = order[:a] + order[b:c] + order[a:b] + order[c:]
        used += _polish(cost, order, budget - used)
        total = path_cost(cost, order)
        if total < best_total:
            best_total, best_order = total, order[:]
    if best_order is None or not np.isfinite(best_total):
        raise UnreachableViewpoint(sorted(range(1, n)))
    return best_total, best_order


def solve(cost: np.ndarray):
    """Route to the exact or heuristic solver; returns (cost, order)."""
    cost = np.asarray(cost, dtype=float)
    n = cost.shape[0]
    if cost.ndim != 2 or cost.shape[1] != n:
        raise ValueError("cost matrix must be square")
    if n < 2:
        raise ValueError("need at least the start node and one viewpoint")
    _check_reachability(cost)
    if n - 1 <= EXACT_NODE_LIMIT:
        return held_karp(cost)
    return heuristic_path(cost)
