"""Balanced, distribution-representative client groups and candidate scheduling."""

from __future__ import annotations

import itertools
import math
from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Federation

DEFAULT_TOLERANCE = 1.1
# share of the unassigned data that may be reserved for under-filled groups
FILL_SLACK = 0.9
RESTART_SEED = 20_240_401
MAX_RESTARTS = 8
# client visits per extra restart budget: 160 clients -> one restart
RESTART_BUDGET = 160
# one-for-two exchanges scan every client pair, so they are reserved for small federations
PAIR_EXCHANGE_MAX_CLIENTS = 40


def manhattan_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"distribution vectors differ in length: {a.shape} vs {b.shape}")
    return float(np.abs(a - b).sum())


@dataclass(frozen=True)
class Group:
    group_id: int
    client_ids: tuple[int, ...]
    d: int
    aggregate_v: np.ndarray


@dataclass(frozen=True)
class Partition:
    groups: tuple[Group, ...]
    r: float
    mean_distance: float
    balance_violated: bool = False

    @property
    def sizes(self) -> list[int]:
        return [g.d for g in self.groups]

    def group_of(self) -> dict[int, int]:
        return {cid: g.group_id for g in self.groups for cid in g.client_ids}


def _client_stats(federation: Federation) -> tuple[list[int], np.ndarray, np.ndarray]:
    ids = [c.client_id for c in federation.clients]
    sizes = np.array([c.size for c in federation.clients], dtype=np.int64)
    vectors = np.array([c.distribution for c in federation.clients], dtype=np.float64)
    return ids, sizes, vectors


def _mean_distance(counts: np.ndarray, global_v: np.ndarray) -> float:
    """Mean Manhattan distance of each group's class mix to the global mix.

    ``counts`` holds per-group class counts; an empty group scores the
    maximum distance of 2.
    """
    totals = counts.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        v = np.where(totals > 0, counts / totals, 0.0)
    dist = np.where(totals[:, 0] > 0, np.abs(v - global_v).sum(axis=1), 2.0)
    return float(dist.mean())


def build_partition(federation: Federation, assignment: Sequence[int], k: int, r: float) -> Partition:
    """Materialise a Partition from a per-client group index list."""
    ids, sizes, vectors = _client_stats(federation)
    counts = vectors * sizes[:, None]
    global_v = counts.sum(axis=0) / sizes.sum()
    assignment = np.asarray(assignment)
    groups = []
    group_counts = np.zeros((k, counts.shape[1]))
    for g in range(k):
        members = np.flatnonzero(assignment == g)
        group_counts[g] = counts[members].sum(axis=0)
        d = int(sizes[members].sum())
        agg = group_counts[g] / d if d else np.zeros(counts.shape[1])
        groups.append(Group(g, tuple(ids[m] for m in members), d, agg))
    d = [g.d for g in groups]
    violated = min(d) == 0 or max(d) > r * min(d)
    return Partition(tuple(groups), r, _mean_distance(group_counts, global_v), violated)


def _dispatch(sizes, counts, global_v, k: int, r: float, strict: bool) -> np.ndarray:
    group_counts = np.zeros((k, counts.shape[1]))
    group_sizes = np.zeros(k, dtype=np.int64)
    assignment = np.empty(len(sizes), dtype=np.int64)
    target = sizes.sum() / k
    upper, lower = target * math.sqrt(r), target / math.sqrt(r)
    remaining = int(sizes.sum())
    for i in sorted(range(len(sizes)), key=lambda i: (-sizes[i], i)):
        remaining -= sizes[i]
        new = group_sizes + sizes[i]
        if strict:
            ok = new <= r * group_sizes.min()
        else:
            deficit = np.maximum(lower - group_sizes, 0)
            after_deficit = deficit.sum() - deficit + np.maximum(lower - new, 0)
            ok = (new <= upper) & (after_deficit <= FILL_SLACK * remaining)
        feasible = np.flatnonzero(ok)
        if feasible.size == 0:
            best = int(np.argmin(group_sizes))
        else:
            totals = group_counts.sum(axis=1)
            with np.errstate(invalid="ignore", divide="ignore"):
                base = np.where(totals > 0, np.abs(group_counts / totals[:, None] - global_v).sum(axis=1), 2.0)
            cand = group_counts[feasible] + counts[i]
            after = np.abs(cand / cand.sum(axis=1, keepdims=True) - global_v).sum(axis=1)
            best = int(feasible[np.argmin(after - base[feasible])])
        assignment[i] = best
        group_counts[best] += counts[i]
        group_sizes[best] += sizes[i]
    return assignment


def _group_distance(counts: np.ndarray, global_v: np.ndarray) -> np.ndarray:
    totals = counts.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        dist = np.abs(counts / totals - global_v).sum(axis=-1)
    return np.where(totals[..., 0] > 0, dist, 2.0)


def _balanced(group_sizes: np.ndarray, r: float) -> np.ndarray:
    return (group_sizes.min(axis=-1) > 0) & (group_sizes.max(axis=-1) <= r * group_sizes.min(axis=-1))


def _excess(group_sizes: np.ndarray, r: float) -> np.ndarray:
    """How far ``max(d)`` overshoots ``r * min(d)``; zero when balanced."""
    return np.maximum(group_sizes.max(axis=-1) - r * group_sizes.min(axis=-1), 0.0)


# balance dominates distance: any excess reduction beats any distance change
EXCESS_WEIGHT = 1e3


def _refine(assignment, sizes, counts, global_v, k: int, r: float, max_passes: int = 20) -> np.ndarray:
    """Local search over single moves, swaps and (for small federations) one-for-two exchanges.

    The score is ``EXCESS_WEIGHT * excess + sum of group distances``, so an
    unbalanced start is first pushed towards balance and a balanced one never
    leaves it. Clients are visited in index order and each takes its best
    strictly improving step; the result is deterministic.
    """
    assignment = assignment.copy()
    n = len(sizes)
    group_counts = np.zeros((k, counts.shape[1]))
    np.add.at(group_counts, assignment, counts)
    group_sizes = np.bincount(assignment, weights=sizes, minlength=k)
    pj, pl = np.triu_indices(n, 1) if n <= PAIR_EXCHANGE_MAX_CLIENTS else (np.empty(0, int), np.empty(0, int))

    def scores(a, b, out_counts, in_counts, delta_a):
        # score change when group a becomes out_counts and group(s) b become in_counts
        gs = np.tile(group_sizes, (len(delta_a), 1))
        rows = np.arange(len(delta_a))
        gs[rows, a] += delta_a
        gs[rows, b] -= delta_a
        return (EXCESS_WEIGHT * _excess(gs, r) + _group_distance(out_counts, global_v)
                + _group_distance(in_counts, global_v) - dist[a] - dist[b])

    for _ in range(max_passes):
        improved = False
        for i in range(n):
            a = assignment[i]
            dist = _group_distance(group_counts, global_v)
            current = EXCESS_WEIGHT * _excess(group_sizes, r)
            options = []  # (score change, group b, partners)
            b = np.array([g for g in range(k) if g != a], dtype=np.int64)
            if b.size:
                d = scores(a, b, np.tile(group_counts[a] - counts[i], (b.size, 1)),
                           group_counts[b] + counts[i], np.full(b.size, -sizes[i]))
                m = int(np.argmin(d))
                options.append((d[m], int(b[m]), ()))
            others = np.flatnonzero(assignment != a)
            if others.size:
                b = assignment[others]
                d = scores(a, b, group_counts[a] - counts[i] + counts[others],
                           group_counts[b] - counts[others] + counts[i], sizes[others] - sizes[i])
                m = int(np.argmin(d))
                options.append((d[m], int(b[m]), (int(others[m]),)))
            same = (assignment[pj] == assignment[pl]) & (assignment[pj] != a)
            if same.size and same.any():
                js, ls = pj[same], pl[same]
                b = assignment[js]
                moved = counts[js] + counts[ls]
                d = scores(a, b, group_counts[a] - counts[i] + moved,
                           group_counts[b] + counts[i] - moved, sizes[js] + sizes[ls] - sizes[i])
                m = int(np.argmin(d))
                options.append((d[m], int(b[m]), (int(js[m]), int(ls[m]))))
            if not options:
                continue
            change, b, partners = min(options, key=lambda o: o[0])
            if change - current >= -1e-12:
                continue
            assignment[i] = b
            group_counts[a] -= counts[i]
            group_counts[b] += counts[i]
            group_sizes[a] -= sizes[i]
            group_sizes[b] += sizes[i]
            for j in partners:
                assignment[j] = a
                group_counts[b] -= counts[j]
                group_counts[a] += counts[j]
                group_sizes[b] -= sizes[j]
                group_sizes[a] += sizes[j]
            improved = True
        if not improved:
            break
    return assignment


def greedy_partition(federation: Federation, k: int, r: float = DEFAULT_TOLERANCE) -> Partition:
    """Largest-first dispatch into the group that best preserves representativeness.

    Clients are visited by descending sample count (ties by client order) and
    each joins the feasible group whose assignment gives the smallest mean
    distance to the all-client distribution (ties: lowest group id); with no
    feasible group it joins the currently smallest group.

    Two feasibility rules are tried. The loose one aims every group at the
    band ``[T/sqrt(r), T*sqrt(r)]`` around the balanced total ``T``: a group
    is feasible while it stays under the upper edge and the unassigned data
    can still lift all groups to the lower edge. The strict one only admits
    groups within ``r`` of the current smallest group, which keeps
    ``max(d) <= r * min(d)`` true after every step. Both results are polished
    by ``_refine``, as are a few seeded random starts when the federation is
    small, and the balanced result with the lowest mean distance wins.
    ``balance_violated`` is set only when neither satisfies the inequality.
    """
    if k < 1:
        raise ValueError("group count must be >= 1")
    if k > len(federation):
        raise ValueError(f"cannot form {k} groups from {len(federation)} clients")
    _, sizes, vectors = _client_stats(federation)
    counts = vectors * sizes[:, None]
    global_v = counts.sum(axis=0) / sizes.sum()
    starts = [_dispatch(sizes, counts, global_v, k, r, strict) for strict in (False, True)]
    # small federations are cheap to polish, so they also get seeded random starts
    rng = np.random.default_rng(RESTART_SEED)
    for _ in range(min(MAX_RESTARTS, RESTART_BUDGET // len(sizes))):
        starts.append(_random_balanced(sizes, k, rng))
    best = None
    for start in starts:
        partition = build_partition(federation, _refine(start, sizes, counts, global_v, k, r), k, r)
        key = (partition.balance_violated, partition.mean_distance)
        if best is None or key < best[0]:
            best = (key, partition)
    return best[1]


def _random_balanced(sizes, k: int, rng: np.random.Generator) -> np.ndarray:
    """Shuffle clients, then hand each to the currently smallest group."""
    group_sizes = np.zeros(k)
    assignment = np.empty(len(sizes), dtype=np.int64)
    for i in rng.permutation(len(sizes)):
        g = int(np.argmin(group_sizes))
        assignment[i] = g
        group_sizes[g] += sizes[i]
    return assignment


def random_partition(federation: Federation, k: int, r: float, rng: np.random.Generator) -> Partition:
    """Size-balanced but distribution-blind partition (baseline for comparisons)."""
    _, sizes, _ = _client_stats(federation)
    return build_partition(federation, _random_balanced(sizes, k, rng), k, r)


class Scheduler:
    """Assigns candidates to groups, one candidate per free group at a time.

    Free groups are drawn in seeded-random order; once every group is busy the
    next candidate waits for the earliest-finishing group (FIFO completion).
    """

    def __init__(self, group_ids: Sequence[int], rng: np.random.Generator):
        if not group_ids:
            raise ValueError("scheduler needs at least one group")
        self.group_ids = list(group_ids)
        self.rng = rng

    def schedule(self, candidate_ids: Sequence[int]) -> list[tuple[int, int, int]]:
        """Return ``(candidate_id, group_id, batch)`` triples in dispatch order."""
        if not candidate_ids:
            raise ValueError("nothing to schedule")
        # (group, batch in which it is next free); groups finish in dispatch order
        ready = deque((self.group_ids[i], 0) for i in self.rng.permutation(len(self.group_ids)))
        out = []
        for cid in candidate_ids:
            group, batch = ready.popleft()
            out.append((cid, group, batch))
            ready.append((group, batch + 1))
        return out


def schedule(partition: Partition, candidate_ids: Sequence[int], rng: np.random.Generator) -> list[tuple[int, int, int]]:
    return Scheduler([g.group_id for g in partition.groups], rng).schedule(candidate_ids)
