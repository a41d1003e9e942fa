"""Cloud-side search loop: candidate rounds on client groups, fusion, dropping, FL-tune."""

from __future__ import annotations

import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import cost, grouping, nn, pruner
from .data import ClientDataset, Federation

log = logging.getLogger(__name__)

# seed-stream tags keep the search, FL-tune and scheduling draws independent
STREAM_SEARCH = 1
STREAM_SCHEDULE = 2
STREAM_FL = 3

IMAGENET_ROUNDS = ((1, 5, 5), (7, 10, 10), (11, 15, 15), (16, None, 20))
CELEBA_ROUNDS = ((1, 5, 2), (6, 10, 5), (11, 15, 8), (16, None, 10))


def parse_round_schedule(text: str) -> tuple[tuple[int, int | None, int], ...]:
    """Parse ``"1-5:2,6-10:5,16-:10"`` into ``(first, last or None, rounds)`` tiers."""
    tiers = []
    for part in text.replace(" ", "").split(","):
        m = re.fullmatch(r"(\d+)-(\d*):(\d+)", part)
        if not m:
            raise ValueError(f"bad round tier {part!r}; expected FIRST-LAST:ROUNDS or FIRST-:ROUNDS")
        first, last, rounds = int(m[1]), int(m[2]) if m[2] else None, int(m[3])
        if rounds < 1 or first < 1 or (last is not None and last < first):
            raise ValueError(f"bad round tier {part!r}")
        tiers.append((first, last, rounds))
    tiers.sort()
    return tuple(tiers)


def format_round_schedule(tiers) -> str:
    return ",".join(f"{a}-{'' if b is None else b}:{r}" for a, b, r in tiers)


def dynamic_round_number(t: int, schedule: Sequence[tuple[int, int | None, int]], enabled: bool = True) -> int:
    """Round count for iteration ``t``.

    Iterations that fall between tiers take the next tier's count; past the
    last tier the last count applies. Disabled, every iteration gets the
    largest count in the schedule.
    """
    if t < 1:
        raise ValueError("iterations are numbered from 1")
    if not enabled:
        return max(r for _, _, r in schedule)
    for first, last, rounds in schedule:
        if t < first or last is None or t <= last:
            return rounds
    return schedule[-1][2]


@dataclass(frozen=True)
class SearchConfig:
    seed: int = 0
    groups: int = 10
    r: float = grouping.DEFAULT_TOLERANCE
    local_epochs: int = 1
    drop_ratio: float = 33.0
    round_schedule: tuple = CELEBA_ROUNDS
    lr: float = 0.05
    batch_size: int = 32
    delta0: float = 0.0
    decay: float = 0.93
    final_budget: float = 0.0
    grouping_enabled: bool = True
    dynamic_rounds_enabled: bool = True
    early_drop_enabled: bool = True
    threads: int = 1

    def __post_init__(self):
        if not 0 <= self.drop_ratio <= 100:
            raise ValueError("drop_ratio must lie in [0, 100]")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if any(r < 1 for _, _, r in self.round_schedule):
            raise ValueError("round counts must be >= 1")
        if self.groups < 1 or self.batch_size < 1 or self.threads < 1:
            raise ValueError("groups, batch_size and threads must be positive")


@dataclass(frozen=True)
class ClientReport:
    client_id: int
    acc: float
    test_num: int
    train_num: int
    grad: nn.Parameters | None = None


@dataclass
class CandidateState:
    candidate: pruner.Candidate
    params: nn.Parameters
    fused_acc_history: list[float] = field(default_factory=list)
    degradation: float = math.inf
    alive: bool = True
    assigned_group: int | None = None

    @property
    def candidate_id(self) -> int:
        return self.candidate.candidate_id


@dataclass(frozen=True)
class IterationReport:
    iteration: int
    budget: float
    chosen_layer: int
    fused_acc: float
    macs: int
    rounds: int
    candidates: int
    drop_log: tuple[tuple[int, tuple[int, ...]], ...]
    mean_distance: float
    balance_violated: bool
    # (candidate_id, pruned layer, macs, last degradation) for every candidate
    candidate_log: tuple[tuple[int, int, int, float], ...] = ()

    def as_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "budget": self.budget,
            "chosen_layer": self.chosen_layer,
            "fused_acc": self.fused_acc,
            "macs": self.macs,
            "rounds": self.rounds,
            "candidates": self.candidates,
            "drop_log": [{"round": r, "dropped": list(ids)} for r, ids in self.drop_log],
            "mean_distance": self.mean_distance,
            "balance_violated": self.balance_violated,
            "candidates_detail": [{"candidate_id": c, "layer": l, "macs": m, "degradation": d}
                                  for c, l, m, d in self.candidate_log],
        }


@dataclass
class SearchResult:
    gms: list[tuple[nn.Architecture, nn.Parameters]]
    reports: list[IterationReport]
    ledger: list[cost.LedgerEntry]
    schedule: pruner.BudgetSchedule
    initial_acc: float


# ---------------------------------------------------------------- client side


def client_rng(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *path]))


def client_operation(arch: nn.Architecture, params: nn.Parameters, client: ClientDataset, epochs: int, lr: float,
                     rng: np.random.Generator, batch_size: int = 32) -> ClientReport:
    """Local SGD for ``epochs`` passes, then validation accuracy of the trained model.

    The reported ``grad`` is the parameter delta ``after - before``.
    """
    if client.train_num < 1 or client.test_num < 1:
        raise ValueError(f"client {client.client_id} lacks a training or validation shard")
    x, y = client.train.features, client.train.labels
    trained = params
    if lr > 0:
        bs = min(batch_size, len(y))
        for _ in range(epochs):
            order = rng.permutation(len(y))
            for start in range(0, len(y), bs):
                idx = order[start : start + bs]
                _, grad = nn.loss_and_grad(arch, trained, x[idx], y[idx])
                trained = nn.sgd_step(trained, grad, lr)
    acc, test_num = nn.evaluate(arch, trained, client.validation.features, client.validation.labels)
    delta = trained.zip_map(params, lambda a, b: a - b)
    return ClientReport(client.client_id, acc, test_num, client.train_num, delta)


# ---------------------------------------------------------------- cloud side


def fuse_accuracy(reports: Iterable[ClientReport]) -> float:
    reports = sorted(reports, key=lambda r: r.client_id)
    if not reports:
        raise ValueError("no reports to fuse")
    total = sum(r.test_num for r in reports)
    if total == 0:
        raise ValueError("reports carry zero test samples")
    return sum(r.test_num * r.acc for r in reports) / total


def fuse_gradients(reports: Iterable[ClientReport]) -> nn.Parameters:
    """train_num-weighted mean of client deltas, summed in ascending client_id order."""
    reports = sorted(reports, key=lambda r: r.client_id)
    if not reports:
        raise ValueError("no reports to fuse")
    total = sum(r.train_num for r in reports)
    if total == 0:
        raise ValueError("reports carry zero training samples")
    first = reports[0].grad
    for r in reports[1:]:
        nn.check_congruent(first, r.grad)
    dtype = first.dtype

    def fuse(*arrays):
        acc = np.zeros(arrays[0].shape, dtype=np.float64)
        for r, a in zip(reports, arrays):
            acc += r.train_num * a.astype(np.float64)
        return (acc / total).astype(dtype)

    weights = tuple(None if w is None else fuse(*(r.grad.weights[i] for r in reports))
                    for i, w in enumerate(first.weights))
    biases = tuple(None if b is None else fuse(*(r.grad.biases[i] for r in reports))
                   for i, b in enumerate(first.biases))
    return nn.Parameters(weights, biases)


def acc_degradation(prev_acc: float, prev_macs: int, cand_acc: float, cand_macs: int) -> float:
    """Accuracy lost per MAC saved relative to the previous global model; lower is better."""
    saved = prev_macs - cand_macs
    if saved <= 0:
        raise ValueError("candidate does not reduce resource consumption")
    return (prev_acc - cand_acc) / saved


def drop_count(alpha: float, k_original: int, alive: int) -> int:
    # at most ceil(alpha% of the original count) per round, and never the last survivor
    return max(0, min(math.ceil(alpha / 100 * k_original - 1e-9), alive - 1))


def drop_candidates(states: Sequence[CandidateState], alpha: float, k_original: int) -> list[int]:
    """Drop the alive candidates with the largest degradation; return their ids."""
    alive = [s for s in states if s.alive]
    if not alive:
        raise ValueError("no alive candidates")
    n = drop_count(alpha, k_original, len(alive))
    ranked = sorted(alive, key=lambda s: (s.degradation, s.candidate_id))
    dropped = ranked[len(ranked) - n :] if n else []
    for s in dropped:
        s.alive = False
    return sorted(s.candidate_id for s in dropped)


def select_best(states: Sequence[CandidateState]) -> CandidateState:
    alive = [s for s in states if s.alive]
    return min(alive, key=lambda s: (s.degradation, s.candidate_id))


@contextmanager
def _executor(threads: int):
    with threadpool_limits(1):
        if threads <= 1:
            yield map
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                yield pool.map


@dataclass
class _RoundContext:
    config: SearchConfig
    federation: Federation
    group_members: dict[int, list[ClientDataset]]
    iteration: int
    prev_acc: float
    prev_macs: int
    k_original: int
    epochs: int
    run: Callable
    ledger: list[cost.LedgerEntry]


def cloud_one_round(states: list[CandidateState], ctx: _RoundContext, round_: int) -> list[int]:
    """One broadcast/train/test/fuse exchange for every alive candidate.

    Accuracy is fused and candidates dropped before any gradient is
    uploaded, so only survivors pay for the gradient upload. Returns the ids
    dropped this round.
    """
    cfg = ctx.config
    alive = [s for s in states if s.alive]
    tasks = []
    for s in alive:
        for c in ctx.group_members[s.assigned_group]:
            tasks.append((s, c))

    def work(task):
        s, c = task
        rng = client_rng(cfg.seed, STREAM_SEARCH, ctx.iteration, round_, s.candidate_id, c.client_id)
        return client_operation(s.candidate.arch, s.params, c, ctx.epochs, cfg.lr, rng, cfg.batch_size)

    results = list(ctx.run(work, tasks))
    reports: dict[int, list[ClientReport]] = {s.candidate_id: [] for s in alive}
    for (s, _), rep in zip(tasks, results):
        reports[s.candidate_id].append(rep)

    for s in alive:
        acc = fuse_accuracy(reports[s.candidate_id])
        s.fused_acc_history.append(acc)
        s.degradation = acc_degradation(ctx.prev_acc, ctx.prev_macs, acc, s.candidate.macs)

    dropped = drop_candidates(states, cfg.drop_ratio, ctx.k_original) if cfg.early_drop_enabled else []

    for s in alive:
        ctx.ledger.extend(cost.record_round(ctx.iteration, round_, s.candidate_id, s.candidate.arch,
                                            ctx.group_members[s.assigned_group], ctx.epochs,
                                            dropped_this_round=not s.alive))
        if s.alive:
            s.params = nn.apply_delta(s.params, fuse_gradients(reports[s.candidate_id]))
    return dropped


def _evaluate_initial(arch, params, federation: Federation, ledger: list) -> float:
    reports = []
    for c in federation.clients:
        acc, n = nn.evaluate(arch, params, c.validation.features, c.validation.labels)
        reports.append(ClientReport(c.client_id, acc, n, c.train_num))
        ledger.append(cost.LedgerEntry(0, 0, cost.BASELINE_EVAL, c.client_id, cost.ACC_REPORT_BYTES,
                                       nn.param_bytes(arch), nn.macs(arch) * n))
    return fuse_accuracy(reports)


def run_search(config: SearchConfig, federation: Federation, arch: nn.Architecture, params: nn.Parameters,
               on_iteration: Callable[[IterationReport], None] | None = None) -> SearchResult:
    """Adapt a trained model to the shrinking budget schedule; returns GM_1..GM_T."""
    r0 = nn.macs(arch)
    ledger: list[cost.LedgerEntry] = []
    if config.final_budget >= r0:
        sched = pruner.BudgetSchedule(r0, config.delta0, config.decay, config.final_budget, ())
        return SearchResult([], [], ledger, sched, math.nan)
    sched = pruner.budget_schedule(r0, config.delta0, config.decay, config.final_budget)
    gm_arch, gm_params = arch, params
    prev_acc = _evaluate_initial(arch, params, federation, ledger)
    initial_acc = prev_acc
    gms, reports = [], []
    with _executor(config.threads) as run:
        for t, budget in enumerate(sched.budgets, start=1):
            prev_macs = nn.macs(gm_arch)
            # every iteration must shrink the model even if it already fits R_t
            target = min(budget, prev_macs - 1)
            candidates = pruner.generate_candidates(gm_arch, gm_params, target)

            if config.grouping_enabled:
                partition = grouping.greedy_partition(federation, min(config.groups, len(federation)), config.r)
                for c in federation.clients:
                    ledger.append(cost.distribution_upload(t, c.client_id, federation.class_count))
            else:
                partition = grouping.build_partition(federation, [0] * len(federation), 1, config.r)
            by_id = federation.by_id()
            members = {g.group_id: [by_id[cid] for cid in g.client_ids] for g in partition.groups}

            states = [CandidateState(c, c.params) for c in candidates]
            plan = grouping.schedule(partition, [s.candidate_id for s in states],
                                     client_rng(config.seed, STREAM_SCHEDULE, t))
            for cand_id, group_id, _ in plan:
                states[cand_id].assigned_group = group_id

            rounds = dynamic_round_number(t, config.round_schedule, config.dynamic_rounds_enabled)
            ctx = _RoundContext(config, federation, members, t, prev_acc, prev_macs, len(states),
                                config.local_epochs, run, ledger)
            drop_log = []
            for k in range(1, rounds + 1):
                dropped = cloud_one_round(states, ctx, k)
                if dropped:
                    drop_log.append((k, tuple(dropped)))

            best = select_best(states)
            for s in states:
                s.alive = s is best
            gm_arch, gm_params = best.candidate.arch, best.params
            prev_acc = best.fused_acc_history[-1]
            report = IterationReport(t, budget, best.candidate.pruned_layer_index, prev_acc,
                                     nn.macs(gm_arch), rounds, len(states), tuple(drop_log),
                                     partition.mean_distance, partition.balance_violated,
                                     tuple((s.candidate_id, s.candidate.pruned_layer_index, s.candidate.macs,
                                            s.degradation) for s in states))
            log.info("iteration %d: budget %.0f -> layer %d, %d MACs, fused acc %.4f", t, budget,
                     report.chosen_layer, report.macs, report.fused_acc)
            gms.append((gm_arch, gm_params))
            reports.append(report)
            if on_iteration:
                on_iteration(report)
    return SearchResult(gms, reports, ledger, sched, initial_acc)


def fl_tune(arch: nn.Architecture, params: nn.Parameters, federation: Federation, rounds: int,
            clients_per_round: int, epochs: int, lr: float, seed: int = 0, batch_size: int = 32,
            threads: int = 1, stream: int = 0, ledger: list | None = None) -> nn.Parameters:
    """FedAvg: each round a uniform client sample trains locally and deltas are fused by train_num."""
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    clients = sorted(federation.clients, key=lambda c: c.client_id)
    per_round = min(clients_per_round, len(clients))
    with _executor(threads) as run:
        for k in range(1, rounds + 1):
            pick = client_rng(seed, STREAM_FL, stream, k).choice(len(clients), size=per_round, replace=False)
            chosen = [clients[i] for i in sorted(pick)]

            def work(c, k=k):
                rng = client_rng(seed, STREAM_FL, stream, k, c.client_id)
                return client_operation(arch, params, c, epochs, lr, rng, batch_size)

            reports = list(run(work, chosen))
            if ledger is not None:
                for c in chosen:
                    ledger.append(cost.client_round_entry(0, k, cost.FL_TUNE, c.client_id, arch, c.train_num,
                                                          c.test_num, epochs, True))
            if lr > 0:
                params = nn.apply_delta(params, fuse_gradients(reports))
    return params


def holdout_accuracy(arch: nn.Architecture, params: nn.Parameters, federation: Federation) -> float:
    """Pooled top-1 accuracy on every client's held-out test shard."""
    pooled = federation.pooled("test")
    return nn.evaluate(arch, params, pooled.features, pooled.labels)[0]
