"""Simulated on-client cost ledger: bytes up, bytes down, MACs computed."""

from __future__ import annotations

import csv
import io
from dataclasses import astuple, dataclass, fields
from typing import Iterable, Sequence

from . import nn

ACC_REPORT_BYTES = 8
# backward pass modelled as twice the forward MACs
TRAIN_MAC_FACTOR = 3
# 553k-MAC desk ConvNet x 3 x ~12 local samples per epoch ~ 20 MMAC; scaled to ~1 s per epoch
DEFAULT_SECONDS_PER_MAC = 5e-8

# pseudo candidate ids for entries that are not candidate training
DISTRIBUTION_UPLOAD = -1
BASELINE_EVAL = -2
FL_TUNE = -3


@dataclass(frozen=True)
class LedgerEntry:
    iteration: int
    round: int
    candidate_id: int
    client_id: int
    uplink_bytes: int
    downlink_bytes: int
    compute_macs: int

    def __post_init__(self):
        if min(self.uplink_bytes, self.downlink_bytes, self.compute_macs) < 0:
            raise ValueError("ledger quantities must be non-negative")


HEADER = [f.name for f in fields(LedgerEntry)]


def client_round_entry(iteration: int, round_: int, candidate_id: int, client_id: int, arch: nn.Architecture,
                       train_num: int, test_num: int, epochs: int, uploads_gradient: bool) -> LedgerEntry:
    """One client's share of one candidate round."""
    size = nn.param_bytes(arch)
    m = nn.macs(arch)
    return LedgerEntry(
        iteration, round_, candidate_id, client_id,
        uplink_bytes=ACC_REPORT_BYTES + (size if uploads_gradient else 0),
        downlink_bytes=size,
        compute_macs=m * train_num * epochs * TRAIN_MAC_FACTOR + m * test_num,
    )


def record_round(iteration: int, round_: int, candidate_id: int, arch: nn.Architecture, clients, epochs: int,
                 dropped_this_round: bool) -> list[LedgerEntry]:
    """Entries for every client of the group that trained ``candidate_id`` this round.

    ``clients`` yields objects with ``client_id``, ``train_num``, ``test_num``.
    """
    clients = list(clients)
    if not clients:
        raise ValueError("a round needs a non-empty group")
    return [
        client_round_entry(iteration, round_, candidate_id, c.client_id, arch, c.train_num, c.test_num, epochs,
                           not dropped_this_round)
        for c in clients
    ]


def distribution_upload(iteration: int, client_id: int, class_count: int) -> LedgerEntry:
    return LedgerEntry(iteration, 0, DISTRIBUTION_UPLOAD, client_id, 4 * class_count, 0, 0)


@dataclass(frozen=True)
class CostSummary:
    total_uplink_bytes: int
    total_downlink_bytes: int
    total_compute_macs: int
    total_compute_seconds: float
    clients: int
    avg_uplink_bytes: float
    avg_downlink_bytes: float
    avg_compute_seconds: float

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def summarize(entries: Iterable[LedgerEntry], seconds_per_mac: float = DEFAULT_SECONDS_PER_MAC) -> CostSummary:
    up = down = compute = 0
    clients = set()
    for e in entries:
        up += e.uplink_bytes
        down += e.downlink_bytes
        compute += e.compute_macs
        clients.add(e.client_id)
    n = len(clients)
    seconds = compute * seconds_per_mac
    return CostSummary(up, down, compute, seconds, n,
                       up / n if n else 0.0, down / n if n else 0.0, seconds / n if n else 0.0)


def to_csv(entries: Sequence[LedgerEntry]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HEADER)
    writer.writerows(astuple(e) for e in entries)
    return buf.getvalue()


def read_csv(text: str) -> list[LedgerEntry]:
    rows = csv.reader(io.StringIO(text))
    header = next(rows)
    if header != HEADER:
        raise ValueError(f"unexpected cost header {header}")
    return [LedgerEntry(*map(int, row)) for row in rows]
