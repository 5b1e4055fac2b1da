"""Run measurement: counters, latency sampling, and CSV rows.

All chain-derived numbers come from the *chosen* chain at the end of the
run — blocks that lost fork choice contribute to fork statistics only.
Two throughput figures are reported side by side: ``total_tps`` counts
every packaged transaction including duplicate inclusions, which is what
raw block capacity supports; ``distinct_tps`` counts only transactions
with a valid verdict, i.e. the non-overlapping work the ledger actually
settled.  Their gap is the price of uncoordinated microblock packing.

Latency is tracked on a deterministic sample of injected transactions
(every Nth) to keep memory flat: queueing time runs from injection to
the first microblock that packages the transaction, inclusion time from
that microblock to the chosen-chain macroblock applying it.

CSV output is byte-stable: fixed column order, floats via ``repr``, rows
in deterministic order.  Identical runs produce identical files.
"""

from __future__ import annotations

import csv
import statistics
from typing import Any, Iterable, Sequence

from .blocks import Macroblock, Microblock, TX_BASE_SIZE, MICRO_HEADER_SIZE, HEADER_SIZE
from .chain import Verdict
from .store import BlockRecord, BlockStore, ConsensusParams


class MetricsCollector:
    """Event hooks shared by every node and the transaction injector."""

    def __init__(self, sample_every: int = 0):
        self.sample_every = int(sample_every)
        # txid -> [injected_ms, first_packaged_ms | None]
        self.sampled: dict[bytes, list] = {}
        self.injected = 0
        self.rounds_started = 0
        self.rounds_expired = 0
        self.micros_mined = 0
        self.blocks_assembled = 0
        # (time_ms, node_id, block_id) for every tip adoption.
        self.adoption_log: list[tuple[float, int, bytes]] = []

    # -- injector side ----------------------------------------------------

    def on_tx_injected(self, txid: bytes, now_ms: float) -> None:
        self.injected += 1
        stride = self.sample_every
        if stride and self.injected % stride == 0:
            self.sampled[txid] = [now_ms, None]

    # -- node side ---------------------------------------------------------

    def on_round_started(self, node_id: int, header, now_ms: float, is_leader: bool) -> None:
        if is_leader:
            self.rounds_started += 1

    def on_round_expired(self, node_id: int, now_ms: float) -> None:
        self.rounds_expired += 1

    def on_micro_mined(self, node_id: int, micro: Microblock, now_ms: float) -> None:
        self.micros_mined += 1
        if self.sampled:
            sampled = self.sampled
            for txid in micro.tx_ids():
                entry = sampled.get(txid)
                if entry is not None and entry[1] is None:
                    entry[1] = now_ms

    def on_block_assembled(self, node_id: int, block: Macroblock, now_ms: float) -> None:
        self.blocks_assembled += 1

    def on_tip_adopted(self, node_id: int, record: BlockRecord, now_ms: float) -> None:
        self.adoption_log.append((now_ms, node_id, record.block_id))


def expected_full_block_bytes(params: ConsensusParams, payload_bytes: int = 0) -> int:
    """Wire size of a macroblock packed to capacity with full microblocks."""
    tx_bytes = TX_BASE_SIZE + payload_bytes
    micro_bytes = MICRO_HEADER_SIZE + 4 + params.micro_tx_cap * tx_bytes
    signature_bytes = 32  # the bundled scheme emits one digest
    return HEADER_SIZE + 2 + signature_bytes + 4 + params.capacity * micro_bytes


def _quantile(sorted_values: Sequence[float], q: float) -> float:
    if not sorted_values:
        return 0.0
    if len(sorted_values) == 1:
        return sorted_values[0]
    pos = q * (len(sorted_values) - 1)
    low = int(pos)
    high = min(low + 1, len(sorted_values) - 1)
    frac = pos - low
    return sorted_values[low] * (1 - frac) + sorted_values[high] * frac


def chain_metrics(
    scenario: Any,
    store: BlockStore,
    collector: MetricsCollector,
    tip: BlockRecord,
    *,
    duration_s: float,
    events: int,
    trace_hash: str,
    wall_s: float,
    headers_mined: int,
) -> dict[str, Any]:
    """One flat metrics row for a finished run, judged at ``tip``."""
    records = [rec for rec in store.iter_chain(tip) if rec.parent_id is not None]
    raw = sum(rec.raw_tx_count for rec in records)
    verdicts = {v: 0 for v in Verdict}
    for rec in records:
        for verdict, count in rec.verdict_counts.items():
            verdicts[verdict] += count
    distinct = tip.diversity
    micros_packaged = sum(len(rec.block.microblocks) for rec in records)
    block_bytes = [rec.block.byte_size for rec in records]
    reward_total = sum(amount for rec in records for _, amount in rec.rewards)

    queueing: list[float] = []
    inclusion: list[float] = []
    totals: list[float] = []
    sampled = collector.sampled
    if sampled:
        for rec in records:
            arrival = rec.arrival_ms
            for txid in rec.valid_ids:
                entry = sampled.get(txid)
                if entry is None or entry[1] is None:
                    continue
                injected_ms, packaged_ms = entry
                queueing.append((packaged_ms - injected_ms) / 1000.0)
                inclusion.append((arrival - packaged_ms) / 1000.0)
                totals.append((arrival - injected_ms) / 1000.0)
    totals.sort()

    params = store.params
    expected_bytes = expected_full_block_bytes(
        params, getattr(scenario.injection, "payload_bytes", 0)
    )
    blocks = len(records)
    supply_ok = tip.supply == store.expected_supply(tip)

    return {
        "scenario": scenario.name,
        "seed": scenario.run.seed,
        "duration_s": duration_s,
        "nodes": scenario.network.nodes,
        "capacity": params.capacity,
        "micro_tx_cap": params.micro_tx_cap,
        "tenure_s": params.tenure_ms / 1000.0,
        "header_interval_s": scenario.pow.header_interval_s,
        "micro_interval_s": scenario.pow.micro_interval_s,
        "tx_hop_limit": scenario.gossip.tx_hop_limit,
        "selection": scenario.mempool.selection,
        "injected_tx": collector.injected,
        "blocks": blocks,
        "reorgs": store.reorg_count,
        "max_reorg_depth": store.max_reorg_depth,
        "orphan_records": len(store.records) - 1 - tip.height,
        "rounds_started": collector.rounds_started,
        "rounds_expired": collector.rounds_expired,
        "headers_mined": headers_mined,
        "micros_mined": collector.micros_mined,
        "micros_packaged": micros_packaged,
        "blocks_assembled": collector.blocks_assembled,
        "raw_tx_included": raw,
        "distinct_valid_tx": distinct,
        "verdict_valid": verdicts[Verdict.VALID],
        "verdict_duplicate": verdicts[Verdict.DUPLICATE_OVERLAP],
        "verdict_nonce": verdicts[Verdict.NONCE_CONFLICT],
        "verdict_balance": verdicts[Verdict.INSUFFICIENT_BALANCE],
        "duplicate_share": (verdicts[Verdict.DUPLICATE_OVERLAP] / raw) if raw else 0.0,
        "total_tps": raw / duration_s if duration_s else 0.0,
        "distinct_tps": distinct / duration_s if duration_s else 0.0,
        "mean_micros_per_block": micros_packaged / blocks if blocks else 0.0,
        "mean_block_bytes": sum(block_bytes) / blocks if blocks else 0.0,
        "expected_full_block_bytes": expected_bytes,
        "mean_block_txs": raw / blocks if blocks else 0.0,
        "lat_samples": len(totals),
        "mean_queue_s": statistics.fmean(queueing) if queueing else 0.0,
        "mean_inclusion_s": statistics.fmean(inclusion) if inclusion else 0.0,
        "mean_latency_s": statistics.fmean(totals) if totals else 0.0,
        "p50_latency_s": _quantile(totals, 0.50),
        "p90_latency_s": _quantile(totals, 0.90),
        "supply_ok": supply_ok,
        "reward_total": reward_total,
        "events": events,
        "trace_hash": trace_hash,
        "wall_s": wall_s,
    }


METRICS_COLUMNS: tuple[str, ...] = (
    "scenario", "seed", "duration_s", "nodes", "capacity", "micro_tx_cap",
    "tenure_s", "header_interval_s", "micro_interval_s", "tx_hop_limit",
    "selection", "injected_tx", "blocks", "reorgs", "max_reorg_depth",
    "orphan_records", "rounds_started", "rounds_expired", "headers_mined",
    "micros_mined", "micros_packaged", "blocks_assembled", "raw_tx_included",
    "distinct_valid_tx", "verdict_valid", "verdict_duplicate", "verdict_nonce",
    "verdict_balance", "duplicate_share", "total_tps", "distinct_tps",
    "mean_micros_per_block", "mean_block_bytes", "expected_full_block_bytes",
    "mean_block_txs", "lat_samples", "mean_queue_s", "mean_inclusion_s",
    "mean_latency_s", "p50_latency_s", "p90_latency_s", "supply_ok",
    "reward_total", "events", "trace_hash",
)


def format_cell(value: Any) -> str:
    """Deterministic text form: repr for floats, plain str otherwise."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_rows(path: str, rows: Iterable[dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_cell(row.get(col, "")) for col in columns])


def read_rows(path: str) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def revenue_by_account(records: Iterable[BlockRecord]) -> dict[bytes, int]:
    """Total settled income per account over the given chain records."""
    totals: dict[bytes, int] = {}
    for rec in records:
        for account, amount in rec.rewards:
            totals[account] = totals.get(account, 0) + amount
    return totals
