"""Scenario execution: build the network, run it, measure it.

``build_simulation`` turns a parsed scenario into a wired simulation
(topology, genesis, store, nodes, injector); ``run_scenario`` runs one
and returns the metrics row along with the live objects for inspection.
``sweep`` runs a list of scenarios serially and produces detail rows in
deterministic order plus per-scenario mean/stddev summary rows.

Transaction traffic uses one-shot senders: every injected transaction
spends from a fresh procedural-pool account at nonce zero.  This keeps
validity independent of delivery order — reordered transactions from one
sender would otherwise trade nonce conflicts for network noise — so the
experiments isolate the packaging behaviour under study.  Recipients are
drawn from the tail of the pool, senders from the head; the two ranges
never collide.
"""

from __future__ import annotations

import copy
import gc
import math
import statistics
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

from .adversary import DetainingRelay, DoubleSpendLeader, SelfishLeader
from .blocks import Transaction, tx_id
from .ledger import GenesisPool, IncentiveParams, LedgerState, pool_account_id
from .metrics import MetricsCollector, chain_metrics, revenue_by_account
from .netsim import (
    MSG_TXS,
    RngStreams,
    Simulation,
    SimulationError,
    TraceRecorder,
    TX_INJECT,
    assemble_topology,
    build_edges,
)
from .node import HonestNode, NodeConfig, account_for_node
from .pow import HashPower
from .scenario import Scenario
from .store import BlockRecord, BlockStore, ConsensusParams


def with_updates(scenario: Scenario, updates: dict[str, Any]) -> Scenario:
    """Deep copy with dotted-path field overrides, e.g. ``{"chain.capacity": 8}``."""
    out = copy.deepcopy(scenario)
    for path, value in updates.items():
        obj = out
        parts = path.split(".")
        for part in parts[:-1]:
            obj = getattr(obj, part)
        if not hasattr(obj, parts[-1]):
            raise AttributeError(f"scenario has no field {path!r}")
        setattr(obj, parts[-1], value)
    return out


class TxInjector:
    """Deterministic open-loop traffic source.

    Each injecting origin wakes every ``batch_ms`` and emits its share of
    the configured rate (fractional remainders carry over).  The batch is
    handed to the origin node immediately and gossiped to its hop-limited
    neighbourhood.
    """

    def __init__(
        self,
        sim: Simulation,
        nodes: Sequence[HonestNode],
        scenario: Scenario,
        collector: MetricsCollector,
    ):
        inj = scenario.injection
        self.sim = sim
        self.nodes = nodes
        self.collector = collector
        self.origins = list(inj.origins) if inj.origins else list(range(len(nodes)))
        self.batch_ms = inj.batch_ms
        per_second = inj.rate_tps / len(self.origins)
        self.per_batch = per_second * inj.batch_ms / 1000.0
        self._carry = {origin: 0.0 for origin in self.origins}
        self.amount = inj.amount
        self.fee_min = inj.fee_min
        self.fee_max = inj.fee_max
        self.payload = bytes(inj.payload_bytes)
        pool = scenario.genesis.pool_size
        self.recipient_span = min(inj.recipients, pool)
        self.sender_limit = max(pool - self.recipient_span, 0)
        self._next_sender = 0
        self._rng = sim.rng.stream("inject")
        self._pool_size = pool

    def start(self) -> None:
        if self.per_batch <= 0:
            return
        for index, origin in enumerate(self.origins):
            offset = self.batch_ms * index / len(self.origins)
            self.sim.schedule(offset, TX_INJECT, origin, None)

    def on_inject(self, origin: int, payload: Any) -> None:
        carry = self._carry[origin] + self.per_batch
        count = int(carry)
        self._carry[origin] = carry - count
        if count:
            batch = tuple(self._make_tx() for _ in range(count))
            now = self.sim.now
            collector = self.collector
            for tx in batch:
                collector.on_tx_injected(tx_id(tx), now)
            self.nodes[origin].on_deliver(MSG_TXS, (batch, 0), origin)
            self.sim.gossip_txs(origin, batch)
        self.sim.schedule_in(self.batch_ms, TX_INJECT, origin, None)

    def _make_tx(self) -> Transaction:
        index = self._next_sender
        if index >= self.sender_limit:
            raise SimulationError(
                "sender pool exhausted; raise [genesis] pool_size for this run"
            )
        self._next_sender += 1
        uniform = self._rng.random
        recipient = self._pool_size - 1 - int(uniform() * self.recipient_span)
        return Transaction(
            sender=pool_account_id(index),
            recipient=pool_account_id(recipient),
            amount=self.amount,
            fee=self.fee_min + int(uniform() * (self.fee_max - self.fee_min + 1)),
            nonce=0,
            payload_hint=self.payload,
        )


@dataclass
class Build:
    scenario: Scenario
    sim: Simulation
    store: BlockStore
    nodes: list[HonestNode]
    collector: MetricsCollector
    injector: TxInjector
    consensus: ConsensusParams


@dataclass
class RunResult:
    scenario: Scenario
    build: Build
    tip: BlockRecord
    row: dict[str, Any]
    stats: Any

    @property
    def store(self) -> BlockStore:
        return self.build.store

    @property
    def nodes(self) -> list[HonestNode]:
        return self.build.nodes

    @property
    def collector(self) -> MetricsCollector:
        return self.build.collector


def _latency_resolver(scenario: Scenario, rng: RngStreams, edges) -> Callable[[int, int], float]:
    net = scenario.network
    if net.latency == "fixed":
        return lambda u, v: net.latency_ms
    if net.latency == "uniform":
        draw = rng.stream("latency")
        table: dict[tuple[int, int], float] = {}
        for u in range(len(edges)):
            for v in sorted(edges[u]):
                if u < v:
                    table[(u, v)] = draw.uniform(net.latency_min_ms, net.latency_max_ms)
        return lambda u, v: table[(min(u, v), max(u, v))]
    # region: nodes striped across regions, one latency per region pair.
    k = net.region_count
    regions = [i % k for i in range(net.nodes)]

    def region_latency(u: int, v: int) -> float:
        ru, rv = regions[u], regions[v]
        if ru == rv:
            return net.intra_ms
        if k == 1:
            return net.intra_ms
        spread = abs(ru - rv) / (k - 1)
        return net.cross_min_ms + (net.cross_max_ms - net.cross_min_ms) * spread

    return region_latency


def build_simulation(
    scenario: Scenario,
    *,
    collector: MetricsCollector | None = None,
    trace: TraceRecorder | None = None,
) -> Build:
    net = scenario.network
    rng = RngStreams(scenario.run.seed)
    edges = build_edges(net.topology, net.nodes, degree=net.degree, rng=rng.stream("topology"))
    latency_of = _latency_resolver(scenario, rng, edges)
    k = net.region_count
    topology = assemble_topology(edges, latency_of, [i % k for i in range(net.nodes)])

    allocations = {
        account_for_node(index): amount for index, amount in scenario.genesis.fund_nodes
    }
    pool = (
        GenesisPool(scenario.genesis.pool_size, scenario.genesis.pool_balance)
        if scenario.genesis.pool_size
        else None
    )
    genesis_state = LedgerState.genesis(allocations, pool)

    chain = scenario.chain
    consensus = ConsensusParams(
        capacity=chain.capacity,
        micro_tx_cap=chain.micro_tx_cap,
        tenure_ms=chain.tenure_s * 1000.0,
        header_bits=scenario.pow.header_bits,
        micro_bits=scenario.pow.micro_bits,
        incentives=IncentiveParams(chain.block_reward, chain.leader_fee_share),
        macro_tx_cap=chain.macro_tx_cap or None,
        verify_pow=False,
    )
    # A double-spend race keeps a private fork alive while the public
    # chain marches on, so the store must retain fork-base state for the
    # whole span the attacker is allowed to chase.
    retain_depth = 12
    if scenario.attack.kind == "doublespend":
        retain_depth = max(
            retain_depth,
            scenario.attack.give_up_gap + scenario.attack.max_tracked_depth + 8,
        )
    store = BlockStore(genesis_state, consensus, retain_depth=retain_depth)
    hop_limit = scenario.gossip.tx_hop_limit or net.nodes
    sim = Simulation(
        topology, rng, tx_hop_limit=hop_limit, jitter_ms=net.jitter_ms, trace=trace
    )
    collector = collector or MetricsCollector(scenario.injection.sample_every)

    attack = scenario.attack
    total_header_rate = (1 << scenario.pow.header_bits) / scenario.pow.header_interval_s
    micro_rate = (1 << scenario.pow.micro_bits) / scenario.pow.micro_interval_s
    split_power = attack.kind != "none" and attack.alpha > 0

    overrides = {o.id: o for o in scenario.nodes}
    nodes: list[HonestNode] = []
    for index in range(net.nodes):
        if split_power:
            if index == attack.node:
                rate = attack.alpha * total_header_rate
            else:
                rate = (1 - attack.alpha) * total_header_rate / (net.nodes - 1)
        else:
            rate = total_header_rate / net.nodes
        override = overrides.get(index)
        cfg = NodeConfig(
            account=account_for_node(index),
            header_power=HashPower(rate),
            micro_power=HashPower(micro_rate),
            mempool_size=(
                override.mempool_size
                if override and override.mempool_size > 0
                else scenario.mempool.size
            ),
            selection=(
                override.selection
                if override and override.selection
                else scenario.mempool.selection
            ),
            grace_ms=chain.grace_s * 1000.0,
        )
        if index == attack.node and attack.kind == "selfish":
            node: HonestNode = SelfishLeader(index, sim, store, consensus, cfg, collector)
        elif index == attack.node and attack.kind == "doublespend":
            funded = dict(scenario.genesis.fund_nodes)
            if funded.get(index, 0) <= 0:
                raise ValueError(
                    "[attack] doublespend requires the attacking node to be "
                    "funded via [genesis] fund_nodes"
                )
            node = DoubleSpendLeader(
                index,
                sim,
                store,
                consensus,
                cfg,
                collector,
                victim=account_for_node(attack.victim_node),
                spend_amount=attack.spend_amount,
                spend_fee=attack.spend_fee,
                give_up_gap=attack.give_up_gap,
                max_tracked_depth=attack.max_tracked_depth,
            )
        elif index == attack.node and attack.kind == "detain":
            node = DetainingRelay(
                index, sim, store, consensus, cfg, collector, detain_ms=attack.detain_ms
            )
        else:
            node = HonestNode(index, sim, store, consensus, cfg, collector)
        sim.nodes[index] = node
        nodes.append(node)

    injector = TxInjector(sim, nodes, scenario, collector)
    sim.injector = injector

    for override in scenario.nodes:
        target = nodes[override.id]
        if override.crash_at_s >= 0:
            sim.call_at(
                override.crash_at_s * 1000.0, f"crash/{override.id}", target.crash
            )
        if override.recover_at_s >= 0:
            sim.call_at(
                override.recover_at_s * 1000.0, f"recover/{override.id}", target.recover
            )

    return Build(scenario, sim, store, nodes, collector, injector, consensus)


def choose_final_tip(build: Build) -> BlockRecord:
    """The chain the (honest, online) network settled on."""
    attack = build.scenario.attack
    exclude = {attack.node} if attack.kind in ("selfish", "doublespend") else set()
    candidates = [
        node.tip
        for node in build.nodes
        if node.node_id not in exclude and not node.down
    ]
    if not candidates:
        candidates = [build.store.best]
    return min(candidates, key=lambda rec: rec.key)


def run_scenario(
    scenario: Scenario,
    *,
    collector: MetricsCollector | None = None,
    trace_path: str | None = None,
    keep_trace: bool = False,
    pre_run: Callable[[Build], None] | None = None,
) -> RunResult:
    start_wall = time.monotonic()
    trace = TraceRecorder(keep_events=keep_trace, path=trace_path)
    trace.open()
    # The event loop allocates millions of short-lived tuples that the
    # cyclic collector keeps re-scanning; reference counting alone
    # reclaims them, so pausing the collector roughly halves run time.
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        build = build_simulation(scenario, collector=collector, trace=trace)
        if pre_run is not None:
            pre_run(build)
        for node in build.nodes:
            node.start()
        build.injector.start()
        stats = build.sim.run_until(
            scenario.run.duration_s * 1000.0, expect_idle=scenario.run.expect_idle
        )
    finally:
        trace.close()
        if gc_was_enabled:
            gc.enable()
    tip = choose_final_tip(build)
    row = chain_metrics(
        scenario,
        build.store,
        build.collector,
        tip,
        duration_s=scenario.run.duration_s,
        events=stats.events,
        trace_hash=stats.trace_hash,
        wall_s=time.monotonic() - start_wall,
        headers_mined=sum(node.headers_mined for node in build.nodes),
    )
    return RunResult(scenario, build, tip, row, stats)


def sweep(
    scenarios: Iterable[Scenario],
    *,
    on_result: Callable[[RunResult], None] | None = None,
) -> list[dict[str, Any]]:
    """Run scenarios serially; detail rows sorted, then summary rows."""
    rows = []
    for scenario in scenarios:
        result = run_scenario(scenario)
        rows.append(result.row)
        if on_result is not None:
            on_result(result)
        # The run's object graph (nodes <-> simulation, stores full of
        # blocks) is cyclic, so without an explicit collection each
        # finished run would linger until the allocator happens to trip
        # a threshold — several queued-up runs can exhaust memory.
        del result
        gc.collect()
    rows.sort(key=lambda r: (r["scenario"], r["seed"]))
    summaries = summarize_rows(rows)
    return rows + summaries


_SUMMARY_SKIP = {"scenario", "seed", "trace_hash", "supply_ok", "selection"}


def summarize_rows(rows: Sequence[dict[str, Any]]) -> list[dict[str, Any]]:
    """Per-scenario mean and stddev over numeric columns."""
    by_name: dict[str, list[dict]] = {}
    for row in rows:
        by_name.setdefault(row["scenario"], []).append(row)
    out = []
    for name in sorted(by_name):
        group = by_name[name]
        mean_row: dict[str, Any] = {"scenario": f"{name}:mean", "seed": len(group)}
        sd_row: dict[str, Any] = {"scenario": f"{name}:stddev", "seed": len(group)}
        for key, value in group[0].items():
            if key in _SUMMARY_SKIP or not isinstance(value, (int, float)) or isinstance(value, bool):
                continue
            values = [float(r[key]) for r in group]
            mean_row[key] = statistics.fmean(values)
            sd_row[key] = statistics.stdev(values) if len(values) > 1 else 0.0
        out.append(mean_row)
        if len(group) > 1:
            out.append(sd_row)
    return out


# -- attack summaries -----------------------------------------------------------


def selfish_summary(result: RunResult) -> dict[str, Any]:
    scenario = result.scenario
    attacker = result.nodes[scenario.attack.node]
    records = [rec for rec in result.store.iter_chain(result.tip) if rec.parent_id]
    attacker_blocks = sum(
        1 for rec in records if rec.block.header.miner == attacker.account
    )
    revenue = revenue_by_account(records)
    total_revenue = sum(revenue.values())
    share = revenue.get(attacker.account, 0) / total_revenue if total_revenue else 0.0
    return {
        "scenario": scenario.name,
        "seed": scenario.run.seed,
        "alpha": scenario.attack.alpha,
        "blocks": len(records),
        "attacker_blocks": attacker_blocks,
        "attacker_block_share": attacker_blocks / len(records) if records else 0.0,
        "attacker_revenue_share": share,
        "leads": attacker.leads,
        "kept": attacker.kept,
        "abandoned": attacker.abandoned,
    }


SELFISH_COLUMNS = (
    "scenario", "seed", "alpha", "blocks", "attacker_blocks",
    "attacker_block_share", "attacker_revenue_share", "leads", "kept", "abandoned",
)


def doublespend_summary(
    result: RunResult, depths: Sequence[int] = (0, 1, 2, 4, 6)
) -> dict[str, Any]:
    scenario = result.scenario
    attacker = result.nodes[scenario.attack.node]
    row: dict[str, Any] = {
        "scenario": scenario.name,
        "seed": scenario.run.seed,
        "alpha": scenario.attack.alpha,
        "trials": len(attacker.outcomes),
        "void_trials": attacker.void_trials,
        "gave_up": sum(1 for o in attacker.outcomes if o.gave_up),
    }
    for depth in depths:
        row[f"success_at_{depth}"] = attacker.success_rate_at(depth)
    return row


def doublespend_columns(depths: Sequence[int] = (0, 1, 2, 4, 6)) -> tuple[str, ...]:
    return (
        "scenario", "seed", "alpha", "trials", "void_trials", "gave_up",
        *(f"success_at_{d}" for d in depths),
    )


# -- crash/recovery trials ----------------------------------------------------------


@dataclass
class CrashTrials:
    durations_s: list[float]
    window_s: float
    recover_times_s: list[float]
    result: RunResult

    @property
    def all_within_window(self) -> bool:
        return all(d <= self.window_s for d in self.durations_s)


def run_crash_trials(
    scenario: Scenario,
    node_id: int,
    *,
    cycles: int,
    up_s: float,
    down_s: float,
    settle_s: float = 300.0,
    tail_s: float = 300.0,
) -> CrashTrials:
    """Crash one node repeatedly and measure how fast it rejoins.

    Recovery is judged against the best chain any other online node had
    adopted at the moment of recovery: the node has recovered once it
    adopts a chain at least that good.  The pass window is one tenure
    plus grace (a round already in flight) plus three per-node mean
    header mining times.
    """
    period = up_s + down_s
    duration = settle_s + cycles * period + tail_s
    scenario = with_updates(scenario, {"run.duration_s": duration})
    crash_times = [settle_s + k * period for k in range(cycles)]
    recover_times = [t + down_s for t in crash_times]

    def schedule(build: Build) -> None:
        target = build.nodes[node_id]
        for t in crash_times:
            build.sim.call_at(t * 1000.0, f"crash/{node_id}", target.crash)
        for t in recover_times:
            build.sim.call_at(t * 1000.0, f"recover/{node_id}", target.recover)

    result = run_scenario(scenario, pre_run=schedule)
    store = result.store
    log = result.collector.adoption_log  # chronological

    genesis_key = store.genesis_record.key
    n = scenario.network.nodes
    series: dict[int, list[tuple[float, Any]]] = {i: [(0.0, genesis_key)] for i in range(n)}
    for t_ms, node, block_id in log:
        series[node].append((t_ms, store.records[block_id].key))

    def key_at(node: int, t_ms: float):
        best = genesis_key
        for when, key in series[node]:
            if when > t_ms:
                break
            best = key
        return best

    durations: list[float] = []
    for recover_s in recover_times:
        r_ms = recover_s * 1000.0
        target_key = min(
            key_at(other, r_ms) for other in range(n) if other != node_id
        )
        if not (key_at(node_id, r_ms) > target_key):
            durations.append(0.0)
            continue
        caught = math.inf
        for when, key in series[node_id]:
            if when >= r_ms and key <= target_key:
                caught = (when - r_ms) / 1000.0
                break
        durations.append(caught)

    per_node_header_s = scenario.pow.header_interval_s * n
    window = scenario.chain.tenure_s + scenario.chain.grace_s + 3 * per_node_header_s
    return CrashTrials(durations, window, recover_times, result)


@dataclass
class LeaderCrashTrial:
    leader: int
    round_start_ms: float
    crash_ms: float
    recover_ms: float
    target_height: int
    deadline_ms: float
    recovered_ms: float = math.inf

    @property
    def recovered(self) -> bool:
        return self.recovered_ms <= self.deadline_ms

    @property
    def recovery_s(self) -> float:
        return (self.recovered_ms - self.round_start_ms) / 1000.0


@dataclass
class LeaderCrashReport:
    trials: list[LeaderCrashTrial]
    window_s: float
    result: RunResult

    @property
    def all_recovered(self) -> bool:
        return bool(self.trials) and all(t.recovered for t in self.trials)


class _LeaderCrashCollector(MetricsCollector):
    """Crashes round leaders just before they package, then watches.

    Each eligible leader round becomes a trial: the leader is crashed one
    second before its tenure ends, so the header it won with never turns
    into a macroblock and the rest of the network must expire the round
    and re-elect.  Trials are spaced out so each one starts from a settled
    chain, and none is armed so late that its window would be truncated
    by the end of the run.
    """

    def __init__(
        self,
        sample_every: int,
        *,
        max_trials: int,
        tenure_ms: float,
        crash_lead_ms: float,
        down_ms: float,
        cooldown_ms: float,
        window_ms: float,
        duration_ms: float,
    ):
        super().__init__(sample_every)
        self.max_trials = max_trials
        self.tenure_ms = tenure_ms
        self.crash_lead_ms = crash_lead_ms
        self.down_ms = down_ms
        self.cooldown_ms = cooldown_ms
        self.window_ms = window_ms
        self.duration_ms = duration_ms
        self.build: Build | None = None
        self.crash_trials: list[LeaderCrashTrial] = []
        self._next_ok_ms = 0.0

    def bind(self, build: Build) -> None:
        self.build = build

    def on_round_started(self, node_id, header, now_ms, is_leader) -> None:
        super().on_round_started(node_id, header, now_ms, is_leader)
        if not is_leader or self.build is None:
            return
        if len(self.crash_trials) >= self.max_trials or now_ms < self._next_ok_ms:
            return
        if now_ms + self.window_ms > self.duration_ms:
            return
        node = self.build.nodes[node_id]
        crash_ms = now_ms + self.tenure_ms - self.crash_lead_ms
        recover_ms = crash_ms + self.down_ms
        trial = LeaderCrashTrial(
            leader=node_id,
            round_start_ms=now_ms,
            crash_ms=crash_ms,
            recover_ms=recover_ms,
            target_height=node.tip.height + 1,
            deadline_ms=now_ms + self.window_ms,
        )
        self.crash_trials.append(trial)
        index = len(self.crash_trials)
        sim = self.build.sim
        sim.call_at(crash_ms, f"leader-crash/{index}", node.crash)
        sim.call_at(recover_ms, f"leader-recover/{index}", node.recover)
        self._next_ok_ms = recover_ms + self.cooldown_ms


def run_leader_crash_trials(
    scenario: Scenario,
    *,
    trials: int = 100,
    crash_lead_s: float = 1.0,
    down_s: float | None = None,
    cooldown_s: float | None = None,
) -> LeaderCrashReport:
    """Crash the elected leader mid-round, repeatedly; measure recovery.

    A trial succeeds when every other node adopts a block at the height
    the crashed leader would have produced, within one expiration window
    (tenure + grace) plus three times the per-node mean header mining
    time, all measured from the crashed round's start.
    """
    n = scenario.network.nodes
    tenure_s = scenario.chain.tenure_s
    window_s = tenure_s + scenario.chain.grace_s + 3 * scenario.pow.header_interval_s * n
    if down_s is None:
        down_s = tenure_s
    if cooldown_s is None:
        cooldown_s = tenure_s + 2 * scenario.pow.header_interval_s

    collector = _LeaderCrashCollector(
        scenario.injection.sample_every,
        max_trials=trials,
        tenure_ms=tenure_s * 1000.0,
        crash_lead_ms=crash_lead_s * 1000.0,
        down_ms=down_s * 1000.0,
        cooldown_ms=cooldown_s * 1000.0,
        window_ms=window_s * 1000.0,
        duration_ms=scenario.run.duration_s * 1000.0,
    )
    result = run_scenario(scenario, collector=collector, pre_run=collector.bind)

    store = result.store
    heights: dict[int, list[tuple[float, int]]] = {i: [] for i in range(n)}
    for t_ms, node, block_id in result.collector.adoption_log:
        heights[node].append((t_ms, store.records[block_id].height))

    def first_reach(node: int, target: int, not_before_ms: float) -> float:
        for when, height in heights[node]:
            if when >= not_before_ms and height >= target:
                return when
        return math.inf

    for trial in collector.crash_trials:
        trial.recovered_ms = max(
            first_reach(other, trial.target_height, trial.round_start_ms)
            for other in range(n)
            if other != trial.leader
        )
    return LeaderCrashReport(collector.crash_trials, window_s, result)
