"""Harness tests: scenario wiring, injection, runs, sweeps, crash trials."""

import pytest

from bilayer.adversary import DetainingRelay, DoubleSpendLeader, SelfishLeader
from bilayer.blocks import DEFAULT_SIGNATURES, Macroblock, MacroblockHeader, signing_message
from bilayer.harness import (
    SELFISH_COLUMNS,
    build_simulation,
    choose_final_tip,
    doublespend_columns,
    doublespend_summary,
    run_crash_trials,
    run_leader_crash_trials,
    run_scenario,
    selfish_summary,
    summarize_rows,
    sweep,
    with_updates,
)
from bilayer.metrics import METRICS_COLUMNS
from bilayer.netsim import SimulationError
from bilayer.node import HonestNode, account_for_node
from bilayer.scenario import NodeOverride, parse_scenario

X = b"\xee" * 32

TINY = """
[meta]
name = tiny
[network]
nodes = 6
topology = random
degree = 3
latency = fixed
latency_ms = 20
[pow]
header_interval_s = 30
micro_interval_s = 15
header_bits = 10
micro_bits = 6
[chain]
capacity = 4
micro_tx_cap = 50
tenure_s = 40
grace_s = 2
[mempool]
size = 5000
[genesis]
pool_size = 100000
[injection]
rate_tps = 60
batch_ms = 500
recipients = 500
sample_every = 7
[run]
duration_s = 240
seed = 5
"""


def tiny(**updates):
    scenario = parse_scenario(TINY)
    return with_updates(scenario, updates) if updates else scenario


def empty_block(record, miner, *, bits=10):
    header = MacroblockHeader(
        version=1,
        height=record.height + 1,
        prev_hash=record.block.header.hash(),
        state_root=record.root,
        timestamp_ms=0,
        difficulty_bits=bits,
        miner=miner,
        nonce=0,
    )
    unsigned = Macroblock(header, (), b"")
    signature = DEFAULT_SIGNATURES.sign(miner, signing_message(unsigned))
    return Macroblock(header, (), signature)


class TestWithUpdates:
    def test_overrides_nested_fields_without_touching_base(self):
        base = tiny()
        out = with_updates(base, {"chain.capacity": 9, "run.seed": 77})
        assert (out.chain.capacity, out.run.seed) == (9, 77)
        assert (base.chain.capacity, base.run.seed) == (4, 5)

    def test_unknown_field_raises(self):
        with pytest.raises(AttributeError, match="no field"):
            with_updates(tiny(), {"chain.bogus": 1})


class TestTxInjector:
    def test_fractional_rate_carries_over(self):
        scenario = tiny()
        scenario.injection.rate_tps = 3
        scenario.injection.origins = (0,)
        build = build_simulation(scenario)
        injector = build.injector
        assert injector.per_batch == pytest.approx(1.5)
        injector.on_inject(0, None)
        injector.on_inject(0, None)
        assert injector._next_sender == 3
        assert len(build.nodes[0].mempool) == 3

    def test_senders_are_one_shot(self):
        scenario = tiny()
        scenario.injection.rate_tps = 20
        scenario.injection.origins = (0,)
        build = build_simulation(scenario)
        build.injector.on_inject(0, None)
        txs = [tx for tx, _ in build.nodes[0].mempool.entries.values()]
        assert len(txs) == 10
        assert len({tx.sender for tx in txs}) == 10
        assert all(tx.nonce == 0 for tx in txs)
        assert all(1 <= tx.fee <= 10 for tx in txs)

    def test_sender_pool_exhaustion_is_loud(self):
        scenario = tiny()
        scenario.genesis.pool_size = 40
        scenario.injection.recipients = 20
        scenario.injection.rate_tps = 100
        scenario.injection.batch_ms = 1000
        scenario.injection.origins = (0,)
        build = build_simulation(scenario)
        with pytest.raises(SimulationError, match="pool exhausted"):
            build.injector.on_inject(0, None)


class TestBuildSimulation:
    def test_even_power_split_without_attack(self):
        build = build_simulation(tiny())
        total = (1 << 10) / 30
        rates = [node.cfg.header_power.rate for node in build.nodes]
        assert all(rate == pytest.approx(total / 6) for rate in rates)
        assert all(type(node) is HonestNode for node in build.nodes)

    def test_attacker_gets_alpha_share_of_power(self):
        scenario = tiny()
        scenario.attack.kind = "selfish"
        scenario.attack.node = 2
        scenario.attack.alpha = 0.25
        build = build_simulation(scenario)
        total = (1 << 10) / 30
        assert isinstance(build.nodes[2], SelfishLeader)
        assert build.nodes[2].cfg.header_power.rate == pytest.approx(0.25 * total)
        assert build.nodes[0].cfg.header_power.rate == pytest.approx(0.75 * total / 5)

    def test_doublespend_requires_funding(self):
        scenario = tiny()
        scenario.attack.kind = "doublespend"
        scenario.attack.alpha = 0.2
        with pytest.raises(ValueError, match="fund_nodes"):
            build_simulation(scenario)
        scenario.genesis.fund_nodes = ((0, 500),)
        build = build_simulation(scenario)
        attacker = build.nodes[0]
        assert isinstance(attacker, DoubleSpendLeader)
        assert attacker.victim == account_for_node(1)
        state = build.store.state_view(build.store.genesis_record)
        assert state.get(account_for_node(0)).balance == 500

    def test_detaining_relay_wiring(self):
        scenario = tiny()
        scenario.attack.kind = "detain"
        scenario.attack.node = 1
        scenario.attack.detain_ms = 250
        build = build_simulation(scenario)
        assert isinstance(build.nodes[1], DetainingRelay)
        assert build.nodes[1].detain_ms == 250

    def test_hop_limit_zero_means_flood(self):
        assert build_simulation(tiny()).sim.tx_hop_limit == 2
        scenario = tiny()
        scenario.gossip.tx_hop_limit = 0
        assert build_simulation(scenario).sim.tx_hop_limit == 6

    def test_node_overrides_apply(self):
        scenario = tiny()
        scenario.nodes = (NodeOverride(id=3, selection="fee", mempool_size=123),)
        build = build_simulation(scenario)
        assert build.nodes[3].cfg.selection == "fee"
        assert build.nodes[3].mempool.max_size == 123
        assert build.nodes[0].cfg.selection == "random"
        assert build.nodes[0].mempool.max_size == 5000

    def test_crash_and_recover_schedules(self):
        scenario = tiny()
        scenario.nodes = (NodeOverride(id=4, crash_at_s=1.0, recover_at_s=2.0),)
        build = build_simulation(scenario)
        build.sim.run_until(1_500.0, expect_idle=True)
        assert build.nodes[4].down
        build.sim.run_until(2_500.0, expect_idle=True)
        assert not build.nodes[4].down


class TestChooseFinalTip:
    def test_prefers_best_online_honest_tip(self):
        build = build_simulation(tiny())
        record = build.store.register_block(
            empty_block(build.store.genesis_record, X), local_time_ms=0.0
        ).record
        build.nodes[0].tip = record
        assert choose_final_tip(build) is record
        build.nodes[0].down = True
        assert choose_final_tip(build) is build.store.genesis_record

    def test_attacker_tip_is_ignored(self):
        scenario = tiny()
        scenario.attack.kind = "selfish"
        scenario.attack.alpha = 0.25
        build = build_simulation(scenario)
        record = build.store.register_block(
            empty_block(build.store.genesis_record, X), local_time_ms=0.0
        ).record
        build.nodes[0].tip = record  # the attacker's private view
        assert choose_final_tip(build) is build.store.genesis_record


class TestRunScenario:
    def test_chain_grows_and_row_is_consistent(self):
        result = run_scenario(tiny())
        row = result.row
        # wall_s rides on the row for progress reporting but stays out of
        # the CSV schema so repeated runs serialize byte-identically.
        assert set(row) - set(METRICS_COLUMNS) == {"wall_s"}
        assert set(METRICS_COLUMNS) <= set(row)
        assert result.tip.height >= 2
        assert row["blocks"] == result.tip.height
        assert row["scenario"] == "tiny"
        assert 13_000 <= row["injected_tx"] <= 14_500
        assert row["distinct_tps"] > 0
        assert row["total_tps"] >= row["distinct_tps"]
        assert row["supply_ok"] is True
        assert row["lat_samples"] > 0
        assert row["mean_latency_s"] == pytest.approx(
            row["mean_queue_s"] + row["mean_inclusion_s"], rel=1e-6
        )

    def test_double_run_is_deterministic(self):
        one = run_scenario(tiny())
        two = run_scenario(tiny())
        assert one.stats.trace_hash == two.stats.trace_hash
        filtered = lambda row: {k: v for k, v in row.items() if k != "wall_s"}
        assert filtered(one.row) == filtered(two.row)


class TestSweepAndSummaries:
    def test_summarize_rows_means_and_stddevs(self):
        rows = [
            {"scenario": "a", "seed": 1, "x": 1.0, "flag": True, "trace_hash": "t1"},
            {"scenario": "a", "seed": 2, "x": 3.0, "flag": False, "trace_hash": "t2"},
            {"scenario": "b", "seed": 1, "x": 9.0, "flag": True, "trace_hash": "t3"},
        ]
        summaries = summarize_rows(rows)
        assert [row["scenario"] for row in summaries] == ["a:mean", "a:stddev", "b:mean"]
        assert summaries[0]["x"] == pytest.approx(2.0)
        assert summaries[0]["seed"] == 2  # group size, not a seed
        assert summaries[1]["x"] == pytest.approx(2.0 ** 0.5)
        assert "flag" not in summaries[0]
        assert "trace_hash" not in summaries[0]

    def test_sweep_sorts_details_then_appends_summaries(self):
        short = {"run.duration_s": 120.0}
        scenarios = [
            tiny(**short, **{"run.seed": 8}),
            tiny(**short, **{"run.seed": 7}),
        ]
        rows = sweep(scenarios)
        assert [row["scenario"] for row in rows] == [
            "tiny", "tiny", "tiny:mean", "tiny:stddev"
        ]
        assert [row["seed"] for row in rows[:2]] == [7, 8]


class TestAttackRuns:
    def test_selfish_run_summary(self):
        scenario = tiny(**{"run.duration_s": 800.0, "injection.rate_tps": 30})
        scenario.attack.kind = "selfish"
        scenario.attack.alpha = 0.3
        result = run_scenario(scenario)
        summary = selfish_summary(result)
        assert tuple(summary) == SELFISH_COLUMNS
        assert summary["blocks"] == result.tip.height
        assert 0.0 <= summary["attacker_revenue_share"] <= 1.0
        assert summary["kept"] + summary["abandoned"] <= summary["leads"]
        # The chosen chain is the honest network's view.
        attacker = result.nodes[0]
        assert all(
            block_id not in attacker._unreleased
            for block_id in result.store.chain_ids(result.tip)
        )

    def test_doublespend_run_summary(self):
        scenario = tiny(**{"run.duration_s": 800.0, "injection.rate_tps": 30})
        scenario.attack.kind = "doublespend"
        scenario.attack.alpha = 0.25
        scenario.genesis.fund_nodes = ((0, 100_000),)
        result = run_scenario(scenario)
        summary = doublespend_summary(result)
        assert tuple(summary) == doublespend_columns()
        assert summary["trials"] >= 0 and summary["void_trials"] >= 0
        rates = [summary[f"success_at_{d}"] for d in (0, 1, 2, 4, 6)]
        assert all(0.0 <= rate <= 1.0 for rate in rates)
        assert rates == sorted(rates, reverse=True)


class TestCrashTrials:
    def test_repeated_crashes_recover_within_window(self):
        trials = run_crash_trials(
            tiny(**{"injection.rate_tps": 30}),
            3,
            cycles=2,
            up_s=100.0,
            down_s=50.0,
            settle_s=120.0,
            tail_s=200.0,
        )
        assert trials.window_s == pytest.approx(40 + 2 + 3 * 30 * 6)
        assert len(trials.durations_s) == 2
        assert trials.all_within_window

    def test_leader_crash_trials_reelect_within_window(self):
        scenario = tiny(**{"run.duration_s": 1_000.0, "injection.rate_tps": 30})
        report = run_leader_crash_trials(scenario, trials=2)
        assert report.window_s == pytest.approx(40 + 2 + 3 * 30 * 6)
        assert 1 <= len(report.trials) <= 2
        assert report.all_recovered
        for trial in report.trials:
            assert trial.recovery_s <= report.window_s
