"""Simulation kernel tests: topology, hop-limited gossip, event loop."""

import random

import pytest

from bilayer.netsim import (
    CALLBACK,
    DELIVER,
    DeadlockError,
    MSG_HEADER,
    MSG_TXS,
    RngStreams,
    Simulation,
    SimulationError,
    TraceRecorder,
    assemble_topology,
    build_edges,
    hop_limited_deliveries,
    shortest_path_ms,
)


def make_topology(adjacency, latency=10.0):
    n = len(adjacency)
    if callable(latency):
        latency_of = latency
    else:
        latency_of = lambda u, v: latency
    return assemble_topology(
        [set(peers) for peers in adjacency], latency_of, [0] * n
    )


LINE4 = make_topology([[1], [0, 2], [1, 3], [2]])


class Recorder:
    """Minimal honest relay node that logs deliveries."""

    def __init__(self, node_id, forward=0.0):
        self.node_id = node_id
        self.received = []
        self.forward = forward

    def on_deliver(self, msg_kind, payload, sender):
        self.received.append((msg_kind, payload, sender))

    def forward_delay_ms(self, msg_kind, payload, sender):
        return self.forward

    def on_mining_complete(self, epoch, payload):  # pragma: no cover
        raise AssertionError("unexpected mining event")

    def on_tenure_end(self, epoch):  # pragma: no cover
        raise AssertionError("unexpected tenure event")

    def on_expiration(self, epoch):  # pragma: no cover
        raise AssertionError("unexpected expiration event")


def make_sim(topology, seed=1, hop_limit=2, node_cls=Recorder):
    sim = Simulation(topology, RngStreams(seed), tx_hop_limit=hop_limit)
    for i in range(topology.n):
        sim.nodes[i] = node_cls(i)
    return sim


class TestRngStreams:
    def test_same_name_same_stream_object(self):
        streams = RngStreams(1)
        assert streams.stream("mine") is streams.stream("mine")

    def test_deterministic_per_seed_and_name(self):
        a = RngStreams(7).stream("mine")
        b = RngStreams(7).stream("mine")
        assert [a.random() for _ in range(5)] == [b.random() for _ in range(5)]

    def test_streams_differ_by_name_and_seed(self):
        streams = RngStreams(7)
        assert streams.stream("a").random() != streams.stream("b").random()
        assert RngStreams(7).stream("x").random() != RngStreams(8).stream("x").random()

    def test_adding_a_stream_does_not_shift_existing(self):
        one = RngStreams(3)
        first = one.stream("mine").random()
        two = RngStreams(3)
        two.stream("observer")  # new consumer
        assert two.stream("mine").random() == first


class TestBuildEdges:
    def test_complete(self):
        adj = build_edges("complete", 5, rng=random.Random(0))
        assert all(len(peers) == 4 for peers in adj)

    def test_ring(self):
        adj = build_edges("ring", 5, rng=random.Random(0))
        assert all(len(peers) == 2 for peers in adj)
        assert 1 in adj[0] and 4 in adj[0]

    def test_line(self):
        adj = build_edges("line", 4, rng=random.Random(0))
        assert [len(p) for p in adj] == [1, 2, 2, 1]

    def test_random_connected_and_deterministic(self):
        for n, degree in ((10, 3.0), (30, 5.0), (50, 5.0)):
            a = build_edges("random", n, degree=degree, rng=random.Random(42))
            b = build_edges("random", n, degree=degree, rng=random.Random(42))
            assert a == b
            seen = {0}
            frontier = [0]
            while frontier:
                u = frontier.pop()
                for v in a[u]:
                    if v not in seen:
                        seen.add(v)
                        frontier.append(v)
            assert len(seen) == n

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            build_edges("hypercube", 4, rng=random.Random(0))


class TestAssembleTopology:
    def test_symmetric_latency(self):
        topo = make_topology([[1], [0, 2], [1]], latency=lambda u, v: 5.0 + u + v)
        assert topo.edge_latency(0, 1) == topo.edge_latency(1, 0) == 6.0
        assert topo.edge_latency(1, 2) == 8.0

    def test_rejects_negative_latency(self):
        with pytest.raises(ValueError):
            make_topology([[1], [0]], latency=-1.0)

    def test_rejects_disconnected(self):
        with pytest.raises(ValueError):
            make_topology([[1], [0], [3], [2]])

    def test_edges_iteration(self):
        topo = make_topology([[1, 2], [0], [0]])
        assert sorted(topo.edges()) == [(0, 1), (0, 2)]


class TestHopLimitedDeliveries:
    def test_line_graph_radius(self):
        reached = hop_limited_deliveries(LINE4, 0, 2)
        assert [(node, hops) for node, _, hops in reached] == [(1, 1), (2, 2)]
        delays = {node: delay for node, delay, _ in reached}
        assert delays == {1: 10.0, 2: 20.0}

    def test_zero_hops_reaches_nobody(self):
        assert hop_limited_deliveries(LINE4, 0, 0) == ()

    def test_two_hop_detour_beats_slow_direct_edge(self):
        # 0-1 is slow; 0-2-1 is fast and within the hop budget.
        topo = make_topology(
            [[1, 2], [0, 2], [0, 1]],
            latency=lambda u, v: 100.0 if (u, v) == (0, 1) else 10.0,
        )
        one_hop = {n: d for n, d, _ in hop_limited_deliveries(topo, 0, 1)}
        two_hop = {n: d for n, d, _ in hop_limited_deliveries(topo, 0, 2)}
        assert one_hop[1] == 100.0
        assert two_hop[1] == 20.0
        reached = {n: h for n, _, h in hop_limited_deliveries(topo, 0, 2)}
        assert reached[1] == 1  # BFS distance, not the fast path length

    def test_full_radius_matches_dijkstra(self):
        rng = random.Random(5)
        adj = build_edges("random", 12, degree=3.0, rng=rng)
        topo = assemble_topology(
            adj, lambda u, v: 1.0 + ((u * 7 + v * 13) % 40), [0] * 12
        )
        oracle = shortest_path_ms(topo, 4)
        reached = hop_limited_deliveries(topo, 4, 12)
        assert len(reached) == 11
        for node, delay, _ in reached:
            assert delay == pytest.approx(oracle[node])


class TestScheduling:
    def test_past_time_rejected(self):
        sim = make_sim(LINE4)
        sim.now = 100.0
        with pytest.raises(SimulationError):
            sim.schedule(99.0, DELIVER, 0, None)

    def test_simultaneous_events_fire_in_schedule_order(self):
        sim = make_sim(LINE4)
        order = []
        sim.call_at(5.0, "first", lambda: order.append("first"))
        sim.call_at(5.0, "second", lambda: order.append("second"))
        sim.run_until(10.0, expect_idle=True)
        assert order == ["first", "second"]

    def test_stop_time_leaves_future_events_queued(self):
        sim = make_sim(LINE4)
        fired = []
        sim.call_at(50.0, "late", lambda: fired.append(1))
        stats = sim.run_until(10.0)
        assert fired == []
        assert stats.end_time_ms == 10.0
        sim.run_until(60.0, expect_idle=True)
        assert fired == [1]

    def test_deadlock_raises_with_diagnostic(self):
        sim = make_sim(LINE4)
        with pytest.raises(DeadlockError) as info:
            sim.run_until(1000.0)
        assert "node states" in str(info.value)

    def test_expect_idle_allows_drain(self):
        sim = make_sim(LINE4)
        stats = sim.run_until(1000.0, expect_idle=True)
        assert stats.events == 0

    def test_stop_fn(self):
        sim = make_sim(LINE4)
        count = []
        for t in (1.0, 2.0, 3.0):
            sim.call_at(t, "tick", lambda: count.append(1))
        sim.run_until(10.0, stop_fn=lambda: len(count) >= 2, expect_idle=True)
        assert len(count) == 2


class TestFlooding:
    def test_broadcast_reaches_everyone_once(self):
        sim = make_sim(LINE4)
        sim.broadcast(0, MSG_HEADER, "payload", b"\x01" * 32)
        sim.run_until(10_000.0, expect_idle=True)
        for i in (1, 2, 3):
            assert sim.nodes[i].received == [(MSG_HEADER, "payload", i - 1)]
        assert sim.nodes[0].received == []

    def test_duplicate_suppression_on_cycles(self):
        triangle = make_topology([[1, 2], [0, 2], [0, 1]])
        sim = make_sim(triangle)
        sim.broadcast(0, MSG_HEADER, "p", b"\x02" * 32)
        sim.run_until(10_000.0, expect_idle=True)
        assert len(sim.nodes[1].received) == 1
        assert len(sim.nodes[2].received) == 1
        assert sim.duplicates_suppressed > 0

    def test_dropping_relay_stops_propagation(self):
        sim = make_sim(LINE4)
        sim.nodes[1].forward = None  # refuses to relay
        sim.broadcast(0, MSG_HEADER, "p", b"\x03" * 32)
        sim.run_until(10_000.0, expect_idle=True)
        assert len(sim.nodes[1].received) == 1
        assert sim.nodes[2].received == []
        assert sim.nodes[3].received == []

    def test_forward_hold_delays_downstream(self):
        sim = make_sim(LINE4)
        sim.nodes[1].forward = 500.0
        sim.broadcast(0, MSG_HEADER, "p", b"\x04" * 32)
        sim.run_until(10_000.0, expect_idle=True)
        assert sim.nodes[2].received  # still arrives, later
        # 0->1 takes 10ms, node 1 holds 500ms, then 10ms per remaining link.
        assert sim.now == pytest.approx(530.0)


class TestGossip:
    def test_hop_limit_bounds_reach(self):
        sim = make_sim(LINE4, hop_limit=1)
        sim.gossip_txs(0, ("batch",))
        sim.run_until(10_000.0, expect_idle=True)
        assert sim.nodes[1].received == [(MSG_TXS, (("batch",), 1), 0)]
        assert sim.nodes[2].received == []

    def test_hop_counts_delivered_with_payload(self):
        sim = make_sim(LINE4, hop_limit=3)
        sim.gossip_txs(0, "b")
        sim.run_until(10_000.0, expect_idle=True)
        hops = {i: sim.nodes[i].received[0][1][1] for i in (1, 2, 3)}
        assert hops == {1: 1, 2: 2, 3: 3}

    def test_jitter_perturbs_delivery_times(self):
        topo = LINE4
        base = Simulation(topo, RngStreams(1), tx_hop_limit=2, jitter_ms=0.0)
        jittered = Simulation(topo, RngStreams(1), tx_hop_limit=2, jitter_ms=5.0)
        for sim in (base, jittered):
            for i in range(topo.n):
                sim.nodes[i] = Recorder(i)
            sim.gossip_txs(0, "b")
        assert base._heap[0][0] == 10.0
        assert jittered._heap[0][0] != 10.0
        assert 10.0 <= jittered._heap[0][0] <= 15.0


class TestSendDirect:
    def test_adjacent_delivery(self):
        sim = make_sim(LINE4)
        sim.send_direct(0, 1, MSG_HEADER, "direct")
        sim.run_until(1_000.0, expect_idle=True)
        assert sim.nodes[1].received == [(MSG_HEADER, "direct", 0)]

    def test_non_adjacent_rejected(self):
        sim = make_sim(LINE4)
        with pytest.raises(SimulationError):
            sim.send_direct(0, 2, MSG_HEADER, "x")


class TestTraceRecorder:
    def test_digest_depends_on_records(self):
        a, b, c = TraceRecorder(), TraceRecorder(), TraceRecorder()
        a.record(1.0, DELIVER, 0, "x")
        b.record(1.0, DELIVER, 0, "x")
        c.record(1.0, DELIVER, 0, "y")
        assert a.digest_hex == b.digest_hex
        assert a.digest_hex != c.digest_hex

    def test_keep_events(self):
        trace = TraceRecorder(keep_events=True)
        trace.record(1.0, CALLBACK, -1, "label")
        assert trace.events == [(1.0, CALLBACK, -1, "label")]

    def test_jsonl_output(self, tmp_path):
        path = tmp_path / "trace.jsonl"
        trace = TraceRecorder(path=str(path))
        trace.open()
        trace.record(1.5, DELIVER, 3, "d")
        trace.close()
        assert path.read_text() == '{"t": 1.5, "kind": "deliver", "node": 3, "detail": "d"}\n'


class TestDeterminism:
    def _run(self, seed):
        sim = make_sim(LINE4, seed=seed)
        sim.gossip_txs(0, "b")
        sim.broadcast(2, MSG_HEADER, "h", b"\x09" * 32)
        return sim.run_until(10_000.0, expect_idle=True).trace_hash

    def test_equal_seeds_equal_traces(self):
        assert self._run(11) == self._run(11)
