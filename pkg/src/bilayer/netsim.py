"""Deterministic discrete-event network simulation kernel.

Time is a virtual clock in milliseconds.  Events are ordered by
``(time, insertion sequence)``, so simultaneous events fire in the order
they were scheduled and a run is a pure function of the scenario and
seed.  Scheduling an event in the past is a hard failure, never a silent
reorder, and an empty queue before the stop condition raises a deadlock
error carrying a diagnostic dump.

Randomness is split into named streams (one ``random.Random`` per name,
derived from the run seed) so that, for example, one node's mining draws
do not perturb another node's, and adding an observer cannot shift any
existing stream.

Message transport comes in two shapes.  Block-layer artifacts (headers,
microblocks, macroblocks) are *flooded*: every node forwards new content
once, duplicates are suppressed by content id, and per-hop forward
behaviour is delegated to the receiving node so that misbehaving nodes
can delay or drop their own forwards without affecting links.
Transactions are *gossiped with a hop limit*: they reach exactly the
nodes within the configured graph radius of the origin, at the fastest
path delay within that radius.  Link latencies are resolved to per-edge
constants when the topology is built.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Protocol, Sequence

# Event kinds.
DELIVER = "deliver"
MINING_COMPLETE = "mining-complete"
TENURE_END = "tenure-end"
EXPIRATION = "expiration"
TX_INJECT = "tx-inject"
CALLBACK = "callback"

# Message kinds carried by DELIVER events.
MSG_HEADER = "header"
MSG_MICRO = "micro"
MSG_MACRO = "macro"
MSG_TXS = "txs"
MSG_SYNC = "sync-req"

# Message kinds that are flooded with duplicate suppression.
FLOODED = frozenset({MSG_HEADER, MSG_MICRO, MSG_MACRO})


class SimulationError(Exception):
    pass


class DeadlockError(SimulationError):
    """Event queue drained before the stop condition was reached."""

    def __init__(self, message: str, diagnostic: str):
        super().__init__(message + "\n" + diagnostic)
        self.diagnostic = diagnostic


class RngStreams:
    """Named, independently seeded random streams for one run."""

    def __init__(self, seed: int):
        self.seed = seed
        self._streams: dict[str, random.Random] = {}

    def stream(self, name: str) -> random.Random:
        rng = self._streams.get(name)
        if rng is None:
            digest = hashlib.sha256(f"{self.seed}/{name}".encode()).digest()
            rng = random.Random(int.from_bytes(digest[:16], "big"))
            self._streams[name] = rng
        return rng


@dataclass(frozen=True)
class Topology:
    """Undirected connected peer graph with constant per-edge latency."""

    n: int
    neighbors: tuple[tuple[int, ...], ...]
    latency_ms: tuple[tuple[float, ...], ...]
    regions: tuple[int, ...]

    def edge_latency(self, u: int, v: int) -> float:
        return self.latency_ms[u][v]

    def edges(self) -> Iterable[tuple[int, int]]:
        for u in range(self.n):
            for v in self.neighbors[u]:
                if u < v:
                    yield u, v


def _require_connected(n: int, neighbors: Sequence[Sequence[int]]) -> None:
    if n == 0:
        raise ValueError("topology needs at least one node")
    seen = {0}
    frontier = [0]
    while frontier:
        u = frontier.pop()
        for v in neighbors[u]:
            if v not in seen:
                seen.add(v)
                frontier.append(v)
    if len(seen) != n:
        raise ValueError("topology must be connected")


def build_edges(kind: str, n: int, *, degree: float = 4.0, rng: random.Random) -> list[set[int]]:
    """Adjacency sets for the named topology shape.

    ``random`` draws an Erdos-Renyi graph with expected degree ``degree``
    and then repairs connectivity by chaining components together.
    """
    adj: list[set[int]] = [set() for _ in range(n)]

    def connect(u: int, v: int) -> None:
        if u != v:
            adj[u].add(v)
            adj[v].add(u)

    if kind == "complete":
        for u in range(n):
            for v in range(u + 1, n):
                connect(u, v)
    elif kind == "ring":
        for u in range(n):
            connect(u, (u + 1) % n)
    elif kind == "line":
        for u in range(n - 1):
            connect(u, u + 1)
    elif kind == "random":
        if n > 1:
            p = min(1.0, degree / (n - 1))
            for u in range(n):
                for v in range(u + 1, n):
                    if rng.random() < p:
                        connect(u, v)
            # Repair pass: join each later component to an earlier one.
            comp = _components(n, adj)
            for a, b in zip(comp, comp[1:]):
                connect(rng.choice(sorted(a)), rng.choice(sorted(b)))
    else:
        raise ValueError(f"unknown topology kind: {kind}")
    _require_connected(n, adj)
    return adj


def _components(n: int, adj: Sequence[set[int]]) -> list[set[int]]:
    unvisited = set(range(n))
    components = []
    while unvisited:
        start = min(unvisited)
        comp = {start}
        frontier = [start]
        while frontier:
            u = frontier.pop()
            for v in adj[u]:
                if v not in comp:
                    comp.add(v)
                    frontier.append(v)
        components.append(comp)
        unvisited -= comp
    return components


def assemble_topology(
    adjacency: Sequence[set[int]],
    latency_of: Callable[[int, int], float],
    regions: Sequence[int],
) -> Topology:
    n = len(adjacency)
    _require_connected(n, adjacency)
    matrix = [[0.0] * n for _ in range(n)]
    for u in range(n):
        for v in adjacency[u]:
            if u < v:
                ms = float(latency_of(u, v))
                if ms < 0:
                    raise ValueError("edge latency must be non-negative")
                matrix[u][v] = ms
                matrix[v][u] = ms
    return Topology(
        n=n,
        neighbors=tuple(tuple(sorted(adjacency[u])) for u in range(n)),
        latency_ms=tuple(tuple(row) for row in matrix),
        regions=tuple(regions),
    )


def hop_limited_deliveries(
    topology: Topology, origin: int, hop_limit: int
) -> tuple[tuple[int, float, int], ...]:
    """Recipients of a gossiped message from ``origin``.

    Returns ``(node, delay_ms, graph_hops)`` for every node within
    ``hop_limit`` edges of the origin, origin excluded.  The delay is the
    fastest path using at most ``hop_limit`` edges; the hop count is the
    plain BFS distance, which selection strategies use as a locality
    signal.
    """
    n = topology.n
    inf = float("inf")
    best = [inf] * n
    best[origin] = 0.0
    frontier = {origin: 0.0}
    hops = {origin: 0}
    for depth in range(1, hop_limit + 1):
        nxt: dict[int, float] = {}
        for u, du in frontier.items():
            for v in topology.neighbors[u]:
                d = du + topology.latency_ms[u][v]
                if d < best[v]:
                    best[v] = d
                    nxt[v] = d
                    if v not in hops:
                        hops[v] = depth
                elif v in nxt and d < nxt[v]:
                    nxt[v] = d
        frontier = nxt
    out = []
    for v in range(n):
        if v != origin and best[v] < inf:
            out.append((v, best[v], hops[v]))
    return tuple(out)


def shortest_path_ms(topology: Topology, origin: int) -> list[float]:
    """Unrestricted Dijkstra distances; the flooding lower-bound oracle."""
    n = topology.n
    dist = [float("inf")] * n
    dist[origin] = 0.0
    heap = [(0.0, origin)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        for v in topology.neighbors[u]:
            nd = d + topology.latency_ms[u][v]
            if nd < dist[v]:
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return dist


class SimNode(Protocol):
    node_id: int

    def on_deliver(self, msg_kind: str, payload: Any, sender: int) -> None: ...

    def on_mining_complete(self, epoch: int, payload: Any) -> None: ...

    def on_tenure_end(self, epoch: int) -> None: ...

    def on_expiration(self, epoch: int) -> None: ...

    def forward_delay_ms(self, msg_kind: str, payload: Any, sender: int) -> float | None:
        """How long to hold a flooded message before relaying it.

        Return 0.0 to relay immediately (honest behaviour) or None to
        drop the relay entirely.  Links themselves never lose messages;
        misbehaviour lives in nodes.
        """
        ...


@dataclass
class TraceRecorder:
    """Streaming hash of the event trace, with optional full capture."""

    keep_events: bool = False
    path: str | None = None
    _hash: Any = field(default_factory=lambda: hashlib.sha256(), repr=False)
    events: list[tuple] = field(default_factory=list)
    count: int = 0
    _fh: Any = field(default=None, repr=False)

    def open(self) -> None:
        if self.path:
            self._fh = open(self.path, "w", encoding="utf-8")

    def record(self, time_ms: float, kind: str, node: int, detail: str) -> None:
        line = f"{time_ms!r}|{kind}|{node}|{detail}"
        self._hash.update(line.encode())
        self._hash.update(b"\n")
        self.count += 1
        if self.keep_events:
            self.events.append((time_ms, kind, node, detail))
        if self._fh is not None:
            json.dump({"t": time_ms, "kind": kind, "node": node, "detail": detail}, self._fh)
            self._fh.write("\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    @property
    def digest_hex(self) -> str:
        return self._hash.hexdigest()


@dataclass
class RunStats:
    end_time_ms: float
    events: int
    trace_hash: str


class Simulation:
    """Owns the clock, the event heap, the transport, and the trace."""

    def __init__(
        self,
        topology: Topology,
        rng: RngStreams,
        *,
        tx_hop_limit: int = 2,
        jitter_ms: float = 0.0,
        trace: TraceRecorder | None = None,
    ):
        self.topology = topology
        self.rng = rng
        self.now = 0.0
        self.jitter_ms = jitter_ms
        self._jitter_rng = rng.stream("jitter") if jitter_ms > 0 else None
        self._heap: list = []
        self._seq = 0
        self.nodes: list[Any] = [None] * topology.n
        self.trace = trace or TraceRecorder()
        self._seen: dict[bytes, set[int]] = {}
        self.tx_hop_limit = tx_hop_limit
        self._gossip_map = tuple(
            hop_limited_deliveries(topology, origin, tx_hop_limit)
            for origin in range(topology.n)
        )
        self.injector: Any = None
        self.duplicates_suppressed = 0
        self.messages_delivered = 0

    # -- scheduling ----------------------------------------------------

    def schedule(self, time_ms: float, kind: str, node: int, payload: Any) -> None:
        if time_ms < self.now:
            raise SimulationError(
                f"past-time event: t={time_ms} scheduled at now={self.now} kind={kind}"
            )
        heapq.heappush(self._heap, (time_ms, self._seq, kind, node, payload))
        self._seq += 1

    def schedule_in(self, delay_ms: float, kind: str, node: int, payload: Any) -> None:
        self.schedule(self.now + delay_ms, kind, node, payload)

    # -- transport ------------------------------------------------------

    def _jitter(self) -> float:
        if self._jitter_rng is None:
            return 0.0
        return self._jitter_rng.uniform(0.0, self.jitter_ms)

    def broadcast(self, origin: int, msg_kind: str, payload: Any, content_id: bytes) -> None:
        """Flood ``payload`` from ``origin`` to the whole network."""
        self.trace.record(self.now, "send", origin, f"{msg_kind}:{content_id.hex()[:16]}")
        self._seen[content_id] = {origin}
        self._relay(origin, msg_kind, payload, content_id, 0.0)

    def _relay(
        self, via: int, msg_kind: str, payload: Any, content_id: bytes, extra_delay: float
    ) -> None:
        seen = self._seen[content_id]
        lat = self.topology.latency_ms[via]
        for peer in self.topology.neighbors[via]:
            if peer in seen:
                continue
            delay = extra_delay + lat[peer] + self._jitter()
            self.schedule_in(delay, DELIVER, peer, (msg_kind, payload, via, content_id))

    def gossip_txs(self, origin: int, txs: Any) -> None:
        """Hop-limited delivery of a transaction batch.

        This is the hottest scheduling path (every injected batch fans
        out to the whole gossip neighbourhood), so events go straight
        onto the heap instead of through ``schedule``.
        """
        now = self.now
        heap = self._heap
        seq = self._seq
        push = heapq.heappush
        if self._jitter_rng is None:
            for node, delay, hop_count in self._gossip_map[origin]:
                push(heap, (now + delay, seq, DELIVER, node,
                            (MSG_TXS, (txs, hop_count), origin, None)))
                seq += 1
        else:
            for node, delay, hop_count in self._gossip_map[origin]:
                push(heap, (now + delay + self._jitter(), seq, DELIVER, node,
                            (MSG_TXS, (txs, hop_count), origin, None)))
                seq += 1
        self._seq = seq

    def send_direct(self, src: int, dst: int, msg_kind: str, payload: Any) -> None:
        """Point-to-point delivery between adjacent nodes (no re-flooding)."""
        if dst not in self.topology.neighbors[src]:
            raise SimulationError(f"nodes {src} and {dst} are not adjacent")
        delay = self.topology.latency_ms[src][dst] + self._jitter()
        self.schedule_in(delay, DELIVER, dst, (msg_kind, payload, src, None))

    def call_at(self, time_ms: float, label: str, fn: Callable[[], None]) -> None:
        """Run ``fn`` at the given virtual time (scenario orchestration)."""
        self.schedule(time_ms, CALLBACK, -1, (label, fn))

    # -- main loop -------------------------------------------------------

    def _diagnostic(self) -> str:
        roles = []
        for node in self.nodes:
            describe = getattr(node, "describe_state", None)
            roles.append(describe() if describe else repr(node))
        return (
            f"now={self.now} events_processed={self.trace.count} "
            f"heap_size={len(self._heap)}\nnode states:\n  " + "\n  ".join(roles)
        )

    def run_until(
        self,
        stop_time_ms: float,
        *,
        stop_fn: Callable[[], bool] | None = None,
        expect_idle: bool = False,
    ) -> RunStats:
        """Process events in order until the virtual clock passes the stop.

        With ``expect_idle`` the queue is allowed to drain early (used by
        scenarios that stop injecting work); otherwise a drained queue is
        reported as a deadlock with a state dump.
        """
        heap = self._heap
        trace = self.trace
        nodes = self.nodes
        while True:
            if stop_fn is not None and stop_fn():
                break
            if not heap:
                if expect_idle:
                    break
                raise DeadlockError("event queue drained before stop", self._diagnostic())
            time_ms, _, kind, node_id, payload = heapq.heappop(heap)
            if time_ms > stop_time_ms:
                heapq.heappush(heap, (time_ms, 0, kind, node_id, payload))
                self.now = stop_time_ms
                break
            self.now = time_ms
            if kind == DELIVER:
                msg_kind, obj, sender, content_id = payload
                if content_id is not None:
                    seen = self._seen[content_id]
                    if node_id in seen:
                        self.duplicates_suppressed += 1
                        continue
                    seen.add(node_id)
                node = nodes[node_id]
                detail = (
                    f"{msg_kind}:{content_id.hex()[:16]}<-{sender}"
                    if content_id is not None
                    else f"{msg_kind}<-{sender}"
                )
                trace.record(time_ms, DELIVER, node_id, detail)
                self.messages_delivered += 1
                node.on_deliver(msg_kind, obj, sender)
                if content_id is not None:
                    hold = node.forward_delay_ms(msg_kind, obj, sender)
                    if hold is not None:
                        self._relay(node_id, msg_kind, obj, content_id, hold)
            elif kind == MINING_COMPLETE:
                epoch, work = payload
                trace.record(time_ms, kind, node_id, f"epoch={epoch}")
                nodes[node_id].on_mining_complete(epoch, work)
            elif kind == TENURE_END:
                trace.record(time_ms, kind, node_id, f"epoch={payload}")
                nodes[node_id].on_tenure_end(payload)
            elif kind == EXPIRATION:
                trace.record(time_ms, kind, node_id, f"epoch={payload}")
                nodes[node_id].on_expiration(payload)
            elif kind == TX_INJECT:
                trace.record(time_ms, kind, node_id, "")
                self.injector.on_inject(node_id, payload)
            elif kind == CALLBACK:
                label, fn = payload
                trace.record(time_ms, kind, node_id, label)
                fn()
            else:
                raise SimulationError(f"unknown event kind: {kind}")
        return RunStats(self.now, self.trace.count, self.trace.digest_hex)
