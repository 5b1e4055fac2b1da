"""Honest node behaviour: mempool, leadership rounds, microblock mining.

A node is always in one of three informal roles:

* **competing** — no leadership token for the next height has been seen;
  the node mines a macroblock header extending its adopted tip.
* **leader** — the node's own header was adopted; it pools incoming
  microblocks for its round and packages them when the tenure ends.
* **micro miner** — someone else's header was adopted; the node mines
  microblocks referencing that header until the round closes.

Role changes are driven entirely by delivered messages and timers.  Every
change bumps the node's epoch counter; pending timer events carry the
epoch they were scheduled under and are ignored if it moved on, which is
how mining restarts and abandoned rounds are expressed under simulated
(exponential, memoryless) mining.

The first header received for a node's current tip wins the round; a
later competing header for the same parent is ignored.  A round that does
not produce a macroblock in time expires: the node re-enters competition
and the next header for that height supersedes the silent leader.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Container, Iterable

from .blocks import (
    AccountId,
    Hash32,
    Macroblock,
    MacroblockHeader,
    Microblock,
    MicroblockHeader,
    Transaction,
    compute_body_root,
    sha256,
    tx_id,
    tx_merkle_root,
)
from .chain import RejectReason, validate_microblock
from .netsim import (
    EXPIRATION,
    MINING_COMPLETE,
    MSG_HEADER,
    MSG_MACRO,
    MSG_MICRO,
    MSG_SYNC,
    MSG_TXS,
    TENURE_END,
    Simulation,
)
from .pow import Difficulty, HashPower, sample_mining_time
from .store import BlockRecord, BlockStore, ConsensusParams


def account_for_node(index: int) -> AccountId:
    """Deterministic 32-byte account id for a node, outside the pool range."""
    return sha256(b"node/" + index.to_bytes(8, "big"))


def expiration_wait_ms(
    tenure_ms: float, arrival_ms: float, header_timestamp_ms: float, grace_ms: float
) -> float:
    """How long after a header's arrival a node waits for the macroblock.

    The tenure clock starts at the header's own timestamp, so time the
    header spent in flight is not waited twice; the grace term absorbs
    propagation of the closing macroblock.
    """
    return tenure_ms - (arrival_ms - header_timestamp_ms) + grace_ms


# Pool sizes barely above capacity are packaged by scanning every
# possible selection outright; this bounds that scan.
_EXHAUSTIVE_COMBOS = 512


def package_microblocks(
    candidates: list[Microblock], capacity: int, seen
) -> tuple[Microblock, ...]:
    """Choose which pooled microblocks a macroblock should carry.

    ``seen`` answers membership for transaction ids already applied on
    the chain being extended.  Microblocks contributing no transaction
    beyond that set and earlier picks are left out.  When more useful
    microblocks exist than ``capacity`` allows, the selection maximizes
    the number of new transaction ids carried: pools only slightly above
    capacity are solved exactly (packaging runs once per tenure, so a
    few hundred candidate subsets are cheap), larger pools fall back to
    a lazy greedy scan.  The returned body keeps arrival order.
    """
    covered: set[bytes] = set()
    chosen: list[tuple[int, Microblock]] = []

    if len(candidates) <= capacity:
        for index, micro in enumerate(candidates):
            fresh = [t for t in micro.tx_ids() if t not in covered and t not in seen]
            if fresh:
                chosen.append((index, micro))
                covered.update(fresh)
    elif math.comb(len(candidates), capacity) <= _EXHAUSTIVE_COMBOS:
        chosen = _best_subset(candidates, capacity, seen)
    else:

        def marginal(micro: Microblock) -> int:
            count = 0
            for txid in micro.tx_ids():
                if txid not in covered and txid not in seen:
                    count += 1
            return count

        heap = [
            (-len(micro.tx_ids()), index, micro)
            for index, micro in enumerate(candidates)
        ]
        heapq.heapify(heap)
        while heap and len(chosen) < capacity:
            neg_bound, index, micro = heapq.heappop(heap)
            gain = marginal(micro)
            if gain == 0:
                continue
            if heap and -heap[0][0] > gain:
                heapq.heappush(heap, (-gain, index, micro))
                continue
            chosen.append((index, micro))
            covered.update(
                t for t in micro.tx_ids() if t not in covered and t not in seen
            )
    chosen.sort()
    return tuple(micro for _, micro in chosen)


def _best_subset(
    candidates: list[Microblock], capacity: int, seen
) -> list[tuple[int, Microblock]]:
    """Capacity-sized selection with maximal distinct-transaction coverage.

    Each unseen transaction id gets a bit, each microblock a bitmask, so
    a subset's coverage is the popcount of OR-ed masks.  Ties go to the
    earliest-arrived subset; members adding nothing over earlier picks
    are dropped afterwards, mirroring the under-capacity rule.
    """
    bit_of: dict[bytes, int] = {}
    masks: list[int] = []
    for micro in candidates:
        mask = 0
        for txid in micro.tx_ids():
            if txid in seen:
                continue
            bit = bit_of.get(txid)
            if bit is None:
                bit = len(bit_of)
                bit_of[txid] = bit
            mask |= 1 << bit
        masks.append(mask)
    best_cover = -1
    best_combo: tuple[int, ...] = ()
    for combo in itertools.combinations(range(len(candidates)), capacity):
        union = 0
        for index in combo:
            union |= masks[index]
        cover = union.bit_count()
        if cover > best_cover:
            best_cover = cover
            best_combo = combo
    chosen: list[tuple[int, Microblock]] = []
    covered = 0
    for index in best_combo:
        gain = masks[index] & ~covered
        if gain:
            chosen.append((index, candidates[index]))
            covered |= gain
    return chosen


class Mempool:
    """Bounded transaction pool with arrival order and hop metadata.

    Inserts and removals are O(1); the arrival list is compacted lazily
    once dead entries outnumber live ones.  When the bound is exceeded
    the oldest live entries are evicted first.
    """

    __slots__ = ("max_size", "entries", "arrivals", "_head")

    def __init__(self, max_size: int):
        self.max_size = max_size
        self.entries: dict[bytes, tuple[Transaction, int]] = {}
        self.arrivals: list[bytes] = []
        self._head = 0

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, txid: bytes) -> bool:
        return txid in self.entries

    def insert(self, tx: Transaction, hop: int) -> bool:
        return self.insert_batch((tx,), hop) == 1

    def insert_batch(
        self, txs: Iterable[Transaction], hop: int, *, skip: Container = frozenset()
    ) -> int:
        """Insert transactions sharing one hop count; returns count added.

        Entries listed in ``skip`` (typically ids already settled on the
        best chain) are dropped without being stored.  Eviction and
        compaction run once per batch: every live entry is in
        ``arrivals`` exactly once, so popping from the head until the
        pool fits removes precisely the oldest survivors.
        """
        entries = self.entries
        arrivals = self.arrivals
        added = 0
        for tx in txs:
            txid = tx_id(tx)
            if txid in skip or txid in entries:
                continue
            entries[txid] = (tx, hop)
            arrivals.append(txid)
            added += 1
        if added:
            max_size = self.max_size
            if len(entries) > max_size:
                head = self._head
                while len(entries) > max_size:
                    entries.pop(arrivals[head], None)
                    head += 1
                self._head = head
            if len(arrivals) > 1024 and len(arrivals) > 2 * len(entries):
                self.arrivals = [t for t in arrivals[self._head :] if t in entries]
                self._head = 0
        return added

    def remove(self, txid: bytes) -> None:
        self.entries.pop(txid, None)

    def remove_many(self, txids: Iterable[bytes]) -> None:
        entries = self.entries
        for txid in txids:
            entries.pop(txid, None)

    def clear(self) -> None:
        self.entries.clear()
        self.arrivals.clear()
        self._head = 0

    def live_arrivals(self) -> Iterable[bytes]:
        entries = self.entries
        return (t for t in self.arrivals[self._head :] if t in entries)

    def select(
        self,
        count: int,
        rng,
        strategy: str,
        excluded: Callable[[bytes], bool],
    ) -> list[Transaction]:
        """Pick up to ``count`` distinct transactions for a microblock.

        ``random`` samples uniformly from the pool; ``fee`` takes the
        highest-fee entries; ``locality`` biases toward transactions that
        originated nearby (low gossip hop count).  All three skip entries
        for which ``excluded`` is true.
        """
        entries = self.entries
        if len(entries) <= count:
            return [tx for txid, (tx, _) in entries.items() if not excluded(txid)]
        if strategy == "fee":
            best = heapq.nlargest(
                count,
                (
                    (item[0].fee, txid)
                    for txid, item in entries.items()
                    if not excluded(txid)
                ),
            )
            return [entries[txid][0] for _, txid in best]
        arrivals = self.arrivals
        head = self._head
        span = len(arrivals) - head
        chosen: dict[bytes, Transaction] = {}
        attempts = 8 * count + 64
        biased = strategy == "locality"
        uniform = rng.random
        while len(chosen) < count and attempts > 0:
            attempts -= 1
            txid = arrivals[head + int(uniform() * span)]
            if txid in chosen or excluded(txid):
                continue
            item = entries.get(txid)
            if item is None:
                continue
            if biased and item[1] > 0 and uniform() * (1 + item[1]) > 1.0:
                continue
            chosen[txid] = item[0]
        return list(chosen.values())


@dataclass(frozen=True, slots=True)
class NodeConfig:
    """Per-node behaviour knobs (consensus rules live in ConsensusParams)."""

    account: AccountId
    header_power: HashPower
    micro_power: HashPower
    mempool_size: int = 50_000
    micro_build_size: int | None = None  # defaults to the consensus cap
    selection: str = "random"  # random | fee | locality
    grace_ms: float = 3_000.0
    sync_limit: int = 64


@dataclass
class RoundState:
    """One leadership round as seen by this node."""

    header: MacroblockHeader
    parent: BlockRecord
    is_leader: bool
    started_ms: float
    pool: list[Microblock] = field(default_factory=list)
    pool_hashes: set[bytes] = field(default_factory=set)
    own_tx_ids: set[bytes] = field(default_factory=set)
    mining_idle: bool = True


class HonestNode:
    def __init__(
        self,
        node_id: int,
        sim: Simulation,
        store: BlockStore,
        consensus: ConsensusParams,
        cfg: NodeConfig,
        collector: Any = None,
    ):
        self.node_id = node_id
        self.sim = sim
        self.store = store
        self.consensus = consensus
        self.cfg = cfg
        self.collector = collector
        self.account = cfg.account
        self.mempool = Mempool(cfg.mempool_size)
        self.tip: BlockRecord = store.genesis_record
        self.round: RoundState | None = None
        self.epoch = 0
        self.down = False
        self.heard: set[Hash32] = {store.genesis_record.block_id}
        # Headers whose parent block has not been seen yet: prev_hash ->
        # (header, arrival time, sender).
        self.orphan_headers: dict[Hash32, tuple[MacroblockHeader, float, int]] = {}
        self._rng_mine = sim.rng.stream(f"mine/{node_id}")
        self._rng_select = sim.rng.stream(f"select/{node_id}")
        self._header_difficulty = Difficulty(consensus.header_bits)
        self._micro_difficulty = Difficulty(consensus.micro_bits)
        self._micro_build = min(
            cfg.micro_build_size or consensus.micro_tx_cap, consensus.micro_tx_cap
        )
        self.headers_mined = 0
        self.micros_mined = 0
        self.blocks_assembled = 0
        self.rounds_expired = 0

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> None:
        self._start_header_mining()

    def crash(self) -> None:
        """Go offline: pending timers die, volatile mempool is lost."""
        self.down = True
        self.epoch += 1
        self.round = None
        self.mempool.clear()
        self.orphan_headers.clear()

    def recover(self) -> None:
        """Come back with the persisted chain view and resume competing."""
        self.down = False
        self.epoch += 1
        self._start_header_mining()

    def describe_state(self) -> str:
        role = "down" if self.down else (
            "leader" if self.round and self.round.is_leader
            else "micro-miner" if self.round else "competing"
        )
        return (
            f"node {self.node_id}: {role} tip_height={self.tip.height} "
            f"mempool={len(self.mempool)} epoch={self.epoch}"
        )

    # -- message handling ----------------------------------------------------

    def on_deliver(self, msg_kind: str, payload: Any, sender: int) -> None:
        if self.down:
            return
        if msg_kind == MSG_TXS:
            batch, hop = payload
            self._on_txs(batch, hop)
        elif msg_kind == MSG_HEADER:
            self._on_header(payload, sender)
        elif msg_kind == MSG_MICRO:
            self._on_micro(payload)
        elif msg_kind == MSG_MACRO:
            self._on_macro(payload, sender)
        elif msg_kind == MSG_SYNC:
            self._on_sync_request(payload, sender)

    def forward_delay_ms(self, msg_kind: str, payload: Any, sender: int) -> float | None:
        if self.down:
            return None
        return 0.0

    # -- transactions -----------------------------------------------------------

    def _on_txs(self, batch: Iterable[Transaction], hop: int) -> None:
        added = self.mempool.insert_batch(batch, hop, skip=self.store.best_included)
        if added:
            round_state = self.round
            if round_state is not None and not round_state.is_leader and round_state.mining_idle:
                self._start_micro_mining()

    # -- headers ------------------------------------------------------------------

    def _on_header(self, header: MacroblockHeader, sender: int) -> None:
        parent, reason = self.store.validate_header(header, local_time_ms=self.sim.now)
        if reason is RejectReason.BAD_PARENT:
            # The parent block has not reached the store at all: remember
            # the header and ask the sender for the missing history.
            self.orphan_headers[header.prev_hash] = (header, self.sim.now, sender)
            self._request_sync(sender)
            return
        if reason is not None or parent is None:
            return
        self._consider_header(header, parent, sender)

    def _consider_header(
        self, header: MacroblockHeader, parent: BlockRecord, sender: int
    ) -> None:
        round_state = self.round
        if round_state is not None and round_state.parent.block_id == parent.block_id:
            return  # first header for this parent won the round
        if parent.block_id == self.tip.block_id:
            self._adopt_header(header, parent)
            return
        # Header extends some other block.  Follow it only if that chain
        # beats the current tip, and only once the blocks are held locally.
        if parent.key < self.tip.key:
            if parent.block_id in self.heard:
                self._adopt_tip(parent)
                self._adopt_header(header, parent)
            else:
                self.orphan_headers[header.prev_hash] = (header, self.sim.now, sender)
                self._request_sync(sender)

    def _adopt_header(self, header: MacroblockHeader, parent: BlockRecord) -> None:
        self.epoch += 1
        is_leader = header.miner == self.account
        self.round = RoundState(
            header=header, parent=parent, is_leader=is_leader, started_ms=self.sim.now
        )
        if self.collector is not None:
            self.collector.on_round_started(self.node_id, header, self.sim.now, is_leader)
        if is_leader:
            self.sim.schedule_in(
                self.consensus.tenure_ms, TENURE_END, self.node_id, self.epoch
            )
        else:
            wait = expiration_wait_ms(
                self.consensus.tenure_ms, self.sim.now, header.timestamp_ms, self.cfg.grace_ms
            )
            self.sim.schedule_in(max(wait, 1.0), EXPIRATION, self.node_id, self.epoch)
            self._start_micro_mining()

    # -- microblocks ------------------------------------------------------------

    def _on_micro(self, micro: Microblock) -> None:
        round_state = self.round
        if round_state is None or not round_state.is_leader:
            return
        if micro.header.round_header_hash != round_state.header.hash():
            return
        if micro.header.miner == self.account:
            return  # packaging own microblocks is forbidden anyway
        digest = micro.hash()
        if digest in round_state.pool_hashes:
            return
        reason = validate_microblock(
            micro,
            round_state.header.hash(),
            micro_tx_cap=self.consensus.micro_tx_cap,
            expected_bits=self.consensus.micro_bits,
            verify_pow=self.consensus.verify_pow,
        )
        if reason is not None:
            return
        round_state.pool_hashes.add(digest)
        round_state.pool.append(micro)

    def _start_micro_mining(self) -> None:
        round_state = self.round
        if round_state is None or round_state.is_leader:
            return
        excluded = self._selection_filter(round_state)
        txs = self.mempool.select(
            self._micro_build, self._rng_select, self.cfg.selection, excluded
        )
        if not txs:
            round_state.mining_idle = True
            return
        round_state.mining_idle = False
        delay = sample_mining_time(
            self._micro_difficulty, self.cfg.micro_power, self._rng_mine
        )
        self.sim.schedule_in(
            delay * 1000.0, MINING_COMPLETE, self.node_id, (self.epoch, tuple(txs))
        )

    def _selection_filter(self, round_state: RoundState) -> Callable[[bytes], bool]:
        own = round_state.own_tx_ids
        included = self.store.included_on_best
        return lambda txid: txid in own or included(txid)

    def on_mining_complete(self, epoch: int, work: Any) -> None:
        if self.down or epoch != self.epoch:
            return
        if work is None:
            self._header_found()
        else:
            self._micro_found(work)

    def _micro_found(self, txs: tuple[Transaction, ...]) -> None:
        round_state = self.round
        if round_state is None or round_state.is_leader:
            return
        header = MicroblockHeader(
            round_header_hash=round_state.header.hash(),
            miner=self.account,
            merkle_root=tx_merkle_root(txs),
            timestamp_ms=int(self.sim.now),
            difficulty_bits=self.consensus.micro_bits,
            nonce=0,
        )
        micro = Microblock(header=header, transactions=tuple(txs))
        round_state.own_tx_ids.update(tx_id(tx) for tx in txs)
        self.micros_mined += 1
        if self.collector is not None:
            self.collector.on_micro_mined(self.node_id, micro, self.sim.now)
        self.sim.broadcast(self.node_id, MSG_MICRO, micro, micro.hash())
        self._start_micro_mining()

    # -- header mining -------------------------------------------------------------

    def _start_header_mining(self) -> None:
        delay = sample_mining_time(
            self._header_difficulty, self.cfg.header_power, self._rng_mine
        )
        self.sim.schedule_in(
            delay * 1000.0, MINING_COMPLETE, self.node_id, (self.epoch, None)
        )

    def _header_found(self) -> None:
        tip = self.tip
        header = MacroblockHeader(
            version=1,
            height=tip.height + 1,
            prev_hash=tip.block.header.hash(),
            state_root=tip.root,
            timestamp_ms=int(self.sim.now),
            difficulty_bits=self.consensus.header_bits,
            miner=self.account,
            nonce=0,
        )
        self.headers_mined += 1
        self.sim.broadcast(self.node_id, MSG_HEADER, header, header.hash())
        self._adopt_header(header, tip)

    # -- tenure end and assembly ------------------------------------------------

    def on_tenure_end(self, epoch: int) -> None:
        if self.down or epoch != self.epoch:
            return
        round_state = self.round
        if round_state is None or not round_state.is_leader:
            return
        block = self._assemble(round_state)
        self.blocks_assembled += 1
        if self.collector is not None:
            self.collector.on_block_assembled(self.node_id, block, self.sim.now)
        result = self.store.register_block(block, local_time_ms=self.sim.now)
        self.sim.broadcast(self.node_id, MSG_MACRO, block, block.block_id())
        if result.record is not None:
            self.heard.add(result.record.block_id)
            self._maybe_adopt(result.record)
        else:  # pragma: no cover - an honest leader's block always validates
            raise RuntimeError(f"own block rejected: {result.reason}")

    def _assemble(self, round_state: RoundState) -> Macroblock:
        """Package pooled microblocks for this round into a macroblock."""
        consensus = self.consensus
        seen = self.store.seen_view(round_state.parent)
        candidates = [
            m for m in round_state.pool if m.header.miner != self.account
        ]
        micros = package_microblocks(candidates, consensus.capacity, seen)
        header = round_state.header
        signature = consensus.scheme.sign(
            self.account, header.hash() + compute_body_root(micros)
        )
        return Macroblock(header=header, microblocks=micros, leader_signature=signature)

    # -- expiration ------------------------------------------------------------------

    def on_expiration(self, epoch: int) -> None:
        if self.down or epoch != self.epoch:
            return
        # The leader went silent: abandon the round and compete again.
        self.rounds_expired += 1
        self.epoch += 1
        self.round = None
        if self.collector is not None:
            self.collector.on_round_expired(self.node_id, self.sim.now)
        self._start_header_mining()

    # -- macroblocks --------------------------------------------------------------------

    def _on_macro(self, block: Macroblock, sender: int) -> None:
        result = self.store.register_block(block, local_time_ms=self.sim.now)
        if result.orphaned:
            self.heard.add(block.block_id())
            self._request_sync(sender)
            return
        if result.record is None:
            return
        for record in result.accepted:
            self.heard.add(record.block_id)
        self._maybe_adopt(result.record)
        self._retry_orphan_headers()

    def _maybe_adopt(self, record: BlockRecord) -> None:
        best = record
        store_best = self.store.best
        if store_best.key < best.key and store_best.block_id in self.heard:
            best = store_best
        if best.key < self.tip.key:
            self._adopt_tip(best)

    def _adopt_tip(self, record: BlockRecord) -> None:
        old_tip = self.tip
        self.tip = record
        self.epoch += 1
        round_state = self.round
        self.round = None
        # Reorg bookkeeping: return transactions from abandoned blocks to
        # the mempool, then drop everything the new chain includes.
        if old_tip.block_id != (record.parent_id or b""):
            self._rebase_mempool(old_tip, record)
        else:
            self.mempool.remove_many(record.valid_ids)
        if self.collector is not None:
            self.collector.on_tip_adopted(self.node_id, record, self.sim.now)
        # Any active round was tied to the old tip; compete for the next
        # height, unless a buffered header already extends the new tip.
        del round_state
        self._start_header_mining()
        self._retry_orphan_headers()

    def _rebase_mempool(self, old_tip: BlockRecord, new_tip: BlockRecord) -> None:
        store = self.store
        for rec in self._path_between(old_tip, new_tip):
            for _, tx in rec.block.iter_transactions():
                self.mempool.insert(tx, 0)
        seen = store.seen_view(new_tip)
        removable = [t for t in self.mempool.entries if t in seen]
        self.mempool.remove_many(removable)

    def _path_between(self, old_tip: BlockRecord, new_tip: BlockRecord) -> list[BlockRecord]:
        """Blocks on the old branch that are not ancestors of the new tip."""
        store = self.store
        new_ancestors = set()
        node: BlockRecord | None = new_tip
        depth = 0
        while node is not None and depth <= store.retain_depth + 2:
            new_ancestors.add(node.block_id)
            node = store.get(node.parent_id) if node.parent_id else None
            depth += 1
        branch: list[BlockRecord] = []
        node = old_tip
        depth = 0
        while (
            node is not None
            and node.block_id not in new_ancestors
            and depth <= store.retain_depth + 2
        ):
            branch.append(node)
            node = store.get(node.parent_id) if node.parent_id else None
            depth += 1
        return branch

    def _retry_orphan_headers(self) -> None:
        if not self.orphan_headers:
            return
        now = self.sim.now
        tenure = self.consensus.tenure_ms
        stale = [
            prev
            for prev, (_, arrived, _) in self.orphan_headers.items()
            if now - arrived > tenure
        ]
        for prev in stale:
            del self.orphan_headers[prev]
        pending = self.orphan_headers.pop(self.tip.block.header.hash(), None)
        if pending is not None and self.round is None:
            header, _, sender = pending
            parent, reason = self.store.validate_header(header, local_time_ms=now)
            if reason is None and parent is not None:
                self._consider_header(header, parent, sender)

    # -- sync -------------------------------------------------------------------------------

    def _request_sync(self, peer: int) -> None:
        if peer == self.node_id:
            return
        self.sim.send_direct(
            self.node_id, peer, MSG_SYNC, (self.tip.height, self.tip.block_id)
        )

    def _on_sync_request(self, payload: tuple[int, Hash32], sender: int) -> None:
        their_height, their_tip = payload
        records = []
        node: BlockRecord | None = self.tip
        while (
            node is not None
            and node.parent_id is not None
            and node.height > their_height
            and len(records) < self.cfg.sync_limit
        ):
            records.append(node)
            node = self.store.get(node.parent_id)
        for record in reversed(records):  # oldest first so registration chains
            self.sim.send_direct(self.node_id, sender, MSG_MACRO, record.block)
