"""Shared block store: validate once, settle once, serve every node.

Validation and settlement are deterministic functions of a block and its
chain prefix, so in a simulation there is no reason for fifty nodes to
repeat the same work.  The store registers each macroblock exactly once
(keyed by block id, which covers header *and* body), records its
settlement delta and fork-choice key, and lets every node share the
result.  Per-node behaviour — what a node has heard of, which tip it
builds on — stays in the nodes.

State reads are served from a single materialized dict tracking the
store's best chain.  Each block keeps its settlement delta and, while on
the best chain, an undo map, so the materialized state can be rolled to
any recent block and fork branches can be validated through thin
overlays.  Deltas and undo maps older than ``retain_depth`` blocks are
dropped; a reorg deeper than that window is treated as a fatal error
rather than silently recomputed, because in the scenarios this simulator
targets such a reorg indicates a bug.
"""

from __future__ import annotations

from collections import ChainMap, Counter
from dataclasses import dataclass
from typing import Iterator

from .blocks import (
    DEFAULT_SIGNATURES,
    AccountId,
    Hash32,
    Macroblock,
    MacroblockHeader,
    SignatureScheme,
)
from .chain import (
    ForkChoiceKey,
    RejectReason,
    resolve_validity,
    validate_header,
    validate_macroblock_body,
)
from .ledger import (
    Account,
    EMPTY_ACCOUNT,
    GenesisPool,
    IncentiveParams,
    LedgerState,
    settle,
)

ZERO32 = bytes(32)


@dataclass(frozen=True, slots=True)
class ConsensusParams:
    """Protocol constants every honest node enforces identically."""

    capacity: int  # microblocks packageable per macroblock
    micro_tx_cap: int  # transactions per microblock
    tenure_ms: float  # leadership tenure T
    header_bits: int  # header PoW difficulty
    micro_bits: int  # microblock PoW difficulty
    incentives: IncentiveParams
    macro_tx_cap: int | None = None  # optional cap on packaged transactions
    verify_pow: bool = False  # real hash checks (off under simulated mining)
    scheme: SignatureScheme = DEFAULT_SIGNATURES

    def __post_init__(self) -> None:
        if self.capacity < 1:
            raise ValueError("capacity must be at least 1")
        if self.micro_tx_cap < 1:
            raise ValueError("microblock transaction cap must be at least 1")
        if self.tenure_ms <= 0:
            raise ValueError("tenure must be positive")


class _StateView:
    """Read-only ledger view assembled from overlay maps.

    Duck-types the parts of ``LedgerState`` that ``settle`` and
    ``resolve_validity`` rely on, so settlement can run directly against
    the store's materialized dict plus any fork overlays.
    """

    __slots__ = ("_delta", "_parent", "pool", "_root_int", "supply", "depth", "pending")

    def __init__(
        self,
        maps: list,
        pool: GenesisPool | None,
        root_int: int,
        supply: int,
    ) -> None:
        self._delta = maps[0] if len(maps) == 1 else ChainMap(*maps)
        self._parent = None
        self.pool = pool
        self._root_int = root_int
        self.supply = supply
        self.depth = 0
        self.pending = ()

    @property
    def root(self) -> Hash32:
        return self._root_int.to_bytes(32, "big")

    def get(self, account_id: AccountId) -> Account:
        entry = self._delta.get(account_id)
        if entry is not None:
            return entry
        pool = self.pool
        if pool is not None and int.from_bytes(account_id, "big") < pool.size:
            return Account(pool.balance, 0)
        return EMPTY_ACCOUNT


class _SeenView:
    """Membership view of 'transaction ids applied at or before a block'."""

    __slots__ = ("_added", "_removed", "_main")

    def __init__(self, added: list[set], removed: list[set], main: set):
        self._added = added
        self._removed = removed
        self._main = main

    def __contains__(self, txid: bytes) -> bool:
        for group in self._added:
            if txid in group:
                return True
        for group in self._removed:
            if txid in group:
                return False
        return txid in self._main


class BlockRecord:
    """Everything the store knows about one registered macroblock."""

    __slots__ = (
        "block",
        "block_id",
        "parent_id",
        "height",
        "root_int",
        "supply",
        "diversity",
        "valid_ids",
        "verdict_counts",
        "rewards",
        "key",
        "delta",
        "arrival_ms",
        "raw_tx_count",
    )

    def __init__(
        self,
        block: Macroblock,
        block_id: Hash32,
        parent_id: Hash32 | None,
        root_int: int,
        supply: int,
        diversity: int,
        valid_ids: tuple[Hash32, ...],
        verdict_counts: Counter,
        rewards: tuple[tuple[AccountId, int], ...],
        delta: dict[AccountId, Account] | None,
        arrival_ms: float,
        raw_tx_count: int,
    ) -> None:
        self.block = block
        self.block_id = block_id
        self.parent_id = parent_id
        self.height = block.header.height
        self.root_int = root_int
        self.supply = supply
        self.diversity = diversity
        self.valid_ids = valid_ids
        self.verdict_counts = verdict_counts
        self.rewards = rewards
        self.delta = delta
        self.arrival_ms = arrival_ms
        self.raw_tx_count = raw_tx_count
        # Total order: height, then diversity, then smallest header hash;
        # block id disambiguates equivocating bodies of one header.
        self.key = (
            ForkChoiceKey.from_values(self.height, diversity, block.header.hash()),
            block_id,
        )

    @property
    def root(self) -> Hash32:
        return self.root_int.to_bytes(32, "big")


def make_genesis_block(state: LedgerState, *, timestamp_ms: int = 0) -> Macroblock:
    """Height-0 anchor block committing the genesis state root."""
    header = MacroblockHeader(
        version=1,
        height=0,
        prev_hash=ZERO32,
        state_root=state.root,
        timestamp_ms=timestamp_ms,
        difficulty_bits=0,
        miner=ZERO32,
        nonce=0,
    )
    return Macroblock(header=header, microblocks=(), leader_signature=b"")


@dataclass
class RegistrationResult:
    record: "BlockRecord | None"
    reason: RejectReason | None
    orphaned: bool = False
    # Records newly accepted in this call (cascaded orphans included).
    accepted: tuple = ()


class BlockStore:
    def __init__(
        self,
        genesis_state: LedgerState,
        params: ConsensusParams,
        *,
        genesis_timestamp_ms: int = 0,
        retain_depth: int = 12,
        orphan_limit: int = 256,
    ) -> None:
        self.params = params
        self.genesis_state = genesis_state
        self.retain_depth = retain_depth
        self.orphan_limit = orphan_limit

        block = make_genesis_block(genesis_state, timestamp_ms=genesis_timestamp_ms)
        gid = block.block_id()
        genesis_record = BlockRecord(
            block=block,
            block_id=gid,
            parent_id=None,
            root_int=genesis_state._root_int,
            supply=genesis_state.supply,
            diversity=0,
            valid_ids=(),
            verdict_counts=Counter(),
            rewards=(),
            delta=None,
            arrival_ms=0.0,
            raw_tx_count=0,
        )
        self.genesis_record = genesis_record
        self.records: dict[Hash32, BlockRecord] = {gid: genesis_record}
        self.by_header: dict[Hash32, list[Hash32]] = {block.header.hash(): [gid]}

        # Materialized best-chain state.
        self._main: dict[AccountId, Account] = dict(genesis_state._delta)
        self._main_included: set[bytes] = set()
        self._mainline: list[Hash32] = [gid]
        self._main_pos: dict[Hash32, int] = {gid: 0}
        self._undo: dict[Hash32, dict[AccountId, Account | None]] = {}
        self.best = genesis_record

        self._orphans: dict[Hash32, list[tuple[Macroblock, float]]] = {}
        self.reorg_count = 0
        self.max_reorg_depth = 0

    # -- lookups ---------------------------------------------------------

    def get(self, block_id: Hash32) -> BlockRecord | None:
        return self.records.get(block_id)

    def records_for_header(self, header_hash: Hash32) -> list[BlockRecord]:
        return [self.records[bid] for bid in self.by_header.get(header_hash, ())]

    def resolve_parent(self, header: MacroblockHeader) -> BlockRecord | None:
        """The registered block a header legitimately extends.

        A header names its parent by header hash and pins the body by the
        committed state root, so equivocating bodies cannot be swapped
        under an existing child.
        """
        for candidate in self.records_for_header(header.prev_hash):
            if candidate.height + 1 == header.height and candidate.root == header.state_root:
                return candidate
        return None

    def validate_header(
        self, header: MacroblockHeader, *, local_time_ms: float
    ) -> tuple[BlockRecord | None, RejectReason | None]:
        """Full header check; returns the parent record when acceptable."""
        candidates = self.records_for_header(header.prev_hash)
        if not candidates:
            return None, RejectReason.BAD_PARENT
        params = self.params
        last_reason = RejectReason.BAD_PARENT
        for candidate in candidates:
            reason = validate_header(
                header,
                parent_hash=candidate.block.header.hash(),
                parent_height=candidate.height,
                expected_root=candidate.root,
                local_time_ms=local_time_ms,
                tenure_ms=params.tenure_ms,
                expected_bits=params.header_bits,
                verify_pow=params.verify_pow,
            )
            if reason is None:
                return candidate, None
            last_reason = reason
        return None, last_reason

    # -- state and seen views ---------------------------------------------

    def _overlay_path(self, record: BlockRecord) -> tuple[list[BlockRecord], BlockRecord]:
        """Fork records from ``record`` down to its mainline anchor."""
        path: list[BlockRecord] = []
        node = record
        while node.block_id not in self._main_pos:
            path.append(node)
            parent_id = node.parent_id
            if parent_id is None:
                raise KeyError("record does not connect to the mainline")
            node = self.records[parent_id]
        return path, node

    def state_view(self, record: BlockRecord) -> _StateView:
        """Ledger state after settling ``record``, served via overlays."""
        if record.block_id == self._mainline[-1]:
            maps: list = [self._main]
        else:
            fork_path, anchor = self._overlay_path(record)
            maps = []
            for rec in fork_path:  # newest fork delta first
                if rec.delta is None:
                    raise KeyError("settlement delta evicted; fork beyond retain window")
                maps.append(rec.delta)
            anchor_pos = self._main_pos[anchor.block_id]
            # Undo maps restore pre-block values; oldest-above-anchor first.
            for bid in self._mainline[anchor_pos + 1 :]:
                undo = self._undo.get(bid)
                if undo is None:
                    raise KeyError("undo map evicted; view beyond retain window")
                maps.append(undo)
            maps.append(self._main)
        return _StateView(maps, self.genesis_state.pool, record.root_int, record.supply)

    def seen_view(self, record: BlockRecord) -> _SeenView | set:
        """Ids of transactions applied on the chain ending at ``record``."""
        if record.block_id == self._mainline[-1]:
            return self._main_included
        fork_path, anchor = self._overlay_path(record)
        added = [set(rec.valid_ids) for rec in fork_path]
        anchor_pos = self._main_pos[anchor.block_id]
        removed = [
            set(self.records[bid].valid_ids)
            for bid in self._mainline[anchor_pos + 1 :]
        ]
        return _SeenView(added, removed, self._main_included)

    def included_on_best(self, txid: bytes) -> bool:
        return txid in self._main_included

    @property
    def best_included(self) -> set[bytes]:
        """Live id set for the best chain (read-only; for bulk filtering)."""
        return self._main_included

    # -- registration ------------------------------------------------------

    def register_block(self, block: Macroblock, *, local_time_ms: float) -> RegistrationResult:
        result = self._register_one(block, local_time_ms)
        if result.record is None:
            return result
        accepted = [result.record]
        # Cascade any orphans that were waiting on this block.
        frontier = [result.record]
        while frontier:
            parent = frontier.pop()
            waiting = self._orphans.pop(parent.block.header.hash(), None)
            if not waiting:
                continue
            for child_block, child_time in waiting:
                child = self._register_one(child_block, child_time)
                if child.record is not None:
                    accepted.append(child.record)
                    frontier.append(child.record)
        result.accepted = tuple(accepted)
        return result

    def _register_one(self, block: Macroblock, local_time_ms: float) -> RegistrationResult:
        block_id = block.block_id()
        existing = self.records.get(block_id)
        if existing is not None:
            return RegistrationResult(existing, None)

        parent = self.resolve_parent(block.header)
        if parent is None:
            self._stash_orphan(block, local_time_ms)
            return RegistrationResult(None, RejectReason.BAD_PARENT, orphaned=True)

        params = self.params
        reason = validate_header(
            block.header,
            parent_hash=block.header.prev_hash,
            parent_height=parent.height,
            expected_root=parent.root,
            local_time_ms=local_time_ms,
            tenure_ms=params.tenure_ms,
            expected_bits=params.header_bits,
            verify_pow=params.verify_pow,
        )
        if reason is None:
            reason = validate_macroblock_body(
                block,
                capacity=params.capacity,
                micro_tx_cap=params.micro_tx_cap,
                macro_tx_cap=params.macro_tx_cap,
                scheme=params.scheme,
                expected_micro_bits=params.micro_bits,
                verify_pow=params.verify_pow,
            )
        if reason is not None:
            return RegistrationResult(None, reason)

        view = self.state_view(parent)
        seen = self.seen_view(parent)
        report = resolve_validity(block, view, seen)
        state = settle(view, block, report, params.incentives)

        record = BlockRecord(
            block=block,
            block_id=block_id,
            parent_id=parent.block_id,
            root_int=state._root_int,
            supply=state.supply,
            diversity=parent.diversity + report.non_overlapping_valid_count,
            valid_ids=report.valid_tx_ids,
            verdict_counts=Counter(report.verdicts),
            rewards=state.pending,
            delta=state._delta,
            arrival_ms=local_time_ms,
            raw_tx_count=report.raw_tx_count,
        )
        self.records[block_id] = record
        self.by_header.setdefault(block.header.hash(), []).append(block_id)
        if record.key < self.best.key:
            self.best = record
            self._switch_mainline(record)
            self._prune_retained()
        return RegistrationResult(record, None)

    def _stash_orphan(self, block: Macroblock, local_time_ms: float) -> None:
        total = sum(len(v) for v in self._orphans.values())
        if total >= self.orphan_limit:
            return
        waiting = self._orphans.setdefault(block.header.prev_hash, [])
        if not any(b.block_id() == block.block_id() for b, _ in waiting):
            waiting.append((block, local_time_ms))

    # -- mainline maintenance ----------------------------------------------

    def _switch_mainline(self, new_tip: BlockRecord) -> None:
        fork_path, anchor = self._overlay_path(new_tip)
        anchor_pos = self._main_pos[anchor.block_id]
        rollback = self._mainline[anchor_pos + 1 :]
        if rollback:
            self.reorg_count += 1
            self.max_reorg_depth = max(self.max_reorg_depth, len(rollback))
        for bid in reversed(rollback):
            rec = self.records[bid]
            undo = self._undo.pop(bid, None)
            if undo is None:
                raise RuntimeError("reorg deeper than the retained undo window")
            main = self._main
            for account_id, old in undo.items():
                if old is None:
                    del main[account_id]
                else:
                    main[account_id] = old
            self._main_included.difference_update(rec.valid_ids)
            del self._main_pos[bid]
        del self._mainline[anchor_pos + 1 :]
        for rec in reversed(fork_path):
            self._apply_to_main(rec)

    def _apply_to_main(self, record: BlockRecord) -> None:
        if record.delta is None:
            raise RuntimeError("settlement delta evicted; cannot extend mainline")
        main = self._main
        undo: dict[AccountId, Account | None] = {}
        for account_id, entry in record.delta.items():
            undo[account_id] = main.get(account_id)
            main[account_id] = entry
        self._undo[record.block_id] = undo
        self._main_included.update(record.valid_ids)
        self._mainline.append(record.block_id)
        self._main_pos[record.block_id] = len(self._mainline) - 1

    def _prune_retained(self) -> None:
        cutoff = len(self._mainline) - 1 - self.retain_depth
        for pos in range(max(1, cutoff - 4), max(1, cutoff)):
            bid = self._mainline[pos]
            rec = self.records[bid]
            rec.delta = None
            self._undo.pop(bid, None)

    # -- chain access --------------------------------------------------------

    def chain_ids(self, record: BlockRecord) -> list[Hash32]:
        """Block ids from genesis to ``record`` inclusive."""
        path = []
        node: BlockRecord | None = record
        while node is not None:
            path.append(node.block_id)
            node = self.records[node.parent_id] if node.parent_id else None
        path.reverse()
        return path

    def iter_chain(self, record: BlockRecord) -> Iterator[BlockRecord]:
        for bid in self.chain_ids(record):
            yield self.records[bid]

    def best_chain_records(self) -> list[BlockRecord]:
        return [self.records[bid] for bid in self._mainline]

    def expected_supply(self, record: BlockRecord) -> int:
        reward = self.params.incentives.block_reward
        return self.genesis_state.supply + reward * record.height
