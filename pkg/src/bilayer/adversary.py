"""Misbehaving node strategies.

Three deviations from honest behaviour are modelled, each as a drop-in
replacement for ``HonestNode``:

``SelfishLeader``
    Wins rounds publicly but assembles its macroblock the moment its
    header is adopted, keeps the finished block private, and mines the
    next header on top of it during its own tenure — a head start honest
    nodes cannot match because they lack the settled state until the
    block is released.  The block is released exactly at tenure end
    (indistinguishable from honest timing), together with any next-height
    header found early.  If a competing block that would win fork choice
    arrives first, the attacker rationally abandons the private line.

``DoubleSpendLeader``
    On winning a round, gossips a payment to a victim, packages it
    publicly, and signs a *second* body for the same header that omits
    the microblocks carrying that payment (equivocation).  It then mines
    privately on the second body, racing the public chain.  Trials are
    measured passively: the private branch is never released, so one long
    run yields many independent races.  A race at public depth ``d``
    means a victim accepting ``d``-deep confirmations would have been
    reversed had the attacker released, which is what the harness
    reports as success-at-depth.

``DetainingRelay``
    Forwards rival headers only after a configured delay, a cheap way to
    bias round leadership toward itself without breaking any rule.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

from .blocks import (
    Macroblock,
    MacroblockHeader,
    Transaction,
    compute_body_root,
    tx_id,
)
from .netsim import MSG_HEADER, MSG_MACRO
from .node import HonestNode, RoundState
from .store import BlockRecord


class SelfishLeader(HonestNode):
    """Withholds its assembled block to mine ahead during its own tenure."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        # Unreleased private blocks by id, in chain order.
        self._unreleased: dict[bytes, Macroblock] = {}
        self._withheld_headers: list[MacroblockHeader] = []
        self.leads = 0
        self.kept = 0
        self.abandoned = 0

    # Header handling: own wins go private; rival headers are ignored
    # while a private line exists (the rational check runs on blocks).
    def _adopt_header(self, header: MacroblockHeader, parent: BlockRecord) -> None:
        if header.miner != self.account:
            if self._unreleased:
                return
            super()._adopt_header(header, parent)
            return
        self.leads += 1
        self.epoch += 1
        round_state = RoundState(
            header=header, parent=parent, is_leader=True, started_ms=self.sim.now
        )
        block = self._assemble(round_state)
        result = self.store.register_block(block, local_time_ms=self.sim.now)
        record = result.record
        if record is None:  # pragma: no cover - own empty block always validates
            raise RuntimeError(f"private block rejected: {result.reason}")
        self.heard.add(record.block_id)
        self._unreleased[record.block_id] = block
        release_at = self.sim.now + self.consensus.tenure_ms
        self.sim.call_at(
            release_at, "selfish-release", lambda: self._release(record.block_id)
        )
        self._adopt_tip(record)  # head start: next header mines on this

    def _header_found(self) -> None:
        if not self._unreleased:
            super()._header_found()
            return
        # Private phase: extend the withheld line without broadcasting.
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
        self._withheld_headers.append(header)
        self._adopt_header(header, tip)

    def _release(self, block_id: bytes) -> None:
        block = self._unreleased.pop(block_id, None)
        if block is None:
            return  # abandoned in the meantime
        self.kept += 1
        self.sim.broadcast(self.node_id, MSG_MACRO, block, block.block_id())
        header_hash = block.header.hash()
        keep = []
        for header in self._withheld_headers:
            if header.prev_hash == header_hash:
                self.sim.broadcast(self.node_id, MSG_HEADER, header, header.hash())
            else:
                keep.append(header)
        self._withheld_headers = keep

    def _maybe_adopt(self, record: BlockRecord) -> None:
        if not self._unreleased:
            super()._maybe_adopt(record)
            return
        if record.block_id in self._unreleased or record.key >= self.tip.key:
            return
        # A public chain now beats the private line: cut losses.
        self.abandoned += len(self._unreleased)
        self._unreleased.clear()
        self._withheld_headers.clear()
        self._adopt_tip(record)


@dataclass
class RaceOutcome:
    """One double-spend attempt, measured passively."""

    started_ms: float
    max_depth_overtaken: int  # -1 when the private line never led
    gave_up: bool


class DoubleSpendLeader(HonestNode):
    """Equivocates on its own round and races the public chain privately."""

    def __init__(
        self,
        *args,
        victim: bytes,
        spend_amount: int = 5,
        spend_fee: int = 1,
        give_up_gap: int = 4,
        max_tracked_depth: int = 8,
        **kwargs,
    ):
        super().__init__(*args, **kwargs)
        self.victim = victim
        self.spend_amount = spend_amount
        self.spend_fee = spend_fee
        self.give_up_gap = give_up_gap
        self.max_tracked_depth = max_tracked_depth
        self.outcomes: list[RaceOutcome] = []
        self.void_trials = 0
        self._race: dict[str, Any] | None = None
        self._own_private: set[bytes] = set()
        self._public_best: BlockRecord = self.store.genesis_record
        self._pending_spend: Transaction | None = None

    # -- honest-side bookkeeping ------------------------------------------------

    def _note_public(self, record: BlockRecord) -> None:
        if record.block_id not in self._own_private and record.key < self._public_best.key:
            self._public_best = record

    def _maybe_adopt(self, record: BlockRecord) -> None:
        self._note_public(record)
        if self._race is None:
            super()._maybe_adopt(record)

    def _on_macro(self, block: Macroblock, sender: int) -> None:
        if self._race is None:
            super()._on_macro(block, sender)
            return
        # Racing: register and observe, but never adopt the public side.
        result = self.store.register_block(block, local_time_ms=self.sim.now)
        if result.record is None:
            return
        for record in result.accepted:
            self.heard.add(record.block_id)
            self._note_public(record)
        self._race_evaluate()

    def _consider_header(
        self, header: MacroblockHeader, parent: BlockRecord, sender: int
    ) -> None:
        # While racing, public headers must not pull the tip over to the
        # public chain (the base class would adopt a better parent); the
        # race tracks public progress through macroblocks alone.
        if self._race is not None:
            return
        super()._consider_header(header, parent, sender)

    def _adopt_header(self, header: MacroblockHeader, parent: BlockRecord) -> None:
        if self._race is not None:
            return  # all hash power is on the private branch
        if header.miner == self.account:
            super()._adopt_header(header, parent)
            # Leader of a public round: seed the payment to the victim.
            self._gossip_spend(parent)
            return
        super()._adopt_header(header, parent)

    def _gossip_spend(self, parent: BlockRecord) -> None:
        state = self.store.state_view(parent)
        account = state.get(self.account)
        cost = self.spend_amount + self.spend_fee
        if account.balance < cost:
            self._pending_spend = None
            return
        tx = Transaction(
            sender=self.account,
            recipient=self.victim,
            amount=self.spend_amount,
            fee=self.spend_fee,
            nonce=account.nonce,
        )
        self._pending_spend = tx
        self.sim.gossip_txs(self.node_id, (tx,))

    # -- tenure end: equivocate ---------------------------------------------------

    def on_tenure_end(self, epoch: int) -> None:
        if self.down or epoch != self.epoch:
            return
        round_state = self.round
        if round_state is None or not round_state.is_leader:
            return
        spend = self._pending_spend
        self._pending_spend = None
        public_block = self._assemble(round_state)
        self.blocks_assembled += 1
        result = self.store.register_block(public_block, local_time_ms=self.sim.now)
        self.sim.broadcast(self.node_id, MSG_MACRO, public_block, public_block.block_id())
        record = result.record
        if record is None:  # pragma: no cover
            raise RuntimeError(f"own block rejected: {result.reason}")
        self.heard.add(record.block_id)
        self._note_public(record)
        spend_id = tx_id(spend) if spend is not None else None
        if spend_id is None or spend_id not in set(record.valid_ids):
            # Payment did not make it in: nothing to double spend.
            self.void_trials += 1
            self._maybe_adopt(record)
            self._retry_orphan_headers()
            return
        private_block = self._equivocate(round_state, spend_id)
        if private_block is None:
            self.void_trials += 1
            self._maybe_adopt(record)
            return
        private = self.store.register_block(private_block, local_time_ms=self.sim.now)
        if private.record is None:  # pragma: no cover
            raise RuntimeError(f"equivocating body rejected: {private.reason}")
        self.heard.add(private.record.block_id)
        self._own_private.add(private.record.block_id)
        self._start_race(record, private.record)

    def _equivocate(self, round_state: RoundState, spend_id: bytes) -> Macroblock | None:
        """Second body for the same header, omitting the victim's payment."""
        keep = [
            m
            for m in round_state.pool
            if m.header.miner != self.account and spend_id not in m.tx_ids()
        ]
        if len(keep) == len(round_state.pool):
            return None  # bodies would be identical
        trimmed = RoundState(
            header=round_state.header,
            parent=round_state.parent,
            is_leader=True,
            started_ms=round_state.started_ms,
        )
        trimmed.pool = keep
        return self._assemble(trimmed)

    # -- the race ---------------------------------------------------------------------

    def _start_race(self, public_record: BlockRecord, private_record: BlockRecord) -> None:
        self.epoch += 1
        self.round = None
        self.tip = private_record
        self._public_best = public_record
        self._race = {
            "anchor_height": public_record.height,
            "best_depth": -1,
            "started": self.sim.now,
        }
        self._race_evaluate()
        self._start_header_mining()

    def on_mining_complete(self, epoch: int, work: Any) -> None:
        if self.down or epoch != self.epoch:
            return
        if self._race is None:
            super().on_mining_complete(epoch, work)
            return
        # Private header found: extend the withheld branch with an empty block.
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
        signature = self.consensus.scheme.sign(
            self.account, header.hash() + compute_body_root(())
        )
        block = Macroblock(header=header, microblocks=(), leader_signature=signature)
        result = self.store.register_block(block, local_time_ms=self.sim.now)
        if result.record is None:  # pragma: no cover
            raise RuntimeError(f"private extension rejected: {result.reason}")
        self.heard.add(result.record.block_id)
        self._own_private.add(result.record.block_id)
        self.tip = result.record
        self._race_evaluate()
        if self._race is not None:
            self._start_header_mining()

    def _race_evaluate(self) -> None:
        race = self._race
        if race is None:
            return
        public_height = self._public_best.height
        private_height = self.tip.height
        depth = public_height - race["anchor_height"]
        if private_height > public_height:
            race["best_depth"] = max(race["best_depth"], depth)
        overtaken_deep = race["best_depth"] >= self.max_tracked_depth
        hopeless = public_height - private_height >= self.give_up_gap
        # Both chains can march in lockstep for a long time; concede
        # before the fork base leaves the store's retained state window,
        # after which private extensions could no longer be settled.
        stretched = depth >= self.store.retain_depth - 2
        if overtaken_deep or hopeless or stretched:
            self._end_race(gave_up=hopeless or stretched)

    def _end_race(self, *, gave_up: bool) -> None:
        race = self._race
        assert race is not None
        self.outcomes.append(
            RaceOutcome(
                started_ms=race["started"],
                max_depth_overtaken=race["best_depth"],
                gave_up=gave_up,
            )
        )
        self._race = None
        self.epoch += 1
        self.round = None
        self.tip = self._public_best
        self._start_header_mining()
        self._retry_orphan_headers()

    def success_rate_at(self, depth: int) -> float:
        """Fraction of completed races that overtook at or beyond ``depth``."""
        if not self.outcomes:
            return 0.0
        wins = sum(1 for o in self.outcomes if o.max_depth_overtaken >= depth)
        return wins / len(self.outcomes)


class DetainingRelay(HonestNode):
    """Relays rivals' headers late to bias leadership its own way."""

    def __init__(self, *args, detain_ms: float = 0.0, **kwargs):
        super().__init__(*args, **kwargs)
        self.detain_ms = detain_ms

    def forward_delay_ms(self, msg_kind: str, payload: Any, sender: int) -> float | None:
        base = super().forward_delay_ms(msg_kind, payload, sender)
        if base is None:
            return None
        if msg_kind == MSG_HEADER and payload.miner != self.account:
            return base + self.detain_ms
        return base
