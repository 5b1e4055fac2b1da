"""Chain validation rules and fork choice.

Transaction validity is resolved by a single in-order scan over a
macroblock's packaged microblocks.  Each transaction receives exactly one
verdict.  A transaction is a *duplicate overlap* when an identical id was
already applied, either in the chain prefix or earlier in the same scan;
only applied (valid) transactions count as seen, so a transaction that
failed once may succeed on a later inclusion if the account state has
caught up.  The remaining verdicts come from the account model: the nonce
must equal the sender's current nonce, and the balance must cover amount
plus fee.

Fork choice ranks competing chains by, in order: number of macroblocks,
total count of non-overlapping valid transactions, and lexicographically
smallest tip header hash.  The third rule is an arbitrary but total
tie-break so that equal-weight forks cannot oscillate.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import AbstractSet, Iterable, Sequence

from .blocks import (
    Chain,
    Hash32,
    Macroblock,
    MacroblockHeader,
    Microblock,
    SignatureScheme,
    DEFAULT_SIGNATURES,
    signing_message,
    tx_id,
    tx_merkle_root,
)
from .ledger import Account, IncentiveParams, LedgerState, settle
from .pow import Difficulty, check_pow


class Verdict(enum.Enum):
    VALID = "valid"
    DUPLICATE_OVERLAP = "duplicate-overlap"
    NONCE_CONFLICT = "nonce-conflict"
    INSUFFICIENT_BALANCE = "insufficient-balance"


class RejectReason(enum.Enum):
    BAD_POW = "bad-pow"
    BAD_PARENT = "bad-parent"
    BAD_HEIGHT = "bad-height"
    BAD_TIMESTAMP = "bad-timestamp"
    BAD_SETTLEMENT = "bad-settlement"
    BAD_ROUND = "bad-round"
    BAD_MERKLE = "bad-merkle"
    OVERSIZE = "oversize"
    BAD_SIGNATURE = "bad-signature"
    OVER_CAPACITY = "over-capacity"
    SELF_PACKAGED = "self-packaged"
    DUPLICATE_MICROBLOCK = "duplicate-microblock"


@dataclass(frozen=True, slots=True)
class ValidityReport:
    """Outcome of scanning one macroblock against a prefix state."""

    verdicts: tuple[Verdict, ...]
    valid_tx_ids: tuple[Hash32, ...]

    @property
    def non_overlapping_valid_count(self) -> int:
        return len(self.valid_tx_ids)

    @property
    def raw_tx_count(self) -> int:
        return len(self.verdicts)


def resolve_validity(
    block: Macroblock,
    prefix_state: LedgerState,
    seen_ids: AbstractSet[bytes],
) -> ValidityReport:
    """Assign a verdict to every transaction in scan order.

    ``prefix_state`` is the settled state of the chain up to and including
    the block's parent; ``seen_ids`` are the ids applied anywhere in that
    prefix.  Valid transactions take effect immediately inside the scan,
    so later transactions observe earlier ones.  Reward credits are not
    part of the scan; income earned by a block is never spendable inside
    that block.
    """
    overlay: dict[bytes, Account] = {}
    prefix_get = prefix_state.get
    local_seen: set[bytes] = set()
    verdicts: list[Verdict] = []
    valid_ids: list[Hash32] = []
    for _, tx in block.iter_transactions():
        txid = tx_id(tx)
        if txid in seen_ids or txid in local_seen:
            verdicts.append(Verdict.DUPLICATE_OVERLAP)
            continue
        sender = overlay.get(tx.sender)
        if sender is None:
            sender = prefix_get(tx.sender)
        if tx.nonce != sender.nonce:
            verdicts.append(Verdict.NONCE_CONFLICT)
            continue
        cost = tx.amount + tx.fee
        if sender.balance < cost:
            verdicts.append(Verdict.INSUFFICIENT_BALANCE)
            continue
        overlay[tx.sender] = Account(sender.balance - cost, sender.nonce + 1)
        recipient = overlay.get(tx.recipient)
        if recipient is None:
            recipient = prefix_get(tx.recipient)
        overlay[tx.recipient] = Account(recipient.balance + tx.amount, recipient.nonce)
        local_seen.add(txid)
        verdicts.append(Verdict.VALID)
        valid_ids.append(txid)
    return ValidityReport(tuple(verdicts), tuple(valid_ids))


def validate_header(
    header: MacroblockHeader,
    *,
    parent_hash: Hash32,
    parent_height: int,
    expected_root: Hash32,
    local_time_ms: float,
    tenure_ms: float,
    expected_bits: int | None = None,
    verify_pow: bool = True,
) -> RejectReason | None:
    """Check a leadership token against the chain it claims to extend.

    Returns None when acceptable, otherwise the first failing rule.  The
    timestamp rule is a plausibility window: the claimed creation time
    must lie within two tenures of the local clock.
    """
    if header.prev_hash != parent_hash:
        return RejectReason.BAD_PARENT
    if header.height != parent_height + 1:
        return RejectReason.BAD_HEIGHT
    if expected_bits is not None and header.difficulty_bits != expected_bits:
        return RejectReason.BAD_POW
    if verify_pow and not check_pow(header.to_bytes(), Difficulty(header.difficulty_bits)):
        return RejectReason.BAD_POW
    if abs(header.timestamp_ms - local_time_ms) > 2 * tenure_ms:
        return RejectReason.BAD_TIMESTAMP
    if header.state_root != expected_root:
        return RejectReason.BAD_SETTLEMENT
    return None


def validate_microblock(
    micro: Microblock,
    round_header_hash: Hash32,
    *,
    micro_tx_cap: int,
    expected_bits: int | None = None,
    verify_pow: bool = True,
) -> RejectReason | None:
    if micro.header.round_header_hash != round_header_hash:
        return RejectReason.BAD_ROUND
    if len(micro.transactions) > micro_tx_cap:
        return RejectReason.OVERSIZE
    if micro.header.merkle_root != tx_merkle_root(micro.transactions):
        return RejectReason.BAD_MERKLE
    if expected_bits is not None and micro.header.difficulty_bits != expected_bits:
        return RejectReason.BAD_POW
    if verify_pow and not check_pow(
        micro.header.to_bytes(), Difficulty(micro.header.difficulty_bits)
    ):
        return RejectReason.BAD_POW
    return None


def validate_macroblock_body(
    block: Macroblock,
    *,
    capacity: int,
    micro_tx_cap: int,
    macro_tx_cap: int | None = None,
    scheme: SignatureScheme = DEFAULT_SIGNATURES,
    expected_micro_bits: int | None = None,
    verify_pow: bool = True,
) -> RejectReason | None:
    """Structural checks on the packaged body (header checked separately).

    The self-packaging rule is enforced here: a leader has no right to
    package microblocks it mined itself, so any microblock whose miner is
    the header's miner invalidates the whole block.
    """
    if not scheme.verify(block.header.miner, signing_message(block), block.leader_signature):
        return RejectReason.BAD_SIGNATURE
    if len(block.microblocks) > capacity:
        return RejectReason.OVER_CAPACITY
    if macro_tx_cap is not None and block.tx_count() > macro_tx_cap:
        return RejectReason.OVERSIZE
    round_hash = block.header.hash()
    seen_micro: set[bytes] = set()
    for micro in block.microblocks:
        if micro.header.miner == block.header.miner:
            return RejectReason.SELF_PACKAGED
        digest = micro.hash()
        if digest in seen_micro:
            return RejectReason.DUPLICATE_MICROBLOCK
        seen_micro.add(digest)
        reason = validate_microblock(
            micro,
            round_hash,
            micro_tx_cap=micro_tx_cap,
            expected_bits=expected_micro_bits,
            verify_pow=verify_pow,
        )
        if reason is not None:
            return reason
    return None


@dataclass(frozen=True, slots=True)
class ChainEvaluation:
    """Replay result for a full chain: reports and settled states per block.

    ``states[i]`` is the ledger after settling ``chain.blocks[i]``;
    ``states[0]`` is the genesis state itself.
    """

    reports: tuple[ValidityReport, ...]
    states: tuple[LedgerState, ...]

    @property
    def diversity(self) -> int:
        return sum(r.non_overlapping_valid_count for r in self.reports)

    @property
    def final_state(self) -> LedgerState:
        return self.states[-1]


def evaluate_chain(
    chain: Chain, genesis_state: LedgerState, params: IncentiveParams
) -> ChainEvaluation:
    """Replay every block after genesis, threading state and seen ids."""
    state = genesis_state
    seen: set[bytes] = set()
    reports: list[ValidityReport] = []
    states: list[LedgerState] = [state]
    for block in chain.blocks[1:]:
        report = resolve_validity(block, state, seen)
        state = settle(state, block, report, params)
        seen.update(report.valid_tx_ids)
        reports.append(report)
        states.append(state)
    return ChainEvaluation(tuple(reports), tuple(states))


def count_non_overlapping(
    chain: Chain, genesis_state: LedgerState, params: IncentiveParams
) -> tuple[tuple[int, ...], int]:
    """Per-block and total counts of non-overlapping valid transactions."""
    evaluation = evaluate_chain(chain, genesis_state, params)
    per_block = tuple(r.non_overlapping_valid_count for r in evaluation.reports)
    return per_block, sum(per_block)


def expected_settlement(
    chain: Chain, genesis_state: LedgerState, params: IncentiveParams
) -> Hash32:
    """State root a new header extending ``chain`` must commit to."""
    return evaluate_chain(chain, genesis_state, params).final_state.root


@dataclass(frozen=True, slots=True, order=True)
class ForkChoiceKey:
    """Sortable ranking; smaller sorts first, the minimum wins.

    Built as (-macroblocks, -diversity, tip hash) so that more blocks,
    then more diversity, then the smaller hash are preferred.
    """

    neg_macroblock_count: int
    neg_diversity: int
    tip_hash: Hash32

    @classmethod
    def for_chain(
        cls, chain: Chain, genesis_state: LedgerState, params: IncentiveParams
    ) -> "ForkChoiceKey":
        _, diversity = count_non_overlapping(chain, genesis_state, params)
        return cls(-(len(chain.blocks) - 1), -diversity, chain.tip_hash)

    @classmethod
    def from_values(
        cls, macroblock_count: int, diversity: int, tip_hash: Hash32
    ) -> "ForkChoiceKey":
        return cls(-macroblock_count, -diversity, tip_hash)


def fork_choice(
    candidates: Iterable[Chain],
    genesis_state: LedgerState,
    params: IncentiveParams,
) -> Chain:
    """Pick the winning chain among candidates sharing a genesis."""
    best_chain: Chain | None = None
    best_key: ForkChoiceKey | None = None
    for chain in candidates:
        key = ForkChoiceKey.for_chain(chain, genesis_state, params)
        if best_key is None or key < best_key:
            best_chain = chain
            best_key = key
    if best_chain is None:
        raise ValueError("fork_choice requires at least one candidate")
    return best_chain


def validate_chain_links(blocks: Sequence[Macroblock]) -> RejectReason | None:
    """Parent hash and height continuity over an ordered block list."""
    for parent, child in zip(blocks, blocks[1:]):
        if child.header.prev_hash != parent.header.hash():
            return RejectReason.BAD_PARENT
        if child.header.height != parent.header.height + 1:
            return RejectReason.BAD_HEIGHT
    return None
