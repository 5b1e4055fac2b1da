"""Account ledger with deferred macroblock settlement.

Settlement is deliberately one step behind the chain tip: the node that
builds the next macroblock header settles the previous macroblock and
commits the resulting state root inside that header.  A block that never
gets a successor on the chosen chain is therefore never settled, and its
leader and microblock miners earn nothing.  That property is what makes
withholding a finished block costly.

``LedgerState`` is an immutable snapshot.  Each settle produces a child
snapshot holding only the accounts it touched; lookups walk the parent
chain.  Scenario genesis can declare a *procedural pool* of ``size``
identical accounts (ids are the integers 0..size-1 as 32-byte big-endian)
so that large synthetic populations do not have to be materialized.

The state commitment is an order-free fold: the XOR of
``H(tag || id || balance || nonce)`` over all non-empty accounts, plus a
pool descriptor hash.  Equal states give equal roots regardless of the
order accounts were touched in, and updating the root costs one or two
hashes per touched account instead of a full rebuild.  This is a
simulation-grade commitment, not an adversarially hardened one.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import TYPE_CHECKING, Iterator, Mapping, NamedTuple

from .blocks import AccountId, Hash32, Macroblock, sha256

if TYPE_CHECKING:
    from .chain import ValidityReport

_U64 = (1 << 64) - 1


class Account(NamedTuple):
    balance: int
    nonce: int


EMPTY_ACCOUNT = Account(0, 0)


class SettlementError(Exception):
    """A validity report does not match the state it is applied to."""


@dataclass(frozen=True, slots=True)
class GenesisPool:
    """Procedural genesis population: ``size`` accounts of equal balance."""

    size: int
    balance: int

    def __post_init__(self) -> None:
        if self.size < 0 or self.balance < 0:
            raise ValueError("pool size and balance must be non-negative")


@dataclass(frozen=True, slots=True)
class IncentiveParams:
    """Reward split between the leader and the microblock miners.

    The leader of a settled macroblock receives the block reward plus a
    fixed fraction of every transaction fee; the miner of the microblock
    that carried the transaction receives the remainder of the fee.
    """

    block_reward: int
    leader_fee_share: Fraction

    def __post_init__(self) -> None:
        if self.block_reward < 0:
            raise ValueError("block reward must be non-negative")
        if not 0 <= self.leader_fee_share <= 1:
            raise ValueError("leader fee share must be within [0, 1]")

    def leader_cut(self, fee: int) -> int:
        frac = self.leader_fee_share
        return fee * frac.numerator // frac.denominator


def pool_account_id(index: int) -> AccountId:
    return index.to_bytes(32, "big")


def _account_leaf(account_id: AccountId, balance: int, nonce: int) -> int:
    digest = sha256(
        b"acct/" + account_id + balance.to_bytes(8, "big") + nonce.to_bytes(8, "big")
    )
    return int.from_bytes(digest, "big")


def _pool_leaf(pool: GenesisPool) -> int:
    digest = sha256(
        b"pool/" + pool.size.to_bytes(8, "big") + pool.balance.to_bytes(8, "big")
    )
    return int.from_bytes(digest, "big")


class LedgerState:
    """Immutable account snapshot with structural sharing."""

    __slots__ = ("_parent", "_delta", "pool", "_root_int", "supply", "pending", "depth")

    def __init__(
        self,
        parent: "LedgerState | None",
        delta: dict[AccountId, Account],
        pool: GenesisPool | None,
        root_int: int,
        supply: int,
        pending: tuple[tuple[AccountId, int], ...],
    ) -> None:
        self._parent = parent
        self._delta = delta
        self.pool = pool
        self._root_int = root_int
        self.supply = supply
        # Reward entries credited by the settle that produced this state.
        self.pending = pending
        self.depth = 0 if parent is None else parent.depth + 1

    @classmethod
    def genesis(
        cls,
        allocations: Mapping[AccountId, int] | None = None,
        pool: GenesisPool | None = None,
    ) -> "LedgerState":
        delta: dict[AccountId, Account] = {}
        root = 0
        supply = 0
        if pool is not None and pool.size:
            root ^= _pool_leaf(pool)
            supply += pool.size * pool.balance
        for account_id, balance in (allocations or {}).items():
            if balance < 0:
                raise ValueError("genesis balances must be non-negative")
            if account_id in delta:
                raise ValueError("duplicate genesis allocation")
            delta[account_id] = Account(balance, 0)
            root ^= _account_leaf(account_id, balance, 0)
            supply += balance
        return cls(None, delta, pool, root, supply, ())

    @property
    def root(self) -> Hash32:
        return self._root_int.to_bytes(32, "big")

    def _pool_default(self, account_id: AccountId) -> Account | None:
        pool = self.pool
        if pool is not None and int.from_bytes(account_id, "big") < pool.size:
            return Account(pool.balance, 0)
        return None

    def get(self, account_id: AccountId) -> Account:
        state: LedgerState | None = self
        while state is not None:
            entry = state._delta.get(account_id)
            if entry is not None:
                return entry
            state = state._parent
        return self._pool_default(account_id) or EMPTY_ACCOUNT

    def items(self) -> Iterator[tuple[AccountId, Account]]:
        """All explicitly materialized accounts, newest layer winning.

        Untouched pool accounts are not enumerated; use ``pool`` plus
        ``touched_pool_count`` to account for them.
        """
        seen: set[AccountId] = set()
        state: LedgerState | None = self
        while state is not None:
            for account_id, entry in state._delta.items():
                if account_id not in seen:
                    seen.add(account_id)
                    yield account_id, entry
            state = state._parent

    def touched_pool_count(self) -> int:
        if self.pool is None:
            return 0
        size = self.pool.size
        return sum(
            1 for account_id, _ in self.items()
            if int.from_bytes(account_id, "big") < size
        )

    def total_balance(self) -> int:
        """Exact sum of all balances, pool included. Walks every entry."""
        total = sum(entry.balance for _, entry in self.items())
        if self.pool is not None:
            total += (self.pool.size - self.touched_pool_count()) * self.pool.balance
        return total


def recompute_root(state: LedgerState) -> Hash32:
    """Root rebuilt from scratch; the oracle for the incremental fold."""
    root = 0
    if state.pool is not None and state.pool.size:
        root ^= _pool_leaf(state.pool)
        size = state.pool.size
    else:
        size = 0
    pool_balance = state.pool.balance if state.pool else 0
    for account_id, entry in state.items():
        if entry != EMPTY_ACCOUNT:
            root ^= _account_leaf(account_id, entry.balance, entry.nonce)
        if int.from_bytes(account_id, "big") < size:
            root ^= _account_leaf(account_id, pool_balance, 0)
    return root.to_bytes(32, "big")


def state_root(state: LedgerState) -> Hash32:
    return state.root


def settle(
    parent: LedgerState,
    block: Macroblock,
    report: "ValidityReport",
    params: IncentiveParams,
) -> LedgerState:
    """Apply one macroblock to ``parent`` and return the settled state.

    Valid transactions apply in scan order, so later transactions see the
    balances left by earlier ones.  Reward entries (block reward, fee
    split) are credited after the scan; income earned inside a block is
    not spendable within that same block.

    ``report`` must have been produced against ``parent``; the amounts are
    re-checked during application and a mismatch raises
    ``SettlementError`` rather than corrupting the state.
    """
    from .chain import Verdict  # local import to avoid a module cycle

    delta: dict[AccountId, Account] = {}
    parent_get = parent.get

    def get(account_id: AccountId) -> Account:
        entry = delta.get(account_id)
        return entry if entry is not None else parent_get(account_id)

    fee_income: dict[AccountId, int] = {}
    leader = block.header.miner
    leader_fees = 0
    verdicts = report.verdicts
    if len(verdicts) != block.tx_count():
        raise SettlementError("verdict count does not match transaction count")
    index = 0
    for micro, tx in block.iter_transactions():
        verdict = verdicts[index]
        index += 1
        if verdict is not Verdict.VALID:
            continue
        sender = get(tx.sender)
        cost = tx.amount + tx.fee
        if sender.nonce != tx.nonce or sender.balance < cost:
            raise SettlementError(
                "report marks a transaction valid that does not apply"
            )
        delta[tx.sender] = Account(sender.balance - cost, sender.nonce + 1)
        recipient = get(tx.recipient)
        delta[tx.recipient] = Account(recipient.balance + tx.amount, recipient.nonce)
        cut = params.leader_cut(tx.fee)
        leader_fees += cut
        rest = tx.fee - cut
        if rest:
            miner = micro.header.miner
            fee_income[miner] = fee_income.get(miner, 0) + rest

    rewards: list[tuple[AccountId, int]] = []
    for miner, income in fee_income.items():
        rewards.append((miner, income))
    rewards.append((leader, leader_fees + params.block_reward))
    for beneficiary, amount in rewards:
        if amount == 0:
            continue
        entry = get(beneficiary)
        delta[beneficiary] = Account(entry.balance + amount, entry.nonce)

    root = parent._root_int
    for account_id, new_entry in delta.items():
        old_entry = parent_get(account_id)
        if old_entry != EMPTY_ACCOUNT:
            root ^= _account_leaf(account_id, old_entry.balance, old_entry.nonce)
        if new_entry != EMPTY_ACCOUNT:
            root ^= _account_leaf(account_id, new_entry.balance, new_entry.nonce)

    return LedgerState(
        parent,
        delta,
        parent.pool,
        root,
        parent.supply + params.block_reward,
        tuple(rewards),
    )
