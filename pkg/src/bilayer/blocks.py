"""Wire types for the two-layer block structure.

The chain alternates between two artifact kinds.  A *macroblock header* is a
proof-of-work leadership token: whoever mines one becomes the leader of the
round it opens.  During the round, other nodes mine *microblocks*, which are
the transaction carriers.  At the end of its tenure the leader packages a
subset of the microblocks it received into a *macroblock* and signs the
package; the header plus the packaged body extend the chain by one block.

Everything here is a frozen value type with a canonical byte encoding.
Integers are big-endian and fixed-width.  The macroblock header encoding is
exactly ``HEADER_SIZE`` (200) bytes:

    version       u32      offset   0
    height        u64      offset   4
    prev_hash     32 bytes  offset  12
    state_root    32 bytes  offset  44
    timestamp_ms  u64      offset  76
    difficulty    u32      offset  84
    miner         32 bytes  offset  88
    nonce         u64      offset 120
    reserved      72 bytes  offset 128  (all zero)

The nonce sits at a fixed offset so miners can grind it in place.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Iterator, Protocol, Sequence, TypeAlias

from .merkle import merkle_root

Hash32: TypeAlias = bytes
AccountId: TypeAlias = bytes

HASH_SIZE = 32
ZERO_HASH: Hash32 = b"\x00" * 32

HEADER_SIZE = 200
HEADER_NONCE_OFFSET = 120
HEADER_RESERVED_SIZE = 72

MICRO_HEADER_SIZE = 116
MICRO_NONCE_OFFSET = 108

TX_BASE_SIZE = 89
MAX_PAYLOAD_HINT = 64

_U64_MAX = 2**64 - 1
_U32_MAX = 2**32 - 1

_HEADER_STRUCT = struct.Struct(">IQ32s32sQI32sQ72s")
_MICRO_HEADER_STRUCT = struct.Struct(">32s32s32sQIQ")
_TX_STRUCT = struct.Struct(">32s32sQQQB")


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def _check_hash(name: str, value: bytes) -> None:
    if not isinstance(value, bytes) or len(value) != HASH_SIZE:
        raise ValueError(f"{name} must be {HASH_SIZE} bytes")


def _check_u64(name: str, value: int) -> None:
    if not 0 <= value <= _U64_MAX:
        raise ValueError(f"{name} out of u64 range: {value}")


def _check_u32(name: str, value: int) -> None:
    if not 0 <= value <= _U32_MAX:
        raise ValueError(f"{name} out of u32 range: {value}")


@dataclass(frozen=True, slots=True)
class Transaction:
    """A transfer order from one account to another.

    ``nonce`` must equal the sender's current account nonce for the
    transaction to apply.  ``payload_hint`` is opaque ballast (up to 64
    bytes) so scenarios can model realistic byte sizes; it never affects
    validity.
    """

    sender: AccountId
    recipient: AccountId
    amount: int
    fee: int
    nonce: int
    payload_hint: bytes = b""
    _id: bytes | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        _check_hash("sender", self.sender)
        _check_hash("recipient", self.recipient)
        _check_u64("amount", self.amount)
        _check_u64("fee", self.fee)
        _check_u64("nonce", self.nonce)
        if self.amount + self.fee > _U64_MAX:
            raise ValueError("amount + fee overflows u64")
        if len(self.payload_hint) > MAX_PAYLOAD_HINT:
            raise ValueError("payload_hint longer than 64 bytes")

    def to_bytes(self) -> bytes:
        return (
            _TX_STRUCT.pack(
                self.sender,
                self.recipient,
                self.amount,
                self.fee,
                self.nonce,
                len(self.payload_hint),
            )
            + self.payload_hint
        )

    @property
    def byte_size(self) -> int:
        return TX_BASE_SIZE + len(self.payload_hint)


def tx_id(tx: Transaction) -> Hash32:
    """Content hash identifying a transaction; cached on the instance."""
    cached = tx._id
    if cached is None:
        cached = sha256(tx.to_bytes())
        object.__setattr__(tx, "_id", cached)
    return cached


def transaction_from_bytes(data: bytes, offset: int = 0) -> tuple[Transaction, int]:
    """Decode one transaction, returning it and the next offset."""
    if len(data) - offset < TX_BASE_SIZE:
        raise ValueError("truncated transaction")
    sender, recipient, amount, fee, nonce, plen = _TX_STRUCT.unpack_from(data, offset)
    end = offset + TX_BASE_SIZE + plen
    if len(data) < end:
        raise ValueError("truncated transaction payload")
    payload = data[offset + TX_BASE_SIZE : end]
    return Transaction(sender, recipient, amount, fee, nonce, payload), end


def tx_merkle_root(transactions: Sequence[Transaction]) -> Hash32:
    return merkle_root([tx_id(t) for t in transactions])


@dataclass(frozen=True, slots=True)
class MicroblockHeader:
    """Header of a transaction-carrying block, bound to one round.

    ``round_header_hash`` names the macroblock header whose round this
    microblock was mined for; a microblock is only packageable by that
    round's leader.
    """

    round_header_hash: Hash32
    miner: AccountId
    merkle_root: Hash32
    timestamp_ms: int
    difficulty_bits: int
    nonce: int

    def __post_init__(self) -> None:
        _check_hash("round_header_hash", self.round_header_hash)
        _check_hash("miner", self.miner)
        _check_hash("merkle_root", self.merkle_root)
        _check_u64("timestamp_ms", self.timestamp_ms)
        _check_u32("difficulty_bits", self.difficulty_bits)
        _check_u64("nonce", self.nonce)

    def to_bytes(self) -> bytes:
        return _MICRO_HEADER_STRUCT.pack(
            self.round_header_hash,
            self.miner,
            self.merkle_root,
            self.timestamp_ms,
            self.difficulty_bits,
            self.nonce,
        )


def micro_header_from_bytes(data: bytes, offset: int = 0) -> MicroblockHeader:
    if len(data) - offset < MICRO_HEADER_SIZE:
        raise ValueError("truncated microblock header")
    fields = _MICRO_HEADER_STRUCT.unpack_from(data, offset)
    return MicroblockHeader(*fields)


@dataclass(frozen=True, slots=True)
class Microblock:
    header: MicroblockHeader
    transactions: tuple[Transaction, ...]
    _hash: bytes | None = field(default=None, init=False, repr=False, compare=False)
    _ids: frozenset | None = field(default=None, init=False, repr=False, compare=False)

    def hash(self) -> Hash32:
        """Identity of the microblock: hash of its header bytes.

        The header commits to the transaction list through the Merkle
        root, so this hash binds the full content.
        """
        cached = self._hash
        if cached is None:
            cached = sha256(self.header.to_bytes())
            object.__setattr__(self, "_hash", cached)
        return cached

    def tx_ids(self) -> frozenset:
        cached = self._ids
        if cached is None:
            cached = frozenset(tx_id(t) for t in self.transactions)
            object.__setattr__(self, "_ids", cached)
        return cached

    @property
    def byte_size(self) -> int:
        return MICRO_HEADER_SIZE + 4 + sum(t.byte_size for t in self.transactions)

    def to_bytes(self) -> bytes:
        parts = [self.header.to_bytes(), struct.pack(">I", len(self.transactions))]
        parts.extend(t.to_bytes() for t in self.transactions)
        return b"".join(parts)


def microblock_from_bytes(data: bytes, offset: int = 0) -> tuple[Microblock, int]:
    header = micro_header_from_bytes(data, offset)
    offset += MICRO_HEADER_SIZE
    (count,) = struct.unpack_from(">I", data, offset)
    offset += 4
    txs = []
    for _ in range(count):
        tx, offset = transaction_from_bytes(data, offset)
        txs.append(tx)
    return Microblock(header, tuple(txs)), offset


@dataclass(frozen=True, slots=True)
class MacroblockHeader:
    """The 200-byte leadership token that opens a round."""

    version: int
    height: int
    prev_hash: Hash32
    state_root: Hash32
    timestamp_ms: int
    difficulty_bits: int
    miner: AccountId
    nonce: int
    reserved: bytes = b"\x00" * HEADER_RESERVED_SIZE
    _hash: bytes | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        _check_u32("version", self.version)
        _check_u64("height", self.height)
        _check_hash("prev_hash", self.prev_hash)
        _check_hash("state_root", self.state_root)
        _check_u64("timestamp_ms", self.timestamp_ms)
        _check_u32("difficulty_bits", self.difficulty_bits)
        _check_hash("miner", self.miner)
        _check_u64("nonce", self.nonce)
        if len(self.reserved) != HEADER_RESERVED_SIZE:
            raise ValueError("reserved padding must be 72 bytes")

    def to_bytes(self) -> bytes:
        encoded = _HEADER_STRUCT.pack(
            self.version,
            self.height,
            self.prev_hash,
            self.state_root,
            self.timestamp_ms,
            self.difficulty_bits,
            self.miner,
            self.nonce,
            self.reserved,
        )
        assert len(encoded) == HEADER_SIZE
        return encoded

    def hash(self) -> Hash32:
        cached = self._hash
        if cached is None:
            cached = sha256(self.to_bytes())
            object.__setattr__(self, "_hash", cached)
        return cached


def header_from_bytes(data: bytes, offset: int = 0) -> MacroblockHeader:
    if len(data) - offset < HEADER_SIZE:
        raise ValueError(f"macroblock header must be {HEADER_SIZE} bytes")
    fields = _HEADER_STRUCT.unpack_from(data, offset)
    return MacroblockHeader(*fields)


def compute_body_root(microblocks: Sequence[Microblock]) -> Hash32:
    """Merkle commitment to the ordered list of packaged microblocks."""
    return merkle_root([m.hash() for m in microblocks])


@dataclass(frozen=True, slots=True)
class Macroblock:
    """A completed round: header plus the leader-signed package."""

    header: MacroblockHeader
    microblocks: tuple[Microblock, ...]
    leader_signature: bytes
    _body_root: bytes | None = field(default=None, init=False, repr=False, compare=False)

    def body_root(self) -> Hash32:
        cached = self._body_root
        if cached is None:
            cached = compute_body_root(self.microblocks)
            object.__setattr__(self, "_body_root", cached)
        return cached

    def block_id(self) -> Hash32:
        """Identity covering both header and body.

        Distinct bodies signed for the same header (equivocation) yield
        distinct block ids.
        """
        return sha256(self.header.hash() + self.body_root())

    def tx_count(self) -> int:
        return sum(len(m.transactions) for m in self.microblocks)

    @property
    def byte_size(self) -> int:
        return (
            HEADER_SIZE
            + 2
            + len(self.leader_signature)
            + 4
            + sum(m.byte_size for m in self.microblocks)
        )

    def iter_transactions(self) -> Iterator[tuple[Microblock, Transaction]]:
        """Scan order used everywhere: microblocks in packaged order,
        transactions in listed order."""
        for micro in self.microblocks:
            for tx in micro.transactions:
                yield micro, tx

    def to_bytes(self) -> bytes:
        parts = [
            self.header.to_bytes(),
            struct.pack(">H", len(self.leader_signature)),
            self.leader_signature,
            struct.pack(">I", len(self.microblocks)),
        ]
        parts.extend(m.to_bytes() for m in self.microblocks)
        return b"".join(parts)


def macroblock_from_bytes(data: bytes, offset: int = 0) -> tuple[Macroblock, int]:
    header = header_from_bytes(data, offset)
    offset += HEADER_SIZE
    (sig_len,) = struct.unpack_from(">H", data, offset)
    offset += 2
    signature = data[offset : offset + sig_len]
    if len(signature) != sig_len:
        raise ValueError("truncated signature")
    offset += sig_len
    (count,) = struct.unpack_from(">I", data, offset)
    offset += 4
    micros = []
    for _ in range(count):
        micro, offset = microblock_from_bytes(data, offset)
        micros.append(micro)
    return Macroblock(header, tuple(micros), signature), offset


def signing_message(block: Macroblock) -> bytes:
    """What the leader signs: header hash concatenated with body root."""
    return block.header.hash() + block.body_root()


class SignatureScheme(Protocol):
    def sign(self, signer: AccountId, message: bytes) -> bytes: ...

    def verify(self, signer: AccountId, message: bytes, signature: bytes) -> bool: ...


class MockSignatures:
    """Deterministic stand-in scheme: sign(k, m) = H(tag || k || m).

    Not unforgeable in any cryptographic sense; it exists so the packaging
    rules can be exercised and so a real scheme can be swapped in behind
    the same two calls.
    """

    _TAG = b"mock-sig/"

    def sign(self, signer: AccountId, message: bytes) -> bytes:
        return sha256(self._TAG + signer + message)

    def verify(self, signer: AccountId, message: bytes, signature: bytes) -> bool:
        return signature == self.sign(signer, message)


DEFAULT_SIGNATURES = MockSignatures()


@dataclass(frozen=True, slots=True)
class Chain:
    """A full chain from genesis to tip, genesis first."""

    blocks: tuple[Macroblock, ...]

    def __post_init__(self) -> None:
        if not self.blocks:
            raise ValueError("a chain contains at least the genesis block")

    @property
    def tip(self) -> Macroblock:
        return self.blocks[-1]

    @property
    def tip_hash(self) -> Hash32:
        return self.blocks[-1].header.hash()

    @property
    def height(self) -> int:
        return self.blocks[-1].header.height

    def extended_with(self, block: Macroblock) -> "Chain":
        return Chain(self.blocks + (block,))
