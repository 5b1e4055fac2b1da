"""Proof-of-work primitives, in two interchangeable flavours.

Real mode actually grinds nonces: ``mine_real`` scans nonces in order and
returns the smallest one whose SHA-256 digest clears the difficulty, so it
is fully deterministic.  It is only practical at toy difficulties.

Simulated mode keeps the artifacts but replaces the search with a draw
from the implied solve-time distribution: a miner hashing at ``rate``
attempts per second against a ``bits``-bit target solves after an
exponentially distributed time with mean ``2**bits / rate``.  Draws come
from a caller-owned ``random.Random`` stream so runs are reproducible and
restarts stay memoryless.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass

from .blocks import sha256

MAX_BITS = 64


@dataclass(frozen=True, slots=True)
class Difficulty:
    """Required number of leading zero bits in the digest."""

    bits: int

    def __post_init__(self) -> None:
        if not 0 <= self.bits <= MAX_BITS:
            raise ValueError(f"difficulty bits must be in [0, {MAX_BITS}]")

    @property
    def expected_attempts(self) -> int:
        return 1 << self.bits


@dataclass(frozen=True, slots=True)
class HashPower:
    """Hash attempts per second of one miner."""

    rate: float

    def __post_init__(self) -> None:
        if not self.rate > 0:
            raise ValueError("hash rate must be positive")


def leading_zero_bits(digest: bytes) -> int:
    """Number of leading zero bits in ``digest``."""
    value = int.from_bytes(digest, "big")
    return len(digest) * 8 - value.bit_length()


def check_pow(data: bytes, difficulty: Difficulty) -> bool:
    return leading_zero_bits(sha256(data)) >= difficulty.bits


def mine_real(
    template: bytes,
    nonce_offset: int,
    difficulty: Difficulty,
    *,
    start_nonce: int = 0,
    max_attempts: int | None = None,
) -> int | None:
    """Find the smallest nonce >= ``start_nonce`` satisfying the target.

    ``template`` is the full serialized artifact with an 8-byte big-endian
    nonce slot at ``nonce_offset``.  Returns the nonce, or None when
    ``max_attempts`` nonces were tried without success (the caller decides
    whether to resume from a later ``start_nonce``).
    """
    if nonce_offset < 0 or nonce_offset + 8 > len(template):
        raise ValueError("nonce slot out of template bounds")
    buf = bytearray(template)
    bits = difficulty.bits
    pack_into = struct.pack_into
    nonce = start_nonce
    remaining = max_attempts
    while True:
        if remaining is not None:
            if remaining == 0:
                return None
            remaining -= 1
        pack_into(">Q", buf, nonce_offset, nonce)
        if leading_zero_bits(sha256(bytes(buf))) >= bits:
            return nonce
        nonce += 1


def sample_mining_time(
    difficulty: Difficulty, power: HashPower, rng: random.Random
) -> float:
    """Draw one simulated solve time, in seconds.

    Exponential with mean ``2**bits / rate``; successive draws from the
    same stream are independent, which is what makes aborting and
    restarting a search statistically free.
    """
    return rng.expovariate(power.rate / difficulty.expected_attempts)
