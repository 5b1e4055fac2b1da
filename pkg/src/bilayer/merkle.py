"""Binary Merkle tree with domain-separated leaf and interior hashing.

Leaves are hashed as ``H(0x00 || leaf)`` and interior nodes as
``H(0x01 || left || right)`` so that a leaf can never be confused with a
packed pair of children.  A level with an odd number of nodes duplicates
its last node.  The root of an empty list is defined as 32 zero bytes.
"""

from __future__ import annotations

import hashlib
from typing import Sequence

LEAF_PREFIX = b"\x00"
NODE_PREFIX = b"\x01"
EMPTY_ROOT = b"\x00" * 32


def merkle_root(leaves: Sequence[bytes]) -> bytes:
    """Return the 32-byte root committing to ``leaves`` in order."""
    if not leaves:
        return EMPTY_ROOT
    sha = hashlib.sha256
    level = [sha(LEAF_PREFIX + leaf).digest() for leaf in leaves]
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        level = [
            sha(NODE_PREFIX + level[i] + level[i + 1]).digest()
            for i in range(0, len(level), 2)
        ]
    return level[0]
