"""Stable seed derivation.

Every stochastic component takes an explicit seed, and related components
derive theirs from one root so that runs are reproducible bit-for-bit.
Derivation hashes the root with a label path, which keeps streams
independent and insensitive to the order in which they are created.
"""

from __future__ import annotations

import hashlib

__all__ = ["derive_seed"]


def derive_seed(root: int, *labels: int | str) -> int:
    """Deterministic 63-bit seed from a root seed and a label path."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(root)).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest(), "little") & (2**63 - 1)
