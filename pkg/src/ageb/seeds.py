"""Seed fan-out: one root seed, per-purpose derived streams.

Every random decision in the toolkit draws from a generator seeded by
``derive_seed(root, tag)`` where the tag names the purpose (for example
``"dataset-train"`` or ``"mask:17"``). One root seed therefore reproduces
an entire pipeline run.
"""

from __future__ import annotations

import hashlib

_MASK = 0x7FFF_FFFF_FFFF_FFFF


def derive_seed(root: int, tag: str) -> int:
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return (int(root) ^ int.from_bytes(digest[:8], "little")) & _MASK
