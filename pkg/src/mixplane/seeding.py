"""Stable hashing and canonical JSON.

Every random decision in the system is derived from a job seed through
`stable_hash`, so that independent processes (server, clients, re-runs)
agree bit-for-bit. Python's built-in `hash` is salted per process and must
never be used for this.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any

_SEED_BITS = 63  # keep seeds positive and within int64


def stable_hash(*parts: object) -> int:
    """Deterministic 63-bit hash of a sequence of strings/ints/bytes."""
    h = hashlib.blake2b(digest_size=16)
    for part in parts:
        if isinstance(part, bytes):
            data = part
        else:
            data = str(part).encode("utf-8")
        h.update(len(data).to_bytes(8, "big"))
        h.update(data)
    return int.from_bytes(h.digest()[:8], "big") & ((1 << _SEED_BITS) - 1)


def derive_seed(base_seed: int, *context: object) -> int:
    """Derive a child seed from a base seed and a context label."""
    return stable_hash(base_seed, *context)


def canonical_json(obj: Any) -> str:
    """Serialize to byte-stable JSON: sorted keys, no whitespace, ASCII only."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def canonical_json_bytes(obj: Any) -> bytes:
    return canonical_json(obj).encode("ascii")


def content_id(data: bytes, length: int = 16) -> str:
    """Short hex digest used for content-addressed identifiers."""
    return hashlib.blake2b(data, digest_size=length).hexdigest()[: 2 * length]
