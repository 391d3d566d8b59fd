"""Chunk generation: fixed-size, mixture-conforming collections of pointers.

A chunk maps each *mixture* key (possibly a property subset) to the file
ranges backing its share of the chunk. Generation scans component keys in
a seeded order fixed at job start, pulling from shared per-component
cursors so a sample is never handed out twice. Strict mode insists on
exact per-key counts; best-effort redistributes counts a depleted key can
no longer fill; arbitrary mode ignores mixtures and simply drains keys.
"""

from __future__ import annotations

import random
from typing import Mapping, Sequence

from .errors import MixtureError
from .index import ChunkerIndex, RangeCursor
from .mixtures import MixtureKey, MixtureSpec, apportion, sorted_keys
from .seeding import canonical_json_bytes, derive_seed

_CHUNK_VERSION = 1

RangeMap = dict[MixtureKey, dict[int, dict[int, list[tuple[int, int]]]]]


class Chunk:
    """A fixed-size collection of sample pointers plus its mixture snapshot."""

    def __init__(
        self,
        chunk_id: int,
        data: RangeMap,
        seed: int,
        mixture: MixtureSpec | None = None,
    ):
        self.chunk_id = chunk_id
        self.data = data
        self.seed = seed
        self.mixture = mixture

    def samples_per_key(self) -> dict[MixtureKey, int]:
        out: dict[MixtureKey, int] = {}
        for key, datasets in self.data.items():
            total = 0
            for files in datasets.values():
                for ranges in files.values():
                    total += sum(e - s for s, e in ranges)
            out[key] = total
        return out

    def total_samples(self) -> int:
        return sum(self.samples_per_key().values())

    def to_json(self) -> dict:
        data = {
            key.canonical_string(): {
                str(ds): {str(fid): [[s, e] for s, e in ranges]
                          for fid, ranges in sorted(files.items())}
                for ds, files in sorted(datasets.items())
            }
            for key, datasets in sorted(self.data.items(), key=lambda kv: kv[0].sort_key())
        }
        return {
            "version": _CHUNK_VERSION,
            "chunk_id": self.chunk_id,
            "seed": self.seed,
            "mixture": self.mixture.to_json() if self.mixture else None,
            "data": data,
        }

    @staticmethod
    def from_json(payload: Mapping) -> "Chunk":
        if payload.get("version") != _CHUNK_VERSION:
            raise MixtureError(f"unsupported chunk version {payload.get('version')!r}")
        data: RangeMap = {}
        for key_str, datasets in payload["data"].items():
            key = MixtureKey.parse(key_str)
            data[key] = {
                int(ds): {int(fid): [(int(s), int(e)) for s, e in ranges]
                          for fid, ranges in files.items()}
                for ds, files in datasets.items()
            }
        mixture = payload.get("mixture")
        return Chunk(
            chunk_id=int(payload["chunk_id"]),
            data=data,
            seed=int(payload["seed"]),
            mixture=MixtureSpec.from_json(mixture) if mixture else None,
        )

    def serialize(self) -> bytes:
        """Canonical byte form; equal chunks always serialize identically."""
        return canonical_json_bytes(self.to_json())

    @staticmethod
    def deserialize(blob: bytes) -> "Chunk":
        import json

        return Chunk.from_json(json.loads(blob.decode("utf-8")))

    def __eq__(self, other) -> bool:
        return isinstance(other, Chunk) and self.serialize() == other.serialize()

    def __repr__(self) -> str:
        per_key = {str(k): n for k, n in self.samples_per_key().items()}
        return f"Chunk(id={self.chunk_id}, samples={per_key})"


def redistribute_best_effort(
    remaining: dict[MixtureKey, int],
    shortfall_key: MixtureKey,
    progress_keys: set[MixtureKey],
    weights: Mapping[MixtureKey, float],
) -> dict[MixtureKey, int]:
    """Move a depleted key's unfilled count onto keys that can still serve.

    The shortfall is split over `progress_keys` proportionally to their
    original mixture weights, integerized by largest remainders; the
    depleted key's count drops to zero.
    """
    shortfall = remaining.get(shortfall_key, 0)
    targets = sorted_keys(k for k in progress_keys if k != shortfall_key)
    if not targets:
        raise MixtureError("no keys left to absorb the shortfall")
    if shortfall > 0:
        shares = apportion({k: weights[k] for k in targets}, shortfall)
        for k, extra in shares.items():
            remaining[k] = remaining.get(k, 0) + extra
    remaining[shortfall_key] = 0
    return remaining


class ChunkGenerator:
    """Algorithm state for one job: shared cursors plus a seeded scan order."""

    def __init__(self, index: ChunkerIndex, seed: int):
        self.index = index
        self.seed = seed
        order = index.component_keys()
        random.Random(derive_seed(seed, "component-order")).shuffle(order)
        self._component_order = order
        self._cursors: dict[MixtureKey, RangeCursor] = {
            key: index.cursor(key, seed) for key in index.component_keys()
        }
        self.next_chunk_id = 0
        self.last_report: dict[MixtureKey, int] | None = None

    # ------------------------------------------------------------ generation

    def _take_for_key(
        self, mixture_key: MixtureKey, need: int, into: RangeMap
    ) -> int:
        """Scan matching component cursors in order; returns samples found."""
        found = 0
        for comp in self._component_order:
            if need <= 0:
                break
            cursor = self._cursors[comp]
            if cursor.depleted or not mixture_key.matches(comp):
                continue
            for ds, fid, start, end in cursor.take(need):
                files = into.setdefault(mixture_key, {}).setdefault(ds, {})
                files.setdefault(fid, []).append((start, end))
                got = end - start
                found += got
                need -= got
        return found

    @staticmethod
    def _normalize(data: RangeMap) -> RangeMap:
        for datasets in data.values():
            for files in datasets.values():
                for fid, ranges in files.items():
                    ranges.sort()
                    merged: list[tuple[int, int]] = []
                    for s, e in ranges:
                        if merged and s == merged[-1][1]:
                            merged[-1] = (merged[-1][0], e)
                        else:
                            merged.append((s, e))
                    files[fid] = merged
        return data

    def _finish(self, data: RangeMap, mixture: MixtureSpec | None) -> Chunk:
        chunk = Chunk(
            chunk_id=self.next_chunk_id,
            data=self._normalize(data),
            seed=derive_seed(self.seed, "chunk", self.next_chunk_id),
            mixture=mixture,
        )
        self.next_chunk_id += 1
        return chunk

    def generate(self, spec: MixtureSpec) -> Chunk | None:
        """One chunk under `spec`, or None when the job is exhausted.

        Loops over mixture keys in canonical order; each pass serves every
        key with an open count from the seeded component scan. A key whose
        pass finds nothing is permanently depleted (cursors never refill):
        strict mode stops with a shortfall report, best-effort redistributes
        its count and keeps going while anyone can still serve.
        """
        remaining = spec.counts()
        data: RangeMap = {}
        dead: set[MixtureKey] = set()
        self.last_report = None
        while any(n > 0 for n in remaining.values()):
            found: dict[MixtureKey, int] = {}
            for key in sorted_keys(remaining):
                if remaining[key] <= 0:
                    continue
                got = self._take_for_key(key, remaining[key], data)
                found[key] = got
                remaining[key] -= got
            newly_dead = sorted_keys(
                k for k, got in found.items() if got == 0 and remaining[k] > 0
            )
            if not newly_dead:
                continue
            if spec.strict:
                self.last_report = {k: n for k, n in remaining.items() if n > 0}
                return None
            for key in newly_dead:
                dead.add(key)
                alive = {k for k in remaining if k not in dead}
                if not alive:
                    self.last_report = {k: n for k, n in remaining.items() if n > 0}
                    return None
                redistribute_best_effort(remaining, key, alive, spec.weights)
        return self._finish(data, spec)

    def generate_arbitrary(self, chunk_size: int) -> Chunk | None:
        """Mixture-free chunk: drain component keys one at a time, in order.

        The final chunk may be short; exhausted only when the index is dry.
        """
        if chunk_size <= 0:
            raise MixtureError("chunk_size must be positive")
        data: RangeMap = {}
        need = chunk_size
        for comp in self._component_order:
            if need <= 0:
                break
            cursor = self._cursors[comp]
            if cursor.depleted:
                continue
            for ds, fid, start, end in cursor.take(need):
                files = data.setdefault(comp, {}).setdefault(ds, {})
                files.setdefault(fid, []).append((start, end))
                need -= end - start
        if not data:
            return None
        return self._finish(data, None)

    # ----------------------------------------------------------- checkpoints

    def state_dict(self) -> dict:
        return {
            "next_chunk_id": self.next_chunk_id,
            "cursors": {
                key.canonical_string(): cur.state_dict()
                for key, cur in sorted(self._cursors.items(), key=lambda kv: kv[0].sort_key())
            },
        }

    def load_state(self, state: Mapping) -> None:
        self.next_chunk_id = int(state["next_chunk_id"])
        saved = state["cursors"]
        for key, cursor in self._cursors.items():
            entry = saved.get(key.canonical_string())
            if entry is not None:
                cursor.load_state(entry)
