"""Component-key index over interval rows, with stateful range cursors.

The index nests component key → dataset → file → sorted merged intervals.
Component keys carry the full property map of their samples; mixtures use
subset keys and rely on key matching to find them. A RangeCursor walks one
key's intervals in a seeded but deterministic order and hands out ranges
of up to n samples at a time, splitting intervals so it never over-serves.
"""

from __future__ import annotations

import random
from concurrent.futures import ThreadPoolExecutor
from typing import Iterable, Mapping, Sequence

from .catalog import IntervalRow
from .errors import IndexBuildError
from .mixtures import MixtureKey
from .seeding import derive_seed

_Nested = dict[MixtureKey, dict[int, dict[int, list[tuple[int, int]]]]]


def _local_build(rows: Iterable[IntervalRow]) -> _Nested:
    local: _Nested = {}
    for row in rows:
        files = local.setdefault(row.key, {}).setdefault(row.dataset_id, {})
        files.setdefault(row.file_id, []).append((row.start, row.end))
    return local


def _merge_intervals(intervals: list[tuple[int, int]], file_id: int) -> list[tuple[int, int]]:
    intervals.sort()
    merged: list[tuple[int, int]] = []
    for start, end in intervals:
        if start >= end:
            raise IndexBuildError(f"file {file_id}: empty interval [{start},{end})")
        if merged and start < merged[-1][1]:
            raise IndexBuildError(
                f"file {file_id}: overlapping intervals "
                f"[{merged[-1][0]},{merged[-1][1]}) and [{start},{end})"
            )
        if merged and start == merged[-1][1]:
            merged[-1] = (merged[-1][0], end)
        else:
            merged.append((start, end))
    return merged


class ChunkerIndex:
    """Immutable nested mapping from component keys to sample locations."""

    def __init__(self, nested: _Nested):
        self._index = nested

    def component_keys(self) -> list[MixtureKey]:
        return sorted(self._index, key=MixtureKey.sort_key)

    def entries(self, key: MixtureKey) -> dict[int, dict[int, list[tuple[int, int]]]]:
        return self._index.get(key, {})

    def matching_keys(self, mixture_key: MixtureKey) -> list[MixtureKey]:
        return [k for k in self.component_keys() if mixture_key.matches(k)]

    def key_sample_counts(self) -> dict[MixtureKey, int]:
        out: dict[MixtureKey, int] = {}
        for key in self.component_keys():
            total = 0
            for files in self._index[key].values():
                for intervals in files.values():
                    total += sum(e - s for s, e in intervals)
            out[key] = total
        return out

    def total_samples(self) -> int:
        return sum(self.key_sample_counts().values())

    def cursor(self, key: MixtureKey, seed: int) -> "RangeCursor":
        return RangeCursor(key, self.entries(key), seed)

    def __eq__(self, other) -> bool:
        return isinstance(other, ChunkerIndex) and self._index == other._index

    def __contains__(self, key: MixtureKey) -> bool:
        return key in self._index


def build_index(rows: Sequence[IntervalRow], workers: int = 1) -> ChunkerIndex:
    """Partition rows across workers, build local indices, merge, normalize.

    The final per-file sort + adjacency merge makes the result independent
    of worker count and partitioning. Overlapping inputs are an upstream
    bug and rejected.
    """
    if workers <= 1 or len(rows) < 2:
        locals_ = [_local_build(rows)]
    else:
        shards = [list(rows[i::workers]) for i in range(workers)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            locals_ = list(pool.map(_local_build, shards))

    merged: _Nested = {}
    for local in locals_:
        for key, datasets in local.items():
            tgt_ds = merged.setdefault(key, {})
            for ds, files in datasets.items():
                tgt_f = tgt_ds.setdefault(ds, {})
                for fid, intervals in files.items():
                    tgt_f.setdefault(fid, []).extend(intervals)

    for key, datasets in merged.items():
        for ds, files in datasets.items():
            for fid in files:
                files[fid] = _merge_intervals(files[fid], fid)
    return ChunkerIndex(merged)


class RangeCursor:
    """One key's remaining samples, served as ranges in a fixed seeded order.

    Datasets and files are visited in an order shuffled once from the seed;
    intervals within a file stay ascending so reads remain sequential. The
    cursor is owned by a single generation loop and never revisits a sample.
    """

    def __init__(
        self,
        key: MixtureKey,
        entries: Mapping[int, Mapping[int, Sequence[tuple[int, int]]]],
        seed: int,
    ):
        self.key = key
        self.seed = seed
        rng = random.Random(derive_seed(seed, "cursor", key.canonical_string()))
        ranges: list[tuple[int, int, int, int]] = []
        datasets = sorted(entries)
        rng.shuffle(datasets)
        for ds in datasets:
            files = sorted(entries[ds])
            rng.shuffle(files)
            for fid in files:
                for start, end in entries[ds][fid]:
                    ranges.append((ds, fid, start, end))
        self._ranges = ranges
        self._pos = 0
        self._offset = 0  # samples already consumed from the current range
        self.remaining_total = sum(r[3] - r[2] for r in ranges)

    def take(self, n: int) -> list[tuple[int, int, int, int]]:
        """Up to n samples as (dataset_id, file_id, start, end) ranges.

        Returns fewer than n only when the cursor nears depletion; an empty
        list signals depletion, not failure.
        """
        if n < 1:
            raise ValueError("take() needs n >= 1")
        out: list[tuple[int, int, int, int]] = []
        need = n
        while need > 0 and self._pos < len(self._ranges):
            ds, fid, start, end = self._ranges[self._pos]
            cur = start + self._offset
            available = end - cur
            if available <= need:
                out.append((ds, fid, cur, end))
                need -= available
                self._pos += 1
                self._offset = 0
            else:
                out.append((ds, fid, cur, cur + need))
                self._offset += need
                need = 0
        served = sum(e - s for _, _, s, e in out)
        self.remaining_total -= served
        return out

    @property
    def depleted(self) -> bool:
        return self.remaining_total == 0

    def state_dict(self) -> dict:
        return {"pos": self._pos, "offset": self._offset}

    def load_state(self, state: Mapping) -> None:
        self._pos = int(state["pos"])
        self._offset = int(state["offset"])
        consumed = sum(
            e - s for _, _, s, e in self._ranges[: self._pos]
        ) + self._offset
        self.remaining_total = sum(e - s for _, _, s, e in self._ranges) - consumed
