"""Chunker index: merging, worker independence, and range cursors."""

from __future__ import annotations

import pytest

from mixplane.catalog import IntervalRow
from mixplane.errors import IndexBuildError
from mixplane.index import build_index
from mixplane.mixtures import MixtureKey

K = MixtureKey.of

PY = K({"language": "python"})
JS = K({"language": "javascript"})


def _rows() -> list[IntervalRow]:
    return [
        IntervalRow(1, 1, PY, 0, 10),
        IntervalRow(1, 1, PY, 10, 15),  # adjacent: merges with the previous
        IntervalRow(1, 2, PY, 3, 8),
        IntervalRow(1, 1, JS, 20, 30),
        IntervalRow(2, 5, JS, 0, 4),
    ]


def test_adjacent_intervals_merge():
    index = build_index(_rows())
    assert index.entries(PY)[1][1] == [(0, 15)]


def test_total_and_per_key_counts():
    index = build_index(_rows())
    assert index.key_sample_counts() == {PY: 20, JS: 14}
    assert index.total_samples() == 34


def test_component_keys_sorted():
    index = build_index(_rows())
    assert index.component_keys() == sorted(index.component_keys(), key=MixtureKey.sort_key)


def test_worker_count_does_not_change_index():
    rows = _rows() * 7
    # duplicates overlap; use distinct files per repetition instead
    rows = [
        IntervalRow(r.dataset_id, r.file_id + 10 * i, r.key, r.start, r.end)
        for i, chunk in enumerate([_rows()] * 7)
        for r in chunk
    ]
    assert build_index(rows, workers=1) == build_index(rows, workers=4)


def test_overlapping_intervals_rejected():
    rows = [IntervalRow(1, 1, PY, 0, 10), IntervalRow(1, 1, PY, 5, 12)]
    with pytest.raises(IndexBuildError):
        build_index(rows)


def test_empty_interval_rejected():
    with pytest.raises(IndexBuildError):
        build_index([IntervalRow(1, 1, PY, 4, 4)])


def test_matching_keys_subset_queries():
    index = build_index(_rows())
    assert index.matching_keys(K({"language": "python"})) == [PY]
    assert set(index.matching_keys(K({"language": ["python", "javascript"]}))) == {PY, JS}
    assert index.matching_keys(K({"license": "mit"})) == [JS, PY]  # vacuous, sorted

# ------------------------------------------------------------------- cursors


def test_cursor_yields_every_pointer_exactly_once():
    index = build_index(_rows())
    cursor = index.cursor(PY, seed=7)
    got = cursor.take(999)
    assert cursor.depleted
    covered = {(d, f, s) for d, f, a, b in got for s in range(a, b)}
    assert len(covered) == 20
    assert covered == {(1, 1, s) for s in range(15)} | {(1, 2, s) for s in range(3, 8)}


def test_cursor_take_respects_count_with_prefix_splits():
    index = build_index(_rows())
    cursor = index.cursor(PY, seed=7)
    first = cursor.take(7)
    assert sum(b - a for _, _, a, b in first) == 7
    second = cursor.take(13)
    assert sum(b - a for _, _, a, b in second) == 13
    assert cursor.depleted
    assert cursor.take(5) == []


def test_cursor_split_takes_equal_one_take():
    index = build_index(_rows())
    whole = index.cursor(PY, seed=3).take(20)
    cursor = index.cursor(PY, seed=3)
    split = cursor.take(6) + cursor.take(14)

    def flatten(ranges):
        return [(d, f, s) for d, f, a, b in ranges for s in range(a, b)]

    assert flatten(split) == flatten(whole)


def test_cursor_order_is_seeded():
    index = build_index(_rows())
    a = index.cursor(JS, seed=1).take(999)
    b = index.cursor(JS, seed=1).take(999)
    c = index.cursor(JS, seed=2).take(999)
    assert a == b
    assert a != c  # two files shuffle differently under another seed


def test_cursor_state_round_trip_mid_take():
    index = build_index(_rows())
    cursor = index.cursor(PY, seed=11)
    cursor.take(9)
    state = cursor.state_dict()
    rest = cursor.take(999)

    clone = index.cursor(PY, seed=11)
    clone.load_state(state)
    assert clone.take(999) == rest
    assert clone.depleted


def test_cursor_remaining_total_bookkeeping():
    index = build_index(_rows())
    cursor = index.cursor(JS, seed=5)
    assert cursor.remaining_total == 14
    cursor.take(5)
    assert cursor.remaining_total == 9
    cursor.take(999)
    assert cursor.remaining_total == 0
