"""Client streaming: the three modes, prefetch, reconnect, and restore."""

from __future__ import annotations

from collections import Counter

import pytest

from mixplane.catalog import JsonFieldParser, MetadataCatalog, PropertyDef, PropertySchema
from mixplane.chunks import Chunk
from mixplane.client import (
    MixplaneClient,
    ProgressBoard,
    ResultStreamingArgs,
    StreamStats,
    TokenBatchItem,
    per_domain_loss,
    stream_samples,
)
from mixplane.errors import DataReadError, QueryError
from mixplane.formats import write_jsonl
from mixplane.mixtures import MixtureKey, MixtureSpec
from mixplane.query import Query, QueryExecutionArgs
from mixplane.server import MixplaneServer

K = MixtureKey.of
PY = K({"language": "python"})
JS = K({"language": "javascript"})


def _query(job_id="job"):
    return Query.for_job(job_id).select(("language", "in", ["python", "javascript"]))


def _submit(server, job_id="job", chunk_size=100, **topology):
    spec = MixtureSpec({PY: 0.7, JS: 0.3}, chunk_size)
    server.submit_query(_query(job_id), QueryExecutionArgs(spec, seed=7, **topology))


def _client(live_server):
    _server, host, port = live_server
    return MixplaneClient(host, port)


def _args(**kw):
    return ResultStreamingArgs(job_id=kw.pop("job_id", "job"), **kw)


# ----------------------------------------------------------------- args/units


def test_streaming_args_validation():
    with pytest.raises(QueryError, match="unknown mode"):
        _args(mode="banana")
    with pytest.raises(QueryError, match="window_size"):
        _args(mode="window")
    with pytest.raises(QueryError, match="sequence_length"):
        _args(mode="tokenized")
    with pytest.raises(QueryError, match="prefetch_depth"):
        _args(prefetch_depth=-1)


def test_token_batch_item_rejects_length_mismatch():
    with pytest.raises(DataReadError):
        TokenBatchItem([1, 2, 3], [PY, PY])


def test_progress_board_tracks_per_worker():
    board = ProgressBoard()
    board.reset(0)
    board.advance(0)
    board.advance(0)
    board.advance(1)
    assert board.snapshot() == {0: 2, 1: 1}
    board.reset(0)
    assert board.snapshot() == {0: 0, 1: 1}


def test_per_domain_loss_groups_by_tag():
    losses = [1.0, 2.0, 3.0]
    tags = [PY, PY, JS]
    assert per_domain_loss(losses, tags) == {PY: (3.0, 2), JS: (3.0, 1)}
    with pytest.raises(DataReadError):
        per_domain_loss([1.0], [PY, JS])


def test_per_domain_loss_matches_brute_force():
    import random

    rng = random.Random(99)
    domains = [K({"d": str(i)}) for i in range(5)]
    losses = [rng.uniform(0, 4) for _ in range(10_000)]
    tags = [rng.choice(domains) for _ in range(10_000)]
    got = per_domain_loss(losses, tags)
    for domain in domains:
        mine = [l for l, t in zip(losses, tags) if t == domain]
        total, count = got[domain]
        assert count == len(mine)
        assert total == pytest.approx(sum(mine))


# -------------------------------------------------------------------- overall


def test_overall_mode_streams_every_sample_once(live_server):
    server, _, _ = live_server
    _submit(server)
    with _client(live_server) as client:
        outputs = list(stream_samples(client, _args()))
    assert len(outputs) == 1000
    texts = [payload["text"] for payload, _key in outputs]
    assert len(set(texts)) == 1000
    for payload, key in outputs:
        assert key == K({"language": payload["language"]})
    # every chunk carries the mixture's exact per-key quota
    for base in range(0, 1000, 100):
        window = Counter(key for _p, key in outputs[base : base + 100])
        assert window == {PY: 70, JS: 30}


def test_nodes_of_a_group_stream_identically(live_server):
    server, _, _ = live_server
    _submit(server, nodes_per_group=2)
    with _client(live_server) as a, _client(live_server) as b:
        node0 = list(stream_samples(a, _args(node_id=0)))
        node1 = list(stream_samples(b, _args(node_id=1)))
    assert node0 == node1


def test_workers_split_the_stream_without_overlap(live_server):
    server, _, _ = live_server
    _submit(server, num_workers=2)
    with _client(live_server) as a, _client(live_server) as b:
        w0 = list(stream_samples(a, _args(worker_id=0)))
        w1 = list(stream_samples(b, _args(worker_id=1)))
    t0 = {p["text"] for p, _ in w0}
    t1 = {p["text"] for p, _ in w1}
    assert len(w0) == len(w1) == 500
    assert not (t0 & t1)
    assert len(t0 | t1) == 1000


def test_stats_count_chunks_and_samples(live_server):
    server, _, _ = live_server
    _submit(server)
    stats = StreamStats()
    with _client(live_server) as client:
        for _ in stream_samples(client, _args(), stats=stats):
            pass
    assert stats.chunks == 10
    assert stats.samples == 1000
    assert stats.sequences == 0
    assert stats.blocking_reads + stats.prefetched_reads > 0


# --------------------------------------------------------------------- window


def test_window_mode_apportions_each_window(live_server):
    server, _, _ = live_server
    _submit(server)
    with _client(live_server) as client:
        outputs = list(stream_samples(client, _args(mode="window", window_size=50)))
    assert len(outputs) == 1000
    for base in range(0, 1000, 50):
        window = Counter(key for _p, key in outputs[base : base + 50])
        assert window == {PY: 35, JS: 15}


def test_strict_window_drops_the_partial_tail(live_server):
    server, _, _ = live_server
    _submit(server)
    with _client(live_server) as client:
        outputs = list(
            stream_samples(
                client, _args(mode="window", window_size=40, strict_window=True)
            )
        )
    # per 100-sample chunk: two full windows of 28+12, the 14+6 tail dropped
    assert len(outputs) == 800
    for base in range(0, 800, 40):
        window = Counter(key for _p, key in outputs[base : base + 40])
        assert window == {PY: 28, JS: 12}


def test_best_effort_window_emits_the_short_tail(live_server):
    server, _, _ = live_server
    _submit(server)
    with _client(live_server) as client:
        outputs = list(
            stream_samples(
                client, _args(mode="window", window_size=40, strict_window=False)
            )
        )
    assert len(outputs) == 1000
    tail = Counter(key for _p, key in outputs[80:100])
    assert tail == {PY: 14, JS: 6}


# ------------------------------------------------------------------ tokenized


def test_tokenized_mode_yields_pure_fixed_length_sequences(live_server):
    server, _, _ = live_server
    _submit(server)
    stats = StreamStats()
    with _client(live_server) as client:
        items = list(
            stream_samples(client, _args(mode="tokenized", sequence_length=4), stats=stats)
        )
    # one window of chunk_size sequences per chunk: 70 py + 30 js
    assert len(items) == 1000
    assert stats.sequences == 1000
    for item in items:
        assert isinstance(item, TokenBatchItem)
        assert len(item.tokens) == 4
        assert len(set(item.tags)) == 1
    per_domain = Counter(item.tags[0] for item in items)
    assert per_domain == {PY: 700, JS: 300}


def test_tokenized_starves_when_sequences_cannot_fill(live_server):
    server, _, _ = live_server
    _submit(server)
    with _client(live_server) as client:
        items = list(stream_samples(client, _args(mode="tokenized", sequence_length=64)))
    # 70 sequences of 64 tokens need far more text than a chunk holds
    assert items == []


def test_tokenized_rejects_mismatched_window_size(live_server):
    server, _, _ = live_server
    _submit(server)
    with _client(live_server) as client:
        with pytest.raises(QueryError, match="window_size == chunk_size"):
            list(
                stream_samples(
                    client,
                    _args(mode="tokenized", sequence_length=4, window_size=64),
                )
            )


def test_tokenized_skips_empty_samples(tmp_path):
    path = tmp_path / "data.jsonl"
    rows = [{"text": "", "language": "python"} for _ in range(5)]
    rows += [{"text": "alpha beta gamma", "language": "python"} for _ in range(25)]
    write_jsonl(path, rows)
    catalog = MetadataCatalog()
    catalog.register_dataset(
        "tiny", [path], JsonFieldParser.for_properties(["language"]),
        PropertySchema([PropertyDef("language", "string")]),
    )
    server = MixplaneServer(catalog)
    host, port = server.start()
    try:
        spec = MixtureSpec({PY: 1.0}, 20)
        server.submit_query(
            Query.for_job("tiny").select(("language", "==", "python")),
            QueryExecutionArgs(spec, seed=3),
        )
        stats = StreamStats()
        with MixplaneClient(host, port) as client:
            items = list(
                stream_samples(
                    client,
                    _args(job_id="tiny", mode="tokenized", sequence_length=2),
                    stats=stats,
                )
            )
    finally:
        server.stop()
    assert len(items) == 20
    assert stats.empty_samples_skipped == 5


# ----------------------------------------------------------- prefetch/recover


def test_prefetch_depth_never_changes_the_stream(live_server):
    server, _, _ = live_server
    _submit(server, nodes_per_group=2)
    stats0, stats4 = StreamStats(), StreamStats()
    with _client(live_server) as a, _client(live_server) as b:
        plain = list(stream_samples(a, _args(node_id=0, prefetch_depth=0), stats=stats0))
        deep = list(stream_samples(b, _args(node_id=1, prefetch_depth=4), stats=stats4))
    assert plain == deep
    assert stats0.prefetched_reads == 0
    assert stats0.blocking_reads > 0
    total0 = stats0.blocking_reads
    assert stats4.blocking_reads + stats4.prefetched_reads == total0
    assert stats4.blocking_reads <= total0


def test_client_reconnects_and_replays_mid_stream(live_server):
    server, _, _ = live_server
    _submit(server, nodes_per_group=2)
    with _client(live_server) as baseline_client:
        baseline = list(stream_samples(baseline_client, _args(node_id=1)))

    client = _client(live_server)
    outputs = []
    stream = stream_samples(client, _args(node_id=0))
    for _ in range(150):
        outputs.append(next(stream))
    # sever the connection under the iterator's feet
    client._sock.close()
    outputs.extend(stream)
    client.close()
    assert outputs == baseline


def test_restore_skips_already_consumed_outputs(live_server):
    server, _, _ = live_server
    _submit(server, nodes_per_group=2)
    with _client(live_server) as baseline_client:
        baseline = list(stream_samples(baseline_client, _args(node_id=1)))

    board = ProgressBoard()
    with _client(live_server) as client:
        stream = stream_samples(client, _args(node_id=0), board=board)
        consumed = [next(stream) for _ in range(150)]
        assert board.snapshot() == {0: 50}  # 50 outputs into chunk 1
        checkpoint_id = client.checkpoint("job")
        stream.close()

    server.restore(checkpoint_id, worker_progress={"0:0:0": board.snapshot()[0]})
    with _client(live_server) as client:
        resumed = list(stream_samples(client, _args(node_id=0)))
    assert consumed + resumed == baseline


def test_missing_data_file_is_named(live_server, two_language_corpus):
    server, _, _ = live_server
    _submit(server)
    for path in two_language_corpus:
        if path.name.startswith("js"):
            path.unlink()
    with _client(live_server) as client:
        with pytest.raises(DataReadError, match="js"):
            list(stream_samples(client, _args()))


def test_duplicate_feedback_after_reconnect_is_a_lost_ack(live_server):
    server, host, port = live_server
    from mixplane.query import ado_mixture

    mixture = ado_mixture(100, {PY: 0.7, JS: 0.3}, {"fit_start_step": 50, "refit_every": 50})
    server.submit_query(_query("ado"), QueryExecutionArgs(mixture, seed=7))
    with MixplaneClient(host, port) as client:
        first = client.feedback("ado", 1, {PY: (3.0, 2), JS: (2.0, 1)})
        duplicate = client.feedback("ado", 1, {PY: (3.0, 2), JS: (2.0, 1)})
    assert first == {"status": "ok"}
    assert duplicate == {"status": "ok"}
