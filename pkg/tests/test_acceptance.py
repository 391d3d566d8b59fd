"""Acceptance gates: end-to-end properties the whole data plane must hold.

Each test covers one numbered criterion, times its measured section, and
prints a single ``ACCEPTANCE NN name: PASS/FAIL (elapsed)`` line so a full
run yields one verdict per criterion. Corpus generation and registration
count as setup and are excluded from the timed sections unless the
criterion is explicitly about them.
"""

from __future__ import annotations

import random
import time
from collections import Counter
from contextlib import contextmanager
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from mixplane.ado import AdoConfig, AdoState, fit_power_law
from mixplane.catalog import MetadataCatalog, SampleRecord, detect_intervals
from mixplane.chunks import Chunk
from mixplane.client import (
    MixplaneClient,
    ProgressBoard,
    ResultStreamingArgs,
    stream_samples,
)
from mixplane.harness import (
    DomainSpec,
    SyntheticCorpusSpec,
    corpus_query,
    gen_corpus,
    register_corpus,
)
from mixplane.mixtures import MixtureKey, MixtureSpec, apportion
from mixplane.query import QueryExecutionArgs
from mixplane.server import MixplaneServer

K = MixtureKey.of


# ---------------------------------------------------------------- reporting


@pytest.fixture
def criterion(capsys):
    """Context manager timing one criterion and printing its verdict line."""

    @contextmanager
    def gate(number: int, name: str, limit: float):
        start = time.perf_counter()
        failed = False
        try:
            yield
        except BaseException:
            failed = True
            raise
        finally:
            elapsed = time.perf_counter() - start
            verdict = "PASS" if not failed and elapsed < limit else "FAIL"
            with capsys.disabled():
                print(f"ACCEPTANCE {number:02d} {name}: {verdict} ({elapsed:.2f}s)")
        assert elapsed < limit, f"criterion {number} took {elapsed:.2f}s (limit {limit}s)"

    return gate


# ------------------------------------------------------------ shared helpers


def _build_corpus(tmp: Path, domains: list[DomainSpec], *, seed: int,
                  files_per_domain: int = 2, compress: bool = False,
                  workers: int = 1) -> tuple[MetadataCatalog, dict]:
    spec = SyntheticCorpusSpec(
        domains=domains, files_per_domain=files_per_domain,
        compress=compress, seed=seed,
    )
    manifest = gen_corpus(spec, tmp)
    catalog = MetadataCatalog()
    register_corpus(catalog, tmp, workers=workers)
    return catalog, manifest


def oracle_apportion(weights: dict, total: int) -> dict:
    """Independent largest-remainders oracle in exact rational arithmetic.

    Floors of the exact shares first; leftover units go to the largest
    fractional remainders, ties to the smaller key.
    """
    wsum = sum(Fraction(w) for w in weights.values())
    shares = {k: Fraction(w) / wsum * total for k, w in weights.items()}
    counts = {k: int(s) for k, s in shares.items()}
    leftover = total - sum(counts.values())
    order = sorted(weights, key=lambda k: (-(shares[k] - counts[k]), k.sort_key()))
    for k in order[:leftover]:
        counts[k] += 1
    return counts


# -------------------------------------------------------------- criterion 1


def test_criterion_01_interval_detection(criterion):
    """Six filtered rows collapse into exactly three property intervals."""
    js_mit = {"language": ["JavaScript"], "license": ["MIT"]}
    py_apache = {"language": ["Python"], "license": ["Apache"]}
    rows = [
        SampleRecord(0, 1, 1, dict(js_mit)),
        SampleRecord(0, 1, 2, dict(js_mit)),
        SampleRecord(0, 1, 3, dict(js_mit)),
        SampleRecord(0, 1, 4, dict(py_apache)),
        SampleRecord(0, 1, 5, dict(py_apache)),
        SampleRecord(0, 2, 1, dict(py_apache)),
    ]
    with criterion(1, "interval-detection", limit=1.0):
        intervals = detect_intervals(rows)
        assert len(intervals) == 3
        first, second, third = intervals
        # interval 1: samples 1-3 of file 1 (JavaScript, MIT)
        assert (first.file_id, first.start, first.end) == (1, 1, 4)
        assert first.key == K(js_mit)
        # interval 2: samples 4-5 of file 1 (Python, Apache)
        assert (second.file_id, second.start, second.end) == (1, 4, 6)
        assert second.key == K(py_apache)
        # interval 3: sample 1 of file 2 — same properties, different file
        assert (third.file_id, third.start, third.end) == (2, 1, 2)
        assert third.key == K(py_apache)


# -------------------------------------------------------------- criterion 2


def test_criterion_02_apportionment(criterion):
    """{0.7, 0.3} at 1024 gives {717, 307}; counts always sum to the total."""
    a, b = K({"d": "a"}), K({"d": "b"})
    with criterion(2, "apportionment", limit=10.0):
        assert apportion({a: 0.7, b: 0.3}, 1024) == {a: 717, b: 307}

        rng = np.random.default_rng(2024)
        keys = [K({"d": str(i)}) for i in range(8)]
        for _ in range(10_000):
            dims = int(rng.integers(2, 9))
            weights = {k: float(w) for k, w in
                       zip(keys[:dims], rng.uniform(0.01, 10.0, dims))}
            total = int(rng.integers(1, 4097))
            counts = apportion(weights, total)
            assert sum(counts.values()) == total
            assert set(counts) == set(weights)
            assert all(v >= 0 for v in counts.values())


# -------------------------------------------------------------- criterion 3


TOPOLOGY = dict(dp_groups=2, nodes_per_group=2, num_workers=2)


@pytest.fixture(scope="module")
def corpus_100k(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("corpus100k")
    return _build_corpus(
        tmp,
        [
            DomainSpec({"domain": "a"}, samples=60_000, mean_length=8.0, length_dispersion=0.0),
            DomainSpec({"domain": "b"}, samples=40_000, mean_length=8.0, length_dispersion=0.0),
        ],
        seed=23, workers=2,
    )


def _det_server(corpus_100k, job_id: str):
    catalog, manifest = corpus_100k
    a, b = K({"domain": "a"}), K({"domain": "b"})
    server = MixplaneServer(catalog)
    host, port = server.start()
    server.submit_query(
        corpus_query(job_id, manifest),
        QueryExecutionArgs(MixtureSpec({a: 0.6, b: 0.4}, 1024), seed=31, **TOPOLOGY),
    )
    return server, host, port


def _det_run(corpus_100k, tag: str):
    """One full run: all chunk blobs, then (fresh server) all sample streams.

    Draining chunks by position advances the per-identity cursors, so the
    sample pass uses a second server over the same catalog and seed.
    """
    chunks, samples = {}, {}
    server, _host, _port = _det_server(corpus_100k, f"chunks-{tag}")
    for group in (0, 1):
        for node in (0, 1):
            blobs = []
            for worker in (0, 1):
                position = 0
                while True:
                    blob = server.next_chunk(f"chunks-{tag}", group, node, worker, position)
                    if blob is None:
                        break
                    blobs.append((worker, position, blob))
                    position += 1
            chunks[(group, node)] = blobs
    server.stop()

    server, host, port = _det_server(corpus_100k, f"samples-{tag}")
    for group in (0, 1):
        for node in (0, 1):
            outs = []
            with MixplaneClient(host, port) as client:
                for worker in (0, 1):
                    outs.append(list(stream_samples(client, ResultStreamingArgs(
                        job_id=f"samples-{tag}", dp_group_id=group,
                        node_id=node, worker_id=worker))))
            samples[(group, node)] = outs
    server.stop()
    return chunks, samples


def test_criterion_03_determinism_across_runs_and_nodes(criterion, corpus_100k):
    with criterion(3, "determinism", limit=120.0):
        first = _det_run(corpus_100k, "one")
        second = _det_run(corpus_100k, "two")
        assert first == second  # byte-identical chunk and sample streams

        chunks, samples = first
        for group in (0, 1):  # nodes of one DP group see identical data
            assert chunks[(group, 0)] == chunks[(group, 1)]
            assert samples[(group, 0)] == samples[(group, 1)]
        assert chunks[(0, 0)] != chunks[(1, 0)]  # groups partition the data

        total = sum(len(w) for outs in samples.values() for w in outs)
        assert total == 2 * (49 + 48) * 1024  # both nodes of both groups


# -------------------------------------------------------------- criterion 4


def oracle_depletion(remaining: dict, weights: dict, chunk_size: int) -> list[dict]:
    """Brute-force chunk count vectors under proportional redistribution.

    Every chunk starts from the full-mixture apportionment; any key that
    cannot meet its quota contributes what it has, and the shortfall is
    re-apportioned over the keys that still hold samples, repeating until
    the chunk is full or nobody can donate.
    """
    remaining = dict(remaining)
    alive = {k for k, v in remaining.items() if v > 0}
    out: list[dict] = []
    while alive:
        target = oracle_apportion({k: weights[k] for k in alive}, chunk_size)
        took = {k: 0 for k in alive}
        shortfall = chunk_size
        while shortfall:
            donors = {k for k in alive if remaining[k] - took[k] > 0}
            if not donors:
                return out  # a partial chunk is never emitted
            plan = (target if shortfall == chunk_size
                    else oracle_apportion({k: weights[k] for k in donors}, shortfall))
            shortfall = 0
            for k, want in plan.items():
                got = min(want, remaining[k] - took[k])
                took[k] += got
                shortfall += want - got
        for k, v in took.items():
            remaining[k] -= v
        alive = {k for k in alive if remaining[k] > 0}
        out.append({k: v for k, v in took.items() if v})
    return out


def test_criterion_04_best_effort_redistribution(criterion, tmp_path):
    a, b, c = K({"domain": "a"}), K({"domain": "b"}), K({"domain": "c"})
    weights = {a: 0.5, b: 0.2, c: 0.3}
    catalog, manifest = _build_corpus(
        tmp_path,
        [
            DomainSpec({"domain": "a"}, samples=500, mean_length=4.0, length_dispersion=0.0),
            DomainSpec({"domain": "b"}, samples=40, mean_length=4.0, length_dispersion=0.0),
            DomainSpec({"domain": "c"}, samples=500, mean_length=4.0, length_dispersion=0.0),
        ],
        seed=29, files_per_domain=1,
    )
    with criterion(4, "best-effort-redistribution", limit=60.0):
        server = MixplaneServer(catalog)
        server.submit_query(
            corpus_query("deplete", manifest),
            QueryExecutionArgs(MixtureSpec(weights, 100), seed=19),
        )
        got = []
        position = 0
        while True:
            blob = server.next_chunk("deplete", 0, 0, 0, position)
            if blob is None:
                break
            chunk = Chunk.deserialize(blob)
            got.append({k: v for k, v in chunk.samples_per_key().items() if v})
            position += 1

        assert all(sum(counts.values()) == 100 for counts in got)
        expected = oracle_depletion({a: 500, b: 40, c: 500}, weights, 100)
        assert got == expected
        # domain b dies after two on-mixture chunks; its weight flows to a and c
        assert got[1] == {a: 50, b: 20, c: 30}
        assert got[2] == {a: 63, c: 37}
        assert b not in got[2]


# -------------------------------------------------------------- criterion 5


def test_criterion_05_tokenized_proportions(criterion, tmp_path):
    short, long_ = K({"domain": "short"}), K({"domain": "long"})
    catalog, manifest = _build_corpus(
        tmp_path,
        [
            DomainSpec({"domain": "short"}, samples=7000, mean_length=10.0, length_dispersion=0.0),
            DomainSpec({"domain": "long"}, samples=3000, mean_length=100.0, length_dispersion=0.0),
        ],
        seed=41,
    )
    with criterion(5, "tokenized-proportions", limit=60.0):
        server = MixplaneServer(catalog)
        host, port = server.start()
        server.submit_query(
            corpus_query("tok", manifest),
            QueryExecutionArgs(
                MixtureSpec({short: 0.7, long_: 0.3}, 256, strict=True), seed=13,
            ),
        )
        with MixplaneClient(host, port) as client:
            items = list(stream_samples(client, ResultStreamingArgs(
                job_id="tok", mode="tokenized", sequence_length=8)))
        server.stop()

        # long-domain samples are 10x longer, yet sequence counts per strict
        # window follow the requested mixture, not the token mass
        assert len(items) == 38 * 256
        quota = apportion({short: 0.7, long_: 0.3}, 256)
        assert quota == {short: 179, long_: 77}
        for base in range(0, len(items), 256):
            window = Counter(item.tags[0] for item in items[base:base + 256])
            assert window == quota
        assert all(len(item.tokens) == 8 for item in items)
        assert all(len(set(item.tags)) == 1 for item in items)


# -------------------------------------------------------------- criterion 6


FIT_LAWS = {
    K({"domain": "a"}): (2.0, 10.0, 0.35),
    K({"domain": "b"}): (1.5, 3.0, 0.2),
}


def _fit_loss(key: MixtureKey, n: float) -> float:
    eps, beta, alpha = FIT_LAWS[key]
    return eps + beta * n ** -alpha


def _run_fit(noise_sigma: float | None, poison: bool) -> AdoState:
    cfg = AdoConfig()
    keys = list(FIT_LAWS)
    state = AdoState(cfg, {k: 0.5 for k in keys})
    rng = np.random.default_rng(42)
    for step in range(1, 3001):
        n = max(step * cfg.samples_per_step / len(keys), 1.0)
        usable = step > cfg.discard_first and step % cfg.subsample_every == 0
        losses = {}
        for key in keys:
            if poison and not usable:
                losses[key] = 99.0  # off-schedule points must never reach the fit
            else:
                value = _fit_loss(key, n)
                if noise_sigma:
                    value += float(rng.normal(0.0, noise_sigma))
                losses[key] = value
        state.record_step(step, losses)
    return state


def test_criterion_06_law_recovery(criterion):
    with criterion(6, "law-recovery", limit=60.0):
        clean = _run_fit(noise_sigma=None, poison=True)
        assert clean.fit_steps == [1000, 2000, 3000]
        for key, (eps, beta, alpha) in FIT_LAWS.items():
            law = clean.tracks[key].law
            assert not law.fallback
            assert abs(law.epsilon - eps) / eps < 0.01
            assert abs(law.beta - beta) / beta < 0.01
            assert abs(law.alpha - alpha) / alpha < 0.01
            # the stored law equals a fit of exactly the scheduled history:
            # steps 510, 520, ..., 3000 — after the discard horizon, on the
            # subsample cadence — mapped to per-domain sample counts
            points = [(max(s / 2, 1.0), _fit_loss(key, max(s / 2, 1.0)))
                      for s in range(510, 3001, 10)]
            assert len(points) == 250
            assert fit_power_law(points) == law

        noisy = _run_fit(noise_sigma=0.01, poison=False)
        assert noisy.fit_steps == [1000, 2000, 3000]
        for key, (eps, beta, alpha) in FIT_LAWS.items():
            law = noisy.tracks[key].law
            assert not law.fallback
            assert abs(law.epsilon - eps) / eps < 0.10
            assert abs(law.beta - beta) / beta < 0.10
            assert abs(law.alpha - alpha) / alpha < 0.10


# -------------------------------------------------------------- criterion 7


def test_criterion_07_adaptive_distribution_validity(criterion):
    a, b, c = K({"domain": "a"}), K({"domain": "b"}), K({"domain": "c"})
    laws = {a: (2.0, 8.0, 0.4), b: (2.0, 2.0, 0.4), c: (2.0, 1.0, 0.4)}

    def loss(key, n):
        eps, beta, alpha = laws[key]
        return eps + beta * n ** -alpha

    with criterion(7, "adaptive-distribution-validity", limit=120.0):
        state = AdoState(AdoConfig(), {a: 1 / 3, b: 1 / 3, c: 1 / 3})
        argmax_at_refit: dict[int, MixtureKey] = {}
        for step in range(1, 5001):
            n = max(step / 3, 1.0)
            state.record_step(step, {k: loss(k, n) for k in laws})
            pi = state.compute_pi()
            assert abs(sum(pi.values()) - 1.0) <= 1e-9
            assert all(v >= state.p_min for v in pi.values())
            refits = len(state.fit_steps)
            if refits and refits not in argmax_at_refit:
                argmax_at_refit[refits] = max(pi, key=pi.get)

        assert state.fit_steps == [1000, 2000, 3000, 4000, 5000]
        # domain a shares alpha with the others but has 4x their beta, so its
        # learning speed dominates at every n; it must lead within 3 refits
        assert a in {argmax_at_refit[r] for r in (1, 2, 3)}
        assert argmax_at_refit[3] == a


# -------------------------------------------------------------- criterion 8


def test_criterion_08_checkpoint_restore_equivalence(criterion, tmp_path):
    a, b = K({"domain": "a"}), K({"domain": "b"})
    catalog, manifest = _build_corpus(
        tmp_path,
        [
            DomainSpec({"domain": "a"}, samples=700, mean_length=6.0, length_dispersion=0.0),
            DomainSpec({"domain": "b"}, samples=300, mean_length=6.0, length_dispersion=0.0),
        ],
        seed=47,
    )
    spec = MixtureSpec({a: 0.7, b: 0.3}, 100)

    def fresh(job_id):
        server = MixplaneServer(catalog)
        host, port = server.start()
        server.submit_query(
            corpus_query(job_id, manifest),
            QueryExecutionArgs(spec, seed=53, nodes_per_group=2),
        )
        return server, host, port

    with criterion(8, "checkpoint-restore-equivalence", limit=180.0):
        server, host, port = fresh("baseline")
        with MixplaneClient(host, port) as client:
            baseline = list(stream_samples(client, ResultStreamingArgs(
                job_id="baseline", node_id=1)))
        server.stop()
        assert len(baseline) == 1000

        cuts = sorted(random.Random(2026).sample(range(1, 1000), 5))
        assert any(cut % 100 for cut in cuts)  # at least one mid-chunk cut
        for cut in cuts:
            job = f"cut{cut}"
            server, host, port = fresh(job)
            board = ProgressBoard()
            with MixplaneClient(host, port) as client:
                stream = stream_samples(
                    client, ResultStreamingArgs(job_id=job, node_id=0), board=board)
                consumed = [next(stream) for _ in range(cut)]
                checkpoint_id = client.checkpoint(job)
                stream.close()

            server.restore(checkpoint_id, worker_progress={"0:0:0": board.snapshot()[0]})
            with MixplaneClient(host, port) as client:
                resumed = list(stream_samples(client, ResultStreamingArgs(
                    job_id=job, node_id=0)))
            server.stop()
            assert consumed + resumed == baseline, f"divergence resuming at {cut}"


# -------------------------------------------------------------- criterion 9


@pytest.fixture(scope="module")
def corpus_1m(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("corpus1m")
    return _build_corpus(
        tmp,
        [
            DomainSpec({"domain": "a"}, samples=600_000, mean_length=6.0, length_dispersion=0.0),
            DomainSpec({"domain": "b"}, samples=400_000, mean_length=6.0, length_dispersion=0.0),
        ],
        seed=17, files_per_domain=4, workers=4,
    )


def test_criterion_09_startup_latency(criterion, corpus_1m):
    catalog, manifest = corpus_1m
    a, b = K({"domain": "a"}), K({"domain": "b"})
    assert catalog.num_samples() == 1_000_000
    server = MixplaneServer(catalog)
    host, port = server.start()
    try:
        # measured: filter + interval detection + index build + first sample
        with criterion(9, "startup-latency", limit=60.0):
            server.submit_query(
                corpus_query("latency", manifest),
                QueryExecutionArgs(MixtureSpec({a: 0.6, b: 0.4}, 1024), seed=5),
            )
            with MixplaneClient(host, port) as client:
                stream = stream_samples(client, ResultStreamingArgs(job_id="latency"))
                payload, key = next(stream)
                stream.close()
            assert payload["text"]
            assert key in (a, b)
    finally:
        server.stop()


# ------------------------------------------------------------- criterion 10


def test_criterion_10_reader_equivalence(criterion, tmp_path):
    a, b = K({"domain": "a"}), K({"domain": "b"})
    domains = [
        DomainSpec({"domain": "a"}, samples=4000, mean_length=8.0, length_dispersion=0.0),
        DomainSpec({"domain": "b"}, samples=2000, mean_length=8.0, length_dispersion=0.0),
    ]
    plain_cat, plain_manifest = _build_corpus(
        tmp_path / "plain", list(domains), seed=59, compress=False)
    zst_cat, zst_manifest = _build_corpus(
        tmp_path / "zst", list(domains), seed=59, compress=True)
    assert all(f["path"].endswith(".jsonl") for f in plain_manifest["files"])
    assert all(f["path"].endswith(".jsonl.zst") for f in zst_manifest["files"])

    def drain(catalog, manifest):
        server = MixplaneServer(catalog)
        host, port = server.start()
        server.submit_query(
            corpus_query("twin", manifest),
            QueryExecutionArgs(MixtureSpec({a: 2 / 3, b: 1 / 3}, 120), seed=61),
        )
        with MixplaneClient(host, port) as client:
            outputs = list(stream_samples(client, ResultStreamingArgs(job_id="twin")))
        server.stop()
        return outputs

    with criterion(10, "reader-equivalence", limit=30.0):
        plain = drain(plain_cat, plain_manifest)
        compressed = drain(zst_cat, zst_manifest)
        assert len(plain) == 6000
        assert plain == compressed
