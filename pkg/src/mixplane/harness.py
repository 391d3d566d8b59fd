"""Operator harness: synthetic corpora, simulated trainings, benchmarks.

Everything here is desk-scale plumbing around the real pipeline: corpora
are generated deterministically from a seed, the simulated trainer talks
to the server over the actual wire protocol with one connection per
(group, node, worker) stream, and per-domain losses come from hidden
ground-truth power laws so dynamic mixtures have something to chase.
"""

from __future__ import annotations

import csv
import logging
import statistics
import time
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from random import Random
from typing import Mapping, Sequence

from .ado import DomainLaw
from .catalog import JsonFieldParser, MetadataCatalog, PropertyDef, PropertySchema
from .client import MixplaneClient, ResultStreamingArgs, StreamStats, TokenBatchItem, stream_samples
from .errors import MixplaneError, RegistrationError
from .formats import write_jsonl
from .mixtures import MixtureKey
from .query import Query, QueryExecutionArgs
from .seeding import canonical_json, derive_seed
from .server import MixplaneServer

logger = logging.getLogger(__name__)

JSONL = ".jsonl"
JSONL_ZST = ".jsonl.zst"
MANIFEST_NAME = "manifest.json"


# ------------------------------------------------------------------- corpora


@dataclass
class DomainSpec:
    """One synthetic domain: fixed property values, sizes drawn around a mean."""

    properties: dict[str, str]
    samples: int
    mean_length: float = 16.0
    length_dispersion: float = 0.25  # relative sigma of the length draw

    def __post_init__(self):
        if not self.properties:
            raise RegistrationError("a domain needs at least one property")
        if self.samples < 1:
            raise RegistrationError("a domain needs at least one sample")

    def key(self) -> MixtureKey:
        return MixtureKey.of(self.properties)


@dataclass
class SyntheticCorpusSpec:
    domains: list[DomainSpec]
    files_per_domain: int = 4
    compress: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.domains:
            raise RegistrationError("corpus needs at least one domain")
        if self.files_per_domain < 1:
            raise RegistrationError("files_per_domain must be >= 1")

    def to_json(self) -> dict:
        return {
            "domains": [
                {
                    "properties": d.properties,
                    "samples": d.samples,
                    "mean_length": d.mean_length,
                    "length_dispersion": d.length_dispersion,
                }
                for d in self.domains
            ],
            "files_per_domain": self.files_per_domain,
            "compress": self.compress,
            "seed": self.seed,
        }

    @staticmethod
    def from_json(data: Mapping) -> "SyntheticCorpusSpec":
        return SyntheticCorpusSpec(
            domains=[
                DomainSpec(
                    properties=dict(d["properties"]),
                    samples=int(d["samples"]),
                    mean_length=float(d.get("mean_length", 16.0)),
                    length_dispersion=float(d.get("length_dispersion", 0.25)),
                )
                for d in data["domains"]
            ],
            files_per_domain=int(data.get("files_per_domain", 4)),
            compress=bool(data.get("compress", False)),
            seed=int(data.get("seed", 0)),
        )


def _domain_records(domain: DomainSpec, count: int, rng: Random):
    """Deterministic text records; a shared word pool keeps generation fast."""
    pool = [f"w{i:04d}" for i in range(4096)]
    sigma = max(domain.mean_length * domain.length_dispersion, 0.0)
    for _ in range(count):
        length = max(1, round(rng.gauss(domain.mean_length, sigma)))
        yield {"text": " ".join(rng.choices(pool, k=length)), **domain.properties}


def gen_corpus(spec: SyntheticCorpusSpec, out_dir: str | Path) -> dict:
    """Write the corpus files plus a manifest; the target must be empty."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        raise RegistrationError(f"corpus target {out} is not empty")
    out.mkdir(parents=True, exist_ok=True)
    suffix = JSONL_ZST if spec.compress else JSONL
    properties = sorted({p for d in spec.domains for p in d.properties})
    manifest_files = []
    for di, domain in enumerate(spec.domains):
        extra = set(domain.properties) - set(properties)
        if extra:  # unreachable by construction; kept for clarity
            raise RegistrationError(f"domain {di} has unknown properties {extra}")
        base, leftover = divmod(domain.samples, spec.files_per_domain)
        for fi in range(spec.files_per_domain):
            count = base + (1 if fi < leftover else 0)
            if count == 0:
                continue
            name = f"domain{di:02d}_part{fi:02d}{suffix}"
            rng = Random(derive_seed(spec.seed, "corpus", di, fi))
            written = write_jsonl(out / name, _domain_records(domain, count, rng))
            manifest_files.append(
                {"path": name, "domain": di, "samples": written}
            )
    manifest = {
        "seed": spec.seed,
        "properties": properties,
        "domains": [
            {
                "properties": d.properties,
                "samples": d.samples,
                "mean_length": d.mean_length,
                "length_dispersion": d.length_dispersion,
            }
            for d in spec.domains
        ],
        "files": manifest_files,
    }
    (out / MANIFEST_NAME).write_text(canonical_json(manifest) + "\n", encoding="utf-8")
    return manifest


def load_manifest(corpus_dir: str | Path) -> dict:
    import json

    path = Path(corpus_dir) / MANIFEST_NAME
    if not path.is_file():
        raise RegistrationError(f"no {MANIFEST_NAME} under {corpus_dir}")
    return json.loads(path.read_text(encoding="utf-8"))


def register_corpus(
    catalog: MetadataCatalog,
    corpus_dir: str | Path,
    dataset_name: str = "synthetic",
    workers: int = 1,
) -> int:
    """Register every manifest file under one dataset; returns the dataset id."""
    corpus = Path(corpus_dir)
    manifest = load_manifest(corpus)
    schema = PropertySchema([PropertyDef(p, "string") for p in manifest["properties"]])
    parser = JsonFieldParser.for_properties(manifest["properties"])
    files = [corpus / f["path"] for f in manifest["files"]]
    return catalog.register_dataset(dataset_name, files, parser, schema, workers=workers)


def corpus_query(job_id: str, manifest: Mapping) -> Query:
    """Query matching the whole corpus: first property, all its values."""
    prop = manifest["properties"][0]
    values = sorted({d["properties"][prop] for d in manifest["domains"]})
    return Query.for_job(job_id).select((prop, "in", values))


# ----------------------------------------------------------------- sim-train


@dataclass
class SimTrainerSpec:
    """A simulated training: topology, mixture, hidden truth, and cadence."""

    steps: int
    batch_size: int = 8            # outputs pulled per stream per step
    mode: str = "tokenized"
    sequence_length: int = 64
    window_size: int | None = None
    strict_window: bool = True
    mixture: Mapping | None = None
    dp_groups: int = 1
    nodes_per_group: int = 1
    num_workers: int = 0
    seed: int = 0
    noise_sigma: float = 0.0
    hidden_laws: dict[str, tuple[float, float, float]] = field(default_factory=dict)
    job_id: str = "sim"

    def law_for(self, key: MixtureKey) -> DomainLaw | None:
        params = self.hidden_laws.get(key.canonical_string())
        if params is None:
            return None
        eps, beta, alpha = params
        return DomainLaw(epsilon=eps, beta=beta, alpha=alpha)

    def to_json(self) -> dict:
        return {
            "steps": self.steps,
            "batch_size": self.batch_size,
            "mode": self.mode,
            "sequence_length": self.sequence_length,
            "window_size": self.window_size,
            "strict_window": self.strict_window,
            "mixture": self.mixture,
            "dp_groups": self.dp_groups,
            "nodes_per_group": self.nodes_per_group,
            "num_workers": self.num_workers,
            "seed": self.seed,
            "noise_sigma": self.noise_sigma,
            "hidden_laws": {k: list(v) for k, v in sorted(self.hidden_laws.items())},
            "job_id": self.job_id,
        }

    @staticmethod
    def from_json(data: Mapping) -> "SimTrainerSpec":
        return SimTrainerSpec(
            steps=int(data["steps"]),
            batch_size=int(data.get("batch_size", 8)),
            mode=data.get("mode", "tokenized"),
            sequence_length=int(data.get("sequence_length", 64)),
            window_size=data.get("window_size"),
            strict_window=bool(data.get("strict_window", True)),
            mixture=data.get("mixture"),
            dp_groups=int(data.get("dp_groups", 1)),
            nodes_per_group=int(data.get("nodes_per_group", 1)),
            num_workers=int(data.get("num_workers", 0)),
            seed=int(data.get("seed", 0)),
            noise_sigma=float(data.get("noise_sigma", 0.0)),
            hidden_laws={
                k: (float(v[0]), float(v[1]), float(v[2]))
                for k, v in data.get("hidden_laws", {}).items()
            },
            job_id=data.get("job_id", "sim"),
        )


class _Stream:
    """One (group, node, worker) consumer over its own TCP connection."""

    def __init__(self, host: str, port: int, args: ResultStreamingArgs):
        self.identity = (args.dp_group_id, args.node_id, args.worker_id)
        self.client = MixplaneClient(host, port)
        self.stats = StreamStats()
        self.iterator = stream_samples(self.client, args, stats=self.stats)
        self.done = False

    def pull(self, count: int) -> list:
        out = []
        for _ in range(count):
            try:
                out.append(next(self.iterator))
            except StopIteration:
                self.done = True
                break
        return out

    def close(self) -> None:
        self.client.close()


def _item_domain_tokens(item) -> tuple[MixtureKey, int]:
    if isinstance(item, TokenBatchItem):
        return item.tags[0], len(item.tokens)
    payload, key = item
    text = payload.get("text", "") if isinstance(payload, Mapping) else str(payload)
    return key, max(1, len(text.split()))


def _divergence_diff(ref, other, identity_a, identity_b) -> str:
    for i, (x, y) in enumerate(zip(ref, other)):
        if x != y:
            return (
                f"streams {identity_a} and {identity_b} diverge at output {i}: "
                f"{x!r} != {y!r}"
            )
    return (
        f"streams {identity_a} and {identity_b} yielded "
        f"{len(ref)} vs {len(other)} outputs"
    )


def sim_train(
    corpus_dir: str | Path,
    spec: SimTrainerSpec,
    work_dir: str | Path | None = None,
    register_workers: int = 1,
) -> dict:
    """Full loop over the wire: stream, lose, all-reduce, feed back, report.

    Losses per domain come from the hidden law at that domain's cumulative
    token count, plus seeded Gaussian noise; nodes of one group must yield
    identical outputs every step or the run aborts with a diff.
    """
    manifest = load_manifest(corpus_dir)
    catalog = MetadataCatalog()
    register_corpus(catalog, corpus_dir, workers=register_workers)
    server = MixplaneServer(catalog, trajectory_dir=work_dir)
    host, port = server.start()
    streams: list[_Stream] = []
    control = MixplaneClient(host, port)
    try:
        query = corpus_query(spec.job_id, manifest)
        exec_args = QueryExecutionArgs(
            mixture=spec.mixture,
            dp_groups=spec.dp_groups,
            nodes_per_group=spec.nodes_per_group,
            num_workers=spec.num_workers,
            seed=spec.seed,
        )
        control.submit_query(query, exec_args)
        worker_ids = range(max(1, spec.num_workers))
        for g, n, w in product(
            range(spec.dp_groups), range(spec.nodes_per_group), worker_ids
        ):
            streams.append(
                _Stream(
                    host,
                    port,
                    ResultStreamingArgs(
                        job_id=spec.job_id,
                        dp_group_id=g,
                        node_id=n,
                        worker_id=w,
                        mode=spec.mode,
                        window_size=spec.window_size,
                        strict_window=spec.strict_window,
                        sequence_length=spec.sequence_length,
                    ),
                )
            )

        cumulative_tokens: dict[MixtureKey, int] = {}
        per_step: list[dict] = []
        outputs_block: list = []  # stream (0,0,0)'s outputs, for block tallies
        steps_run = 0
        for step in range(1, spec.steps + 1):
            pulls = {s.identity: s.pull(spec.batch_size) for s in streams}
            if all(not items for items in pulls.values()):
                break
            # nodes of one group must agree, output for output
            for g in range(spec.dp_groups):
                for w in worker_ids:
                    ref = pulls[(g, 0, w)]
                    for n in range(1, spec.nodes_per_group):
                        other = pulls[(g, n, w)]
                        if other != ref:
                            raise MixplaneError(
                                "cross-node divergence: "
                                + _divergence_diff(ref, other, (g, 0, w), (g, n, w))
                            )
            outputs_block.extend(pulls[(0, 0, worker_ids[0])])
            # tokens consumed this step, per domain, across all streams
            step_tokens: dict[MixtureKey, int] = {}
            for items in pulls.values():
                for item in items:
                    key, tokens = _item_domain_tokens(item)
                    step_tokens[key] = step_tokens.get(key, 0) + tokens
            for key, tokens in step_tokens.items():
                cumulative_tokens[key] = cumulative_tokens.get(key, 0) + tokens
            # hidden-law losses at the post-step token counts
            losses: dict[MixtureKey, tuple[float, int]] = {}
            for key, tokens in sorted(step_tokens.items(), key=lambda kv: kv[0].sort_key()):
                law = spec.law_for(key)
                if law is None:
                    raise MixplaneError(
                        f"no hidden law for domain {key.canonical_string()!r}"
                    )
                mean = law.predict(max(cumulative_tokens[key], 1))
                if spec.noise_sigma > 0:
                    noise_rng = Random(
                        derive_seed(spec.seed, "noise", step, key.canonical_string())
                    )
                    mean += noise_rng.gauss(0.0, spec.noise_sigma)
                losses[key] = (mean * tokens, tokens)
            ack = control.feedback(spec.job_id, step, losses)
            per_step.append(
                {
                    "step": step,
                    "losses": {
                        k.canonical_string(): [total, count]
                        for k, (total, count) in sorted(
                            losses.items(), key=lambda kv: kv[0].sort_key()
                        )
                    },
                    "feedback": ack["status"],
                }
            )
            steps_run = step

        block_size = _block_size(spec, manifest)
        blocks = _block_tallies(outputs_block, block_size)
        report = {
            "spec": spec.to_json(),
            "steps_run": steps_run,
            "per_step": per_step,
            "blocks": blocks,
            "totals": {
                "outputs": sum(
                    s.stats.samples + s.stats.sequences for s in streams
                ),
                "chunks": sum(s.stats.chunks for s in streams),
                "tokens_per_domain": {
                    k.canonical_string(): v
                    for k, v in sorted(
                        cumulative_tokens.items(), key=lambda kv: kv[0].sort_key()
                    )
                },
            },
        }
        if work_dir:
            trajectory = Path(work_dir) / f"{spec.job_id}.trajectory.jsonl"
            if trajectory.is_file():
                report["trajectory"] = trajectory.read_text(encoding="utf-8").splitlines()
        return report
    finally:
        for s in streams:
            s.close()
        control.close()
        server.stop()


def _block_size(spec: SimTrainerSpec, manifest: Mapping) -> int:
    if spec.mode == "window" and spec.window_size:
        return spec.window_size
    mixture = spec.mixture or {}
    try:
        from .server import config_chunk_size

        return config_chunk_size(mixture)
    except (KeyError, TypeError):
        return max(1, spec.batch_size)


def _block_tallies(outputs: Sequence, block_size: int) -> list[dict]:
    """Realized per-key counts for every complete block of outputs."""
    blocks = []
    for start in range(0, len(outputs) - block_size + 1, block_size):
        tally: dict[str, int] = {}
        for item in outputs[start : start + block_size]:
            key, _ = _item_domain_tokens(item)
            name = key.canonical_string()
            tally[name] = tally.get(name, 0) + 1
        blocks.append({"index": start // block_size, "realized": tally})
    return blocks


# --------------------------------------------------------------------- bench


def bench(
    corpus_dir: str | Path,
    chunk_sizes: Sequence[int] = (512, 1024, 2048),
    workers: Sequence[int] = (0, 4),
    repetitions: int = 3,
    max_samples: int = 20000,
) -> list[dict]:
    """Throughput medians per (chunk_size, workers) over >= 3 repetitions."""
    if repetitions < 3:
        raise MixplaneError("bench needs at least 3 repetitions for medians")
    manifest = load_manifest(corpus_dir)
    rows = []
    for chunk_size, n_workers in product(chunk_sizes, workers):
        submit_times, first_times, sample_rates, chunk_rates = [], [], [], []
        for rep in range(repetitions):
            catalog = MetadataCatalog()
            register_corpus(catalog, corpus_dir, workers=max(1, n_workers))
            server = MixplaneServer(catalog)
            host, port = server.start()
            client = MixplaneClient(host, port)
            try:
                job_id = f"bench-{chunk_size}-{n_workers}-{rep}"
                query = corpus_query(job_id, manifest)
                args = QueryExecutionArgs(
                    mixture={"type": "inferring", "chunk_size": chunk_size},
                    num_workers=n_workers,
                    seed=7,
                )
                t0 = time.perf_counter()
                client.submit_query(query, args)
                t1 = time.perf_counter()
                stats = StreamStats()
                stream = stream_samples(
                    client,
                    ResultStreamingArgs(job_id=job_id, mode="overall"),
                    stats=stats,
                )
                next(stream)
                t2 = time.perf_counter()
                pulled = 1
                for _ in stream:
                    pulled += 1
                    if pulled >= max_samples:
                        break
                t3 = time.perf_counter()
                submit_times.append(t1 - t0)
                first_times.append(t2 - t1)
                span = max(t3 - t2, 1e-9)
                sample_rates.append((pulled - 1) / span)
                chunk_rates.append(max(stats.chunks - 1, 0) / span)
            finally:
                client.close()
                server.stop()
        rows.append(
            {
                "chunk_size": chunk_size,
                "workers": n_workers,
                "submit_s": statistics.median(submit_times),
                "first_sample_s": statistics.median(first_times),
                "samples_per_s": statistics.median(sample_rates),
                "chunks_per_s": statistics.median(chunk_rates),
            }
        )
    return rows


# ------------------------------------------------------------------ plotting


def trajectory_to_csv(entries: Sequence[Mapping], out_path: str | Path) -> None:
    """Flatten trajectory rows (step, chunk_id, one column per domain)."""
    domains = sorted({d for e in entries for d in e["pi"]})
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "chunk_id"] + domains)
        for e in entries:
            writer.writerow(
                [e["step"], e["chunk_id"]] + [e["pi"].get(d, "") for d in domains]
            )


def trajectory_to_svg(
    entries: Sequence[Mapping], out_path: str | Path, width: int = 800, height: int = 400
) -> None:
    """Minimal line plot of every domain's pi over chunk sequence."""
    if not entries:
        raise MixplaneError("empty trajectory")
    domains = sorted({d for e in entries for d in e["pi"]})
    palette = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
               "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]
    margin = 40
    n = len(entries)
    span_x = max(n - 1, 1)
    top = max(max(e["pi"].get(d, 0.0) for d in domains) for e in entries)
    top = max(top, 1e-9)

    def x(i: int) -> float:
        return margin + (width - 2 * margin) * i / span_x

    def y(v: float) -> float:
        return height - margin - (height - 2 * margin) * v / top

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" '
        f'y2="{height - margin}" stroke="black"/>',
    ]
    for idx, domain in enumerate(domains):
        color = palette[idx % len(palette)]
        points = " ".join(
            f"{x(i):.2f},{y(e['pi'].get(domain, 0.0)):.2f}" for i, e in enumerate(entries)
        )
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{points}"/>'
        )
        parts.append(
            f'<text x="{width - margin + 4}" y="{margin + 14 * idx}" font-size="10" '
            f'fill="{color}">{domain}</text>'
        )
    parts.append("</svg>")
    Path(out_path).write_text("\n".join(parts) + "\n", encoding="utf-8")
