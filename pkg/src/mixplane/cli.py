"""Command-line front ends: `mixplane` for operators, `mixplane-client` for streaming.

Every option can come from (highest wins) the command line, an environment
variable prefixed MIXPLANE_ / MIXPLANE_CLIENT_, or a JSON config file
passed via --config whose top-level keys mirror the option names.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from .catalog import MetadataCatalog
from .client import MixplaneClient, ResultStreamingArgs, StreamStats, TokenBatchItem, stream_samples
from .errors import MixplaneError
from .harness import (
    SimTrainerSpec,
    SyntheticCorpusSpec,
    bench,
    gen_corpus,
    register_corpus,
    sim_train,
    trajectory_to_csv,
    trajectory_to_svg,
)
from .seeding import canonical_json
from .server import MixplaneServer


def _read_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise click.ClickException("config file must hold a JSON object")
    return data


def _merged(config: dict, **cli_values) -> dict:
    """Config file supplies defaults; explicit CLI/env values override."""
    out = dict(config)
    for key, value in cli_values.items():
        if value is not None:
            out[key] = value
    return out


@click.group()
@click.option("--log-level", default="warning", show_default=True,
              type=click.Choice(["debug", "info", "warning", "error"]))
def cli(log_level: str) -> None:
    """Data plane for training runs: corpora, server, simulations, benchmarks."""
    logging.basicConfig(
        level=getattr(logging, log_level.upper()),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


@cli.command("gen-corpus")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="JSON file with a corpus spec (domains, files_per_domain, compress, seed).")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=None)
@click.option("--compress/--no-compress", default=None)
def gen_corpus_cmd(config_path, out_dir, seed, compress):
    """Generate a deterministic synthetic corpus plus manifest."""
    config = _merged(_read_config(config_path), seed=seed, compress=compress)
    if "domains" not in config:
        raise click.ClickException("corpus spec needs a 'domains' list (see --config)")
    spec = SyntheticCorpusSpec.from_json(config)
    manifest = gen_corpus(spec, out_dir)
    click.echo(
        f"wrote {len(manifest['files'])} files, "
        f"{sum(f['samples'] for f in manifest['files'])} samples -> {out_dir}"
    )


@cli.command("register")
@click.option("--corpus", "corpus_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--name", default="synthetic", show_default=True)
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--snapshot", "snapshot_path", type=click.Path(dir_okay=False),
              help="Where to save the catalog snapshot.")
def register_cmd(corpus_dir, name, workers, snapshot_path):
    """Register a generated corpus into a catalog (optionally snapshotted)."""
    catalog = MetadataCatalog()
    register_corpus(catalog, corpus_dir, dataset_name=name, workers=workers)
    click.echo(f"registered dataset {name!r}: {len(catalog.file_paths())} files")
    if snapshot_path:
        catalog.save_snapshot(snapshot_path)
        click.echo(f"snapshot -> {snapshot_path}")


@cli.command("serve")
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True, file_okay=False),
              help="Corpus directory to register at startup.")
@click.option("--snapshot", "snapshot_path", type=click.Path(exists=True, dir_okay=False),
              help="Catalog snapshot to load instead of registering a corpus.")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8734, show_default=True)
@click.option("--workers", type=int, default=1, show_default=True,
              help="Parser processes used when registering --corpus.")
@click.option("--checkpoint-dir", type=click.Path(file_okay=False))
@click.option("--trajectory-dir", type=click.Path(file_okay=False))
def serve_cmd(corpus_dir, snapshot_path, host, port, workers, checkpoint_dir, trajectory_dir):
    """Run the chunk-distribution server in the foreground."""
    if bool(corpus_dir) == bool(snapshot_path):
        raise click.ClickException("pass exactly one of --corpus / --snapshot")
    if snapshot_path:
        catalog = MetadataCatalog.load_snapshot(snapshot_path)
    else:
        catalog = MetadataCatalog()
        register_corpus(catalog, corpus_dir, workers=workers)
    server = MixplaneServer(
        catalog, checkpoint_dir=checkpoint_dir, trajectory_dir=trajectory_dir
    )
    click.echo(f"serving on {host}:{port} (Ctrl-C to stop)")
    server.serve_forever(host, port)


@cli.command("sim-train")
@click.option("--corpus", "corpus_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="JSON file with a SimTrainerSpec (steps, mixture, hidden_laws, ...).")
@click.option("--work-dir", type=click.Path(file_okay=False),
              help="Where trajectory logs land; enables the mixture log.")
@click.option("--report", "report_path", type=click.Path(dir_okay=False),
              help="Write the full run report as JSON.")
@click.option("--register-workers", type=int, default=1, show_default=True)
def sim_train_cmd(corpus_dir, config_path, work_dir, report_path, register_workers):
    """Drive a simulated training loop against a fresh server."""
    spec = SimTrainerSpec.from_json(_read_config(config_path))
    if work_dir:
        Path(work_dir).mkdir(parents=True, exist_ok=True)
    report = sim_train(corpus_dir, spec, work_dir=work_dir, register_workers=register_workers)
    totals = report["totals"]
    click.echo(
        f"ran {report['steps_run']} steps: {totals['outputs']} outputs, "
        f"{totals['chunks']} chunks"
    )
    for domain, tokens in totals["tokens_per_domain"].items():
        click.echo(f"  {domain}: {tokens} tokens")
    if report_path:
        Path(report_path).write_text(canonical_json(report) + "\n", encoding="utf-8")
        click.echo(f"report -> {report_path}")


@cli.command("bench")
@click.option("--corpus", "corpus_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--chunk-sizes", default="512,1024,2048", show_default=True)
@click.option("--workers", default="0,4", show_default=True)
@click.option("--repetitions", type=int, default=3, show_default=True)
@click.option("--max-samples", type=int, default=20000, show_default=True)
def bench_cmd(corpus_dir, chunk_sizes, workers, repetitions, max_samples):
    """Measure submit latency, time to first sample, and stream throughput."""
    sizes = [int(s) for s in chunk_sizes.split(",") if s]
    worker_counts = [int(w) for w in workers.split(",") if w]
    rows = bench(
        corpus_dir,
        chunk_sizes=sizes,
        workers=worker_counts,
        repetitions=repetitions,
        max_samples=max_samples,
    )
    header = f"{'chunk':>6} {'workers':>7} {'submit_s':>9} {'first_s':>8} {'samples/s':>10} {'chunks/s':>9}"
    click.echo(header)
    for row in rows:
        click.echo(
            f"{row['chunk_size']:>6} {row['workers']:>7} "
            f"{row['submit_s']:>9.3f} {row['first_sample_s']:>8.3f} "
            f"{row['samples_per_s']:>10.0f} {row['chunks_per_s']:>9.2f}"
        )


@cli.command("plot-mixture")
@click.option("--trajectory", "trajectory_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False))
@click.option("--svg", "svg_path", type=click.Path(dir_okay=False))
def plot_mixture_cmd(trajectory_path, csv_path, svg_path):
    """Turn a trajectory log into CSV and/or SVG."""
    if not csv_path and not svg_path:
        raise click.ClickException("pass --csv and/or --svg")
    entries = []
    with open(trajectory_path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                entries.append(json.loads(line))
    if not entries:
        raise click.ClickException("trajectory log is empty")
    if csv_path:
        trajectory_to_csv(entries, csv_path)
        click.echo(f"csv -> {csv_path}")
    if svg_path:
        trajectory_to_svg(entries, svg_path)
        click.echo(f"svg -> {svg_path}")


# ----------------------------------------------------------------- client CLI


@click.group()
def client_cli() -> None:
    """Streaming client for a running server."""
    logging.basicConfig(level=logging.WARNING)


@client_cli.command("stream")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8734, show_default=True)
@click.option("--job", "job_id", required=True)
@click.option("--group", "dp_group_id", type=int, default=0, show_default=True)
@click.option("--node", "node_id", type=int, default=0, show_default=True)
@click.option("--worker", "worker_id", type=int, default=0, show_default=True)
@click.option("--mode", default="overall", show_default=True,
              type=click.Choice(["overall", "window", "tokenized"]))
@click.option("--window-size", type=int, default=None)
@click.option("--strict-window/--best-effort-window", default=False)
@click.option("--sequence-length", type=int, default=None)
@click.option("--limit", type=int, default=None, help="Stop after this many outputs.")
@click.option("--quiet", is_flag=True, help="Count outputs without printing them.")
def stream_cmd(host, port, job_id, dp_group_id, node_id, worker_id, mode,
               window_size, strict_window, sequence_length, limit, quiet):
    """Stream one worker identity's outputs to stdout."""
    args = ResultStreamingArgs(
        job_id=job_id,
        dp_group_id=dp_group_id,
        node_id=node_id,
        worker_id=worker_id,
        mode=mode,
        window_size=window_size,
        strict_window=strict_window,
        sequence_length=sequence_length,
    )
    stats = StreamStats()
    emitted = 0
    try:
        with MixplaneClient(host, port) as client:
            for item in stream_samples(client, args, stats=stats):
                if not quiet:
                    if isinstance(item, TokenBatchItem):
                        click.echo(json.dumps({
                            "tokens": item.tokens,
                            "domain": item.tags[0].canonical_string(),
                        }))
                    else:
                        payload, key = item
                        click.echo(json.dumps({
                            "payload": payload,
                            "key": key.canonical_string(),
                        }))
                emitted += 1
                if limit is not None and emitted >= limit:
                    break
    except MixplaneError as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(
        f"# {emitted} outputs from {stats.chunks} chunks "
        f"(blocking reads: {stats.blocking_reads})",
        err=True,
    )


def main() -> None:
    try:
        cli(auto_envvar_prefix="MIXPLANE")
    except MixplaneError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


def client_main() -> None:
    try:
        client_cli(auto_envvar_prefix="MIXPLANE_CLIENT")
    except MixplaneError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
