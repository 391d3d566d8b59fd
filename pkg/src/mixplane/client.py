"""Client: chunk streams in, ordered samples or token batches out.

The client registers a (group, node, worker) identity, fetches chunks by
position, resolves sample pointers against local files, and yields them
under one of three processing modes. Every random choice is seeded from
the chunk itself, so two clients with the same identity produce the same
sequence, regardless of prefetch depth or timing.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from random import Random
from typing import Callable, Iterator, Mapping

from .chunks import Chunk
from .errors import DataReadError, ProtocolError, QueryError
from .formats import read_ranges
from .mixtures import MixtureKey, apportion, sorted_keys
from . import protocol
from .protocol import (
    TASK_CHECKPOINT,
    TASK_END_OF_DATA,
    TASK_FEEDBACK,
    TASK_NEXT_CHUNK,
    TASK_REGISTER,
    TASK_RESTORE,
    TASK_SUBMIT_QUERY,
    ServerReply,
)
from .seeding import derive_seed
from .tokenizers import Tokenizer, get_tokenizer

logger = logging.getLogger(__name__)

_MODES = ("overall", "window", "tokenized")


@dataclass
class ResultStreamingArgs:
    """How one worker identity consumes its chunk stream."""

    job_id: str
    dp_group_id: int = 0
    node_id: int = 0
    worker_id: int = 0
    mode: str = "overall"
    window_size: int | None = None
    strict_window: bool = False
    sequence_length: int | None = None
    prefetch_depth: int = 2
    text_field: str = "text"
    tokenizer: str = "whitespace"

    def __post_init__(self):
        if self.mode not in _MODES:
            raise QueryError(f"unknown mode {self.mode!r}; expected one of {_MODES}")
        if self.mode == "window" and (self.window_size is None or self.window_size < 1):
            raise QueryError("window mode needs window_size >= 1")
        if self.mode == "tokenized" and (self.sequence_length is None or self.sequence_length < 1):
            raise QueryError("tokenized mode needs sequence_length >= 1")
        if self.prefetch_depth < 0:
            raise QueryError("prefetch_depth must be >= 0")


@dataclass
class TokenBatchItem:
    """One fixed-length training sequence; every token tagged with its key."""

    tokens: list[int]
    tags: list[MixtureKey]

    def __post_init__(self):
        if len(self.tokens) != len(self.tags):
            raise DataReadError("token/tag length mismatch in batch item")


@dataclass
class StreamStats:
    """Counters the iterator maintains while yielding."""

    chunks: int = 0
    samples: int = 0
    sequences: int = 0
    blocking_reads: int = 0
    prefetched_reads: int = 0
    empty_samples_skipped: int = 0


@dataclass
class Registration:
    position: int
    skip_outputs: int
    files: dict[int, str]
    chunk_size: int
    seed: int
    dp_groups: int
    nodes_per_group: int
    num_workers: int


class ProgressBoard:
    """Outputs yielded from the in-flight chunk, per worker; read at checkpoint."""

    def __init__(self):
        self._lock = threading.Lock()
        self._progress: dict[int, int] = {}

    def reset(self, worker_id: int, value: int = 0) -> None:
        with self._lock:
            self._progress[worker_id] = value

    def advance(self, worker_id: int) -> None:
        with self._lock:
            self._progress[worker_id] = self._progress.get(worker_id, 0) + 1

    def snapshot(self) -> dict[int, int]:
        with self._lock:
            return dict(self._progress)


# --------------------------------------------------------------------- client


class MixplaneClient:
    """Thin RPC wrapper; reconnects with backoff and replays the failed call.

    Safe to replay because every request is idempotent on the server:
    chunk fetches carry an explicit position, and duplicate feedback for
    an already-seen step is treated as a lost acknowledgement.
    """

    def __init__(
        self,
        host: str,
        port: int,
        attempts: int | None = 8,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.host = host
        self.port = port
        self.attempts = attempts
        self._sleep = sleep
        self._sock: socket.socket | None = None
        self._lock = threading.Lock()

    # --------------------------------------------------------------- plumbing

    def _connect(self) -> socket.socket:
        if self._sock is None:
            self._sock = protocol.connect_with_backoff(
                self.host, self.port, attempts=self.attempts, sleep=self._sleep
            )
        return self._sock

    def close(self) -> None:
        with self._lock:
            if self._sock is not None:
                try:
                    self._sock.close()
                except OSError:
                    pass
                self._sock = None

    def __enter__(self) -> "MixplaneClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _drop_connection(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None

    def _call(self, task: int, body: dict) -> tuple[int, dict, bytes | None]:
        """One round-trip; reconnect and replay once per connection loss."""
        with self._lock:
            failures = 0
            while True:
                sock = self._connect()
                try:
                    reply_task, reply = protocol.request(sock, task, body)
                    blob = None
                    if reply_task == TASK_NEXT_CHUNK:
                        blob = protocol.recv_chunk_payload(sock, reply)
                    return reply_task, reply, blob
                except (OSError, ProtocolError) as exc:
                    failures += 1
                    self._drop_connection()
                    if self.attempts is not None and failures >= self.attempts:
                        raise ProtocolError(
                            f"request failed after {failures} connection losses: {exc}"
                        ) from exc
                    logger.warning("connection lost (%s); reconnecting", exc)

    # ------------------------------------------------------------------- RPCs

    def submit_query(self, query, args) -> dict:
        _, reply, _ = self._call(
            TASK_SUBMIT_QUERY, {"query": query.to_json(), "args": args.to_json()}
        )
        return reply

    def register(
        self, job_id: str, dp_group_id: int, node_id: int, worker_id: int
    ) -> Registration:
        _, reply, _ = self._call(
            TASK_REGISTER,
            {
                "job_id": job_id,
                "dp_group_id": dp_group_id,
                "node_id": node_id,
                "worker_id": worker_id,
            },
        )
        return Registration(
            position=int(reply["position"]),
            skip_outputs=int(reply["skip_samples"]),
            files={int(fid): path for fid, path in reply["files"].items()},
            chunk_size=int(reply["chunk_size"]),
            seed=int(reply["seed"]),
            dp_groups=int(reply["dp_groups"]),
            nodes_per_group=int(reply["nodes_per_group"]),
            num_workers=int(reply["num_workers"]),
        )

    def next_chunk(
        self, job_id: str, dp_group_id: int, node_id: int, worker_id: int, position: int
    ) -> Chunk | None:
        task, _, blob = self._call(
            TASK_NEXT_CHUNK,
            {
                "job_id": job_id,
                "dp_group_id": dp_group_id,
                "node_id": node_id,
                "worker_id": worker_id,
                "position": position,
            },
        )
        if task == TASK_END_OF_DATA:
            return None
        return Chunk.deserialize(blob)

    def feedback(self, job_id: str, step: int, losses: Mapping) -> dict:
        body = {
            "job_id": job_id,
            "step": int(step),
            "losses": {
                (k.canonical_string() if isinstance(k, MixtureKey) else str(k)): [
                    float(v[0]),
                    int(v[1]),
                ]
                for k, v in losses.items()
            },
        }
        try:
            _, reply, _ = self._call(TASK_FEEDBACK, body)
            return reply
        except ServerReply as exc:
            # A retried delivery after connection loss may hit the step guard;
            # the first copy was applied, so report success.
            if exc.kind == "FeedbackError" and "not after last seen" in str(exc):
                return {"status": "ok"}
            raise

    def checkpoint(self, job_id: str) -> str:
        _, reply, _ = self._call(TASK_CHECKPOINT, {"job_id": job_id})
        return reply["checkpoint_id"]

    def restore(self, checkpoint_id: str, worker_progress: Mapping[str, int] | None = None) -> str:
        _, reply, _ = self._call(
            TASK_RESTORE,
            {"checkpoint_id": checkpoint_id, "worker_progress": dict(worker_progress or {})},
        )
        return reply["job_id"]


# ------------------------------------------------------------------ iteration


class ActiveIterator:
    """Samples of one mixture key, in seeded file order, ranges ascending.

    File reads go through an optional prefetch executor; consumption is
    strictly in submission order, so prefetch depth never changes output.
    """

    def __init__(
        self,
        key: MixtureKey,
        ranges_by_file,
        files: Mapping[int, str],
        seed: int,
        executor: ThreadPoolExecutor | None,
        depth: int,
        stats: StreamStats,
    ):
        self.key = key
        self._stats = stats
        self._executor = executor
        self._depth = depth if executor is not None else 0
        rng = Random(derive_seed(seed, "iter", key.canonical_string()))
        work: list[tuple[int, int]] = []
        for dataset_id in sorted(ranges_by_file):
            for file_id in sorted(ranges_by_file[dataset_id]):
                work.append((dataset_id, file_id))
        rng.shuffle(work)
        self._jobs = deque()
        for dataset_id, file_id in work:
            path = files.get(file_id)
            if path is None:
                raise DataReadError(f"chunk references unknown file id {file_id}")
            self._jobs.append((path, sorted(ranges_by_file[dataset_id][file_id])))
        self._pending: deque[Future] = deque()
        self._batch: deque = deque()
        self.remaining = sum(
            end - start
            for by_file in ranges_by_file.values()
            for ranges in by_file.values()
            for start, end in ranges
        )
        self._top_up()

    @staticmethod
    def _read(path: str, ranges) -> list:
        try:
            return read_ranges(path, ranges)
        except FileNotFoundError as exc:
            raise DataReadError(f"data file missing: {path}") from exc

    def _top_up(self) -> None:
        while self._executor is not None and self._jobs and len(self._pending) < self._depth:
            path, ranges = self._jobs.popleft()
            self._pending.append(self._executor.submit(self._read, path, ranges))

    def _next_batch(self) -> bool:
        if self._pending:
            fut = self._pending.popleft()
            if fut.done():
                self._stats.prefetched_reads += 1
            else:
                self._stats.blocking_reads += 1
            self._batch.extend(fut.result())
            self._top_up()
            return True
        if self._jobs:
            path, ranges = self._jobs.popleft()
            self._stats.blocking_reads += 1
            self._batch.extend(self._read(path, ranges))
            return True
        return False

    @property
    def depleted(self) -> bool:
        return self.remaining == 0

    def take(self) -> object:
        """Next payload; raises if depleted."""
        while not self._batch:
            if not self._next_batch():
                raise DataReadError(f"iterator for {self.key.canonical_string()} is depleted")
        self.remaining -= 1
        return self._batch.popleft()


class ChunkStreamer:
    """Turns one chunk into the mode's ordered output stream."""

    def __init__(
        self,
        chunk: Chunk,
        files: Mapping[int, str],
        args: ResultStreamingArgs,
        stats: StreamStats,
        executor: ThreadPoolExecutor | None = None,
        tokenizer: Tokenizer | None = None,
    ):
        self.chunk = chunk
        self.args = args
        self.stats = stats
        self._keys = sorted_keys(chunk.data)
        self._iters = {
            key: ActiveIterator(
                key, chunk.data[key], files, chunk.seed, executor, args.prefetch_depth, stats
            )
            for key in self._keys
        }
        self._tokenizer = tokenizer

    def _window_counts(self, window_size: int) -> dict[MixtureKey, int]:
        """Apportion the chunk's mixture over one window, live keys only."""
        if self.chunk.mixture is not None:
            weights = {
                k: w for k, w in self.chunk.mixture.weights.items() if k in self._iters
            }
        else:
            weights = {}
        if not weights:
            per_key = self.chunk.samples_per_key()
            weights = {k: float(n) for k, n in per_key.items() if n > 0}
        total = sum(weights.values())
        weights = {k: w / total for k, w in weights.items()}
        return apportion(weights, window_size)

    def _shuffled_keys(self, label: str) -> list[MixtureKey]:
        order = list(self._keys)
        Random(derive_seed(self.chunk.seed, label)).shuffle(order)
        return order

    # ---------------------------------------------------------------- overall

    def overall(self) -> Iterator[tuple[object, MixtureKey]]:
        order = self._shuffled_keys("overall")
        while True:
            emitted = False
            for key in order:
                it = self._iters[key]
                if it.depleted:
                    continue
                yield it.take(), key
                emitted = True
            if not emitted:
                return

    # ----------------------------------------------------------------- window

    def window(self) -> Iterator[tuple[object, MixtureKey]]:
        window_size = self.args.window_size
        counts = self._window_counts(window_size)
        order = self._shuffled_keys("window")
        while True:
            built: list[tuple[object, MixtureKey]] = []
            complete = True
            for key in order:
                want = counts.get(key, 0)
                it = self._iters[key]
                got = min(want, it.remaining)
                if got < want:
                    complete = False
                    if self.args.strict_window:
                        return  # drop the partial window entirely
                for _ in range(got):
                    built.append((it.take(), key))
            if not built:
                return
            yield from built
            if not complete:
                return

    # -------------------------------------------------------------- tokenized

    def tokenized(self) -> Iterator[TokenBatchItem]:
        if self._tokenizer is None:
            raise QueryError("tokenized mode needs a tokenizer")
        length = self.args.sequence_length
        window_size = self.args.window_size
        if self.chunk.mixture is not None:
            chunk_size = self.chunk.mixture.chunk_size
            if window_size is not None and window_size != chunk_size:
                raise QueryError(
                    f"tokenized mode requires window_size == chunk_size "
                    f"({window_size} != {chunk_size})"
                )
            window_size = chunk_size
        elif window_size is None:
            raise QueryError("tokenized mode on mixture-less chunks needs window_size")
        counts = self._window_counts(window_size)
        order = self._shuffled_keys("tokenized")
        buffers: dict[MixtureKey, list[int]] = {key: [] for key in self._keys}

        def fill(key: MixtureKey) -> bool:
            """Grow key's buffer to one sequence; False when samples run out."""
            buf = buffers[key]
            it = self._iters[key]
            while len(buf) < length:
                if it.depleted:
                    return False
                payload = it.take()
                text = (
                    payload.get(self.args.text_field, "")
                    if isinstance(payload, Mapping)
                    else str(payload)
                )
                tokens = self._tokenizer.encode(text)
                if not tokens:
                    self.stats.empty_samples_skipped += 1
                    continue
                buf.extend(tokens)
            return True

        while True:
            built: list[TokenBatchItem] = []
            for key in order:
                for _ in range(counts.get(key, 0)):
                    if not fill(key):
                        return  # window unfillable; drop partial window and leftovers
                    buf = buffers[key]
                    built.append(TokenBatchItem(buf[:length], [key] * length))
                    del buffers[key][:length]
            if not built:
                return
            yield from built

    def outputs(self) -> Iterator:
        if self.args.mode == "overall":
            return self.overall()
        if self.args.mode == "window":
            return self.window()
        return self.tokenized()


def stream_samples(
    client: MixplaneClient,
    args: ResultStreamingArgs,
    board: ProgressBoard | None = None,
    stats: StreamStats | None = None,
) -> Iterator:
    """Outer loop over chunks, inner loop over the mode's outputs.

    Yields (payload, key) pairs in overall/window mode and TokenBatchItems
    in tokenized mode, until the server reports end of data. On a restore,
    registration tells this worker how many outputs of its in-flight chunk
    were already consumed; those are dropped before yielding resumes.
    """
    stats = stats if stats is not None else StreamStats()
    reg = client.register(args.job_id, args.dp_group_id, args.node_id, args.worker_id)
    tokenizer = get_tokenizer(args.tokenizer) if args.mode == "tokenized" else None
    position = reg.position
    skip = reg.skip_outputs
    executor = (
        ThreadPoolExecutor(max_workers=max(1, args.prefetch_depth))
        if args.prefetch_depth > 0
        else None
    )
    try:
        while True:
            chunk = client.next_chunk(
                args.job_id, args.dp_group_id, args.node_id, args.worker_id, position
            )
            if chunk is None:
                return
            stats.chunks += 1
            if board:
                board.reset(args.worker_id)
            streamer = ChunkStreamer(chunk, reg.files, args, stats, executor, tokenizer)
            dropped = 0
            for item in streamer.outputs():
                if dropped < skip:
                    dropped += 1
                    if board:
                        board.advance(args.worker_id)
                    continue
                if isinstance(item, TokenBatchItem):
                    stats.sequences += 1
                else:
                    stats.samples += 1
                if board:
                    board.advance(args.worker_id)
                yield item
            if skip and dropped < skip:
                raise DataReadError(
                    f"restore progress {skip} exceeds the {dropped} outputs "
                    f"of chunk {chunk.chunk_id}"
                )
            skip = 0
            position += 1
    finally:
        if executor is not None:
            executor.shutdown(wait=False, cancel_futures=True)


def per_domain_loss(
    token_losses, tags
) -> dict[MixtureKey, tuple[float, int]]:
    """Group per-token losses by domain tag into (loss-sum, token-count)."""
    if len(token_losses) != len(tags):
        raise DataReadError(
            f"{len(token_losses)} losses for {len(tags)} tags"
        )
    out: dict[MixtureKey, list] = {}
    for loss, tag in zip(token_losses, tags):
        cell = out.get(tag)
        if cell is None:
            out[tag] = [float(loss), 1]
        else:
            cell[0] += float(loss)
            cell[1] += 1
    return {key: (total, count) for key, (total, count) in out.items()}
