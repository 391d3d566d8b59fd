"""Server: job lifecycle from query to distributed chunk streams.

A submitted query runs filter → intervals → index and becomes a job.
Chunks are generated lazily, serialized once, and distributed so that all
nodes of a data-parallel group see identical bytes in identical order
while distinct groups consume disjoint round-robin slices. Feedback flows
to dynamic mixtures; checkpoints capture generator + distributor +
mixture state and restore to an equivalent stream.
"""

from __future__ import annotations

import base64
import binascii
import logging
import socket
import threading
from pathlib import Path
from typing import Mapping

from .ado import AdoConfig, AdoSource, AdoState, TrajectoryLogger
from .catalog import MetadataCatalog
from .chunks import ChunkGenerator
from .errors import (
    CheckpointError,
    FeedbackError,
    MixplaneError,
    QueryError,
    ServerError,
)
from .index import build_index
from .mixtures import (
    HierarchicalMixtureSpec,
    MixtureKey,
    MixtureSchedule,
    MixtureSource,
    MixtureSpec,
    ScheduleSource,
    StaticSource,
    infer_mixture,
)
from . import protocol
from .protocol import (
    TASK_CHECKPOINT,
    TASK_END_OF_DATA,
    TASK_ERROR,
    TASK_FEEDBACK,
    TASK_NEXT_CHUNK,
    TASK_REGISTER,
    TASK_RESTORE,
    TASK_SUBMIT_QUERY,
)
from .query import Query, QueryExecutionArgs, job_seed
from .seeding import canonical_json_bytes, content_id

logger = logging.getLogger(__name__)

_CHECKPOINT_VERSION = 1


class ArbitrarySource(MixtureSource):
    """Marker source: no mixture, chunks drain the index key by key."""

    algorithm = "arbitrary"

    def __init__(self, chunk_size: int):
        self.chunk_size = int(chunk_size)

    def current_spec(self) -> MixtureSpec:
        raise ServerError("arbitrary jobs have no mixture spec")


def resolve_mixture(config: Mapping, index) -> MixtureSource:
    """Instantiate the mixture source a job consults before each chunk."""
    kind = config.get("type")
    if kind == "static":
        return StaticSource(MixtureSpec.from_json(config["spec"]))
    if kind == "hierarchical":
        return StaticSource(HierarchicalMixtureSpec.from_json(config["spec"]).flatten())
    if kind == "schedule":
        return ScheduleSource(MixtureSchedule.from_json(config["schedule"]))
    if kind == "inferring":
        spec = infer_mixture(index, int(config["chunk_size"]), bool(config.get("strict", False)))
        return StaticSource(spec)
    if kind == "ado":
        prior = {MixtureKey.parse(k): float(v) for k, v in config["prior"].items()}
        ado_cfg = AdoConfig.from_json(config.get("config") or {})
        return AdoSource(AdoState(ado_cfg, prior), int(config["chunk_size"]))
    if kind == "arbitrary":
        return ArbitrarySource(int(config["chunk_size"]))
    raise QueryError(f"unknown mixture type {kind!r}")


def config_chunk_size(config: Mapping) -> int:
    kind = config.get("type")
    if kind in ("static", "hierarchical"):
        return int(config["spec"]["chunk_size"])
    if kind == "schedule":
        return int(config["schedule"]["stages"][0][1]["chunk_size"])
    return int(config["chunk_size"])


class _Job:
    """Everything one job owns; all mutation under its lock."""

    def __init__(self, catalog: MetadataCatalog, query: Query, args: QueryExecutionArgs,
                 trajectory_path: Path | None = None):
        self.query = query
        self.args = args
        self.seed = job_seed(query, args)
        self.lock = threading.RLock()
        rows = catalog.filter_intervals(query.predicates)
        if not rows:
            raise QueryError(f"query for job {query.job_id!r} matches no samples")
        self.index = build_index(rows)
        self.source = resolve_mixture(args.mixture, self.index)
        self.generator = ChunkGenerator(self.index, self.seed)
        self.files = catalog.file_paths()
        self.chunk_size = config_chunk_size(args.mixture)
        # distribution state
        self.streams_per_group = args.streams_per_group
        self.total_streams = args.total_streams
        self.cache: dict[tuple[int, int, int], bytes] = {}  # (group, worker, ordinal)
        self.last_requested: dict[tuple[int, int, int], int] = {}  # (group, worker, node)
        self.exhausted = False
        self.feedback_step = 0
        self.skip_hints: dict[tuple[int, int, int], tuple[int, int]] = {}  # (g,n,w) -> (ordinal, skip)
        self.trajectory = TrajectoryLogger(trajectory_path) if trajectory_path else None
        self._warned_static_feedback = False

    # ------------------------------------------------------------ validation

    def _check_identity(self, group: int, node: int, worker: int) -> None:
        if not (0 <= group < self.args.dp_groups):
            raise ServerError(f"dp_group_id {group} out of range")
        if not (0 <= node < self.args.nodes_per_group):
            raise ServerError(f"node_id {node} out of range")
        if not (0 <= worker < self.streams_per_group):
            raise ServerError(f"worker_id {worker} out of range")

    # ------------------------------------------------------------ generation

    def _generate_upto(self, global_index: int) -> None:
        while self.generator.next_chunk_id <= global_index and not self.exhausted:
            chunk_id = self.generator.next_chunk_id
            if isinstance(self.source, ArbitrarySource):
                chunk = self.generator.generate_arbitrary(self.source.chunk_size)
            else:
                spec = self.source.current_spec()
                chunk = self.generator.generate(spec)
                if chunk is not None and self.trajectory and self.source.is_dynamic():
                    self.trajectory.log(self.feedback_step, chunk.chunk_id, spec.weights)
            if chunk is None:
                self.exhausted = True
                logger.info(
                    "job %s exhausted after %d chunks (report: %s)",
                    self.query.job_id, chunk_id, self.generator.last_report,
                )
                return
            stream = chunk_id % self.total_streams
            ordinal = chunk_id // self.total_streams
            group, worker = divmod(stream, self.streams_per_group)
            self.cache[(group, worker, ordinal)] = chunk.serialize()

    def _floor(self, group: int, worker: int) -> int:
        return min(
            self.last_requested.get((group, worker, n), -1)
            for n in range(self.args.nodes_per_group)
        )

    def _evict(self, group: int, worker: int) -> None:
        floor = self._floor(group, worker)
        if floor <= 0:
            return
        stale = [k for k in self.cache if k[0] == group and k[1] == worker and k[2] < floor]
        for k in stale:
            del self.cache[k]

    def next_chunk_bytes(self, group: int, node: int, worker: int, position: int) -> bytes | None:
        with self.lock:
            self._check_identity(group, node, worker)
            if position < 0:
                raise ServerError("position must be nonnegative")
            key = (group, worker, position)
            if key not in self.cache and not self.exhausted:
                stream = group * self.streams_per_group + worker
                self._generate_upto(position * self.total_streams + stream)
            blob = self.cache.get(key)
            if blob is None:
                floor = self._floor(group, worker)
                if position < floor:
                    raise ServerError(
                        f"position {position} was evicted (all nodes advanced past {floor})"
                    )
                return None  # end of data for this stream
            prev = self.last_requested.get((group, worker, node), -1)
            self.last_requested[(group, worker, node)] = max(prev, position)
            self._evict(group, worker)
            return blob

    # -------------------------------------------------------------- register

    def register(self, group: int, node: int, worker: int) -> dict:
        with self.lock:
            self._check_identity(group, node, worker)
            hint = self.skip_hints.pop((group, node, worker), None)
            if hint is not None:
                position, skip = hint
            else:
                position = self.last_requested.get((group, worker, node), -1) + 1
                skip = 0
            return {
                "position": position,
                "skip_samples": skip,
                "files": {str(fid): path for fid, path in sorted(self.files.items())},
                "chunk_size": self.chunk_size,
                "dp_groups": self.args.dp_groups,
                "nodes_per_group": self.args.nodes_per_group,
                "num_workers": self.args.num_workers,
                "seed": self.seed,
            }

    # -------------------------------------------------------------- feedback

    def receive_feedback(self, step: int, losses: Mapping[MixtureKey, tuple[float, int]]) -> dict:
        with self.lock:
            if not self.source.is_dynamic():
                if not self._warned_static_feedback:
                    self._warned_static_feedback = True
                    logger.warning(
                        "job %s: feedback ignored (mixture is not dynamic)", self.query.job_id
                    )
                return {"status": "ignored"}
            if step <= self.feedback_step:
                raise FeedbackError(
                    f"step {step} not after last seen step {self.feedback_step}"
                )
            self.source.observe_feedback(step, losses)
            self.feedback_step = step
            return {"status": "ok"}

    # ------------------------------------------------------------ checkpoint

    def state_dict(self) -> dict:
        with self.lock:
            return {
                "version": _CHECKPOINT_VERSION,
                "job_id": self.query.job_id,
                "query": self.query.to_json(),
                "args": self.args.to_json(),
                "seed": self.seed,
                "generator": self.generator.state_dict(),
                "exhausted": self.exhausted,
                "feedback_step": self.feedback_step,
                "mixture_state": self.source.state_dict(),
                "distributor": {
                    "last_requested": {
                        f"{g}:{w}:{n}": o
                        for (g, w, n), o in sorted(self.last_requested.items())
                    },
                    "cache": {
                        f"{g}:{w}:{o}": base64.b64encode(blob).decode("ascii")
                        for (g, w, o), blob in sorted(self.cache.items())
                    },
                },
            }

    def load_state(self, state: Mapping) -> None:
        with self.lock:
            self.generator.load_state(state["generator"])
            self.exhausted = bool(state["exhausted"])
            self.feedback_step = int(state["feedback_step"])
            if state["mixture_state"]:
                self.source.load_state(state["mixture_state"])
            dist = state["distributor"]
            self.last_requested = {}
            for key, o in dist["last_requested"].items():
                g, w, n = (int(x) for x in key.split(":"))
                self.last_requested[(g, w, n)] = int(o)
            self.cache = {}
            for key, b64 in dist["cache"].items():
                g, w, o = (int(x) for x in key.split(":"))
                try:
                    self.cache[(g, w, o)] = base64.b64decode(b64, validate=True)
                except binascii.Error as exc:
                    raise CheckpointError(f"corrupt cached chunk {key}: {exc}") from exc

    def apply_worker_progress(self, progress: Mapping[str, int]) -> None:
        with self.lock:
            for ident, yielded in progress.items():
                g, n, w = (int(x) for x in ident.split(":"))
                self._check_identity(g, n, w)
                yielded = int(yielded)
                ordinal = self.last_requested.get((g, w, n), -1)
                if ordinal < 0:
                    if yielded > 0:
                        raise CheckpointError(
                            f"identity {ident} reported progress but never fetched a chunk"
                        )
                    continue
                if yielded < 0:
                    raise CheckpointError(f"identity {ident}: negative progress {yielded}")
                if (g, w, ordinal) not in self.cache:
                    raise CheckpointError(
                        f"in-flight chunk for identity {ident} is not in the checkpoint"
                    )
                self.skip_hints[(g, n, w)] = (ordinal, yielded)
            # every other worker that had fetched a chunk replays it in full
            for (g, w, n), ordinal in self.last_requested.items():
                if ordinal >= 0 and (g, n, w) not in self.skip_hints:
                    self.skip_hints[(g, n, w)] = (ordinal, 0)


class MixplaneServer:
    """Library API plus the TCP front end; one instance serves many jobs."""

    def __init__(
        self,
        catalog: MetadataCatalog,
        checkpoint_dir: str | Path | None = None,
        trajectory_dir: str | Path | None = None,
    ):
        self.catalog = catalog
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.trajectory_dir = Path(trajectory_dir) if trajectory_dir else None
        if self.checkpoint_dir:
            self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
        if self.trajectory_dir:
            self.trajectory_dir.mkdir(parents=True, exist_ok=True)
        self._jobs: dict[str, _Job] = {}
        self._checkpoints: dict[str, dict] = {}
        self._lock = threading.Lock()
        self._listener: socket.socket | None = None
        self._threads: list[threading.Thread] = []
        self._stopping = threading.Event()

    # ----------------------------------------------------------- library API

    def _job(self, job_id: str) -> _Job:
        with self._lock:
            job = self._jobs.get(job_id)
        if job is None:
            raise ServerError(f"unknown job {job_id!r}")
        return job

    def submit_query(self, query: Query, args: QueryExecutionArgs) -> dict:
        with self._lock:
            held = self._jobs.get(query.job_id)
        if held is not None:
            if held.query == query and held.args == args:
                return {"job_id": query.job_id, "seed": held.seed, "status": "exists"}
            raise ServerError(f"job {query.job_id!r} already exists with a different query")
        trajectory = (
            self.trajectory_dir / f"{query.job_id}.trajectory.jsonl"
            if self.trajectory_dir
            else None
        )
        job = _Job(self.catalog, query, args, trajectory_path=trajectory)
        with self._lock:
            other = self._jobs.setdefault(query.job_id, job)
        if other is not job and not (other.query == query and other.args == args):
            raise ServerError(f"job {query.job_id!r} already exists with a different query")
        logger.info(
            "job %s: %d component keys, %d samples, seed %d",
            query.job_id, len(job.index.component_keys()),
            job.index.total_samples(), job.seed,
        )
        return {"job_id": query.job_id, "seed": job.seed, "status": "created"}

    def register(self, job_id: str, dp_group_id: int, node_id: int, worker_id: int) -> dict:
        return self._job(job_id).register(dp_group_id, node_id, worker_id)

    def next_chunk(
        self, job_id: str, dp_group_id: int, node_id: int, worker_id: int, position: int
    ) -> bytes | None:
        return self._job(job_id).next_chunk_bytes(dp_group_id, node_id, worker_id, position)

    def receive_feedback(self, job_id: str, step: int, losses: Mapping) -> dict:
        parsed: dict[MixtureKey, tuple[float, int]] = {}
        for key, value in losses.items():
            mk = key if isinstance(key, MixtureKey) else MixtureKey.parse(key)
            total, count = value
            parsed[mk] = (float(total), int(count))
        return self._job(job_id).receive_feedback(int(step), parsed)

    def checkpoint(self, job_id: str) -> str:
        state = self._job(job_id).state_dict()
        blob = canonical_json_bytes(state)
        checkpoint_id = content_id(blob)
        with self._lock:
            self._checkpoints[checkpoint_id] = state
        if self.checkpoint_dir:
            path = self.checkpoint_dir / f"{checkpoint_id}.json"
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(blob)
            tmp.replace(path)
        logger.info("job %s checkpointed as %s", job_id, checkpoint_id)
        return checkpoint_id

    def restore(self, checkpoint_id: str, worker_progress: Mapping[str, int] | None = None) -> str:
        with self._lock:
            state = self._checkpoints.get(checkpoint_id)
        if state is None and self.checkpoint_dir:
            path = self.checkpoint_dir / f"{checkpoint_id}.json"
            if path.is_file():
                state = protocol.decode_json(path.read_bytes())
        if state is None:
            raise CheckpointError(f"unknown checkpoint {checkpoint_id!r}")
        if state.get("version") != _CHECKPOINT_VERSION:
            raise CheckpointError("unsupported checkpoint version")
        query = Query.from_json(state["query"])
        args = QueryExecutionArgs.from_json(state["args"])
        trajectory = (
            self.trajectory_dir / f"{query.job_id}.trajectory.jsonl"
            if self.trajectory_dir
            else None
        )
        job = _Job(self.catalog, query, args, trajectory_path=trajectory)
        if job.seed != state["seed"]:
            raise CheckpointError("checkpoint seed does not match the re-derived job seed")
        job.load_state(state)
        job.apply_worker_progress(worker_progress or {})
        with self._lock:
            self._jobs[query.job_id] = job
        logger.info("restored job %s from checkpoint %s", query.job_id, checkpoint_id)
        return query.job_id

    # ------------------------------------------------------------- TCP front

    def _dispatch(self, sock: socket.socket, task: int, body: dict) -> None:
        if task == TASK_SUBMIT_QUERY:
            ack = self.submit_query(
                Query.from_json(body["query"]), QueryExecutionArgs.from_json(body["args"])
            )
            protocol.send_json(sock, TASK_SUBMIT_QUERY, ack)
        elif task == TASK_REGISTER:
            ack = self.register(
                body["job_id"], int(body["dp_group_id"]),
                int(body["node_id"]), int(body["worker_id"]),
            )
            protocol.send_json(sock, TASK_REGISTER, ack)
        elif task == TASK_NEXT_CHUNK:
            blob = self.next_chunk(
                body["job_id"], int(body["dp_group_id"]), int(body["node_id"]),
                int(body["worker_id"]), int(body["position"]),
            )
            if blob is None:
                protocol.send_json(sock, TASK_END_OF_DATA, {})
            else:
                protocol.send_chunk_payload(sock, blob)
        elif task == TASK_FEEDBACK:
            ack = self.receive_feedback(body["job_id"], int(body["step"]), body["losses"])
            protocol.send_json(sock, TASK_FEEDBACK, ack)
        elif task == TASK_CHECKPOINT:
            checkpoint_id = self.checkpoint(body["job_id"])
            protocol.send_json(sock, TASK_CHECKPOINT, {"checkpoint_id": checkpoint_id})
        elif task == TASK_RESTORE:
            job_id = self.restore(body["checkpoint_id"], body.get("worker_progress") or {})
            protocol.send_json(sock, TASK_RESTORE, {"job_id": job_id})
        else:
            raise ServerError(f"unknown task id {task:#x}")

    def _serve_connection(self, sock: socket.socket, peer) -> None:
        with sock:
            while not self._stopping.is_set():
                try:
                    task, payload = protocol.recv_frame(sock)
                except (MixplaneError, OSError):
                    return  # client went away
                try:
                    body = protocol.decode_json(payload) if payload else {}
                    self._dispatch(sock, task, body)
                except MixplaneError as exc:
                    logger.warning("request from %s failed: %s", peer, exc)
                    try:
                        protocol.send_json(
                            sock, TASK_ERROR,
                            {"kind": type(exc).__name__, "message": str(exc)},
                        )
                    except OSError:
                        return
                except OSError:
                    return
                except Exception:
                    logger.exception("unexpected failure handling task %#x", task)
                    try:
                        protocol.send_json(
                            sock, TASK_ERROR,
                            {"kind": "internal", "message": "internal server error"},
                        )
                    except OSError:
                        return

    def start(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        """Listen in background threads; returns the bound (host, port)."""
        listener = socket.create_server((host, port))
        listener.settimeout(0.2)
        self._listener = listener
        bound = listener.getsockname()[:2]

        def accept_loop() -> None:
            while not self._stopping.is_set():
                try:
                    conn, peer = listener.accept()
                except socket.timeout:
                    continue
                except OSError:
                    return
                thread = threading.Thread(
                    target=self._serve_connection, args=(conn, peer), daemon=True
                )
                thread.start()
                self._threads.append(thread)

        acceptor = threading.Thread(target=accept_loop, daemon=True)
        acceptor.start()
        self._threads.append(acceptor)
        logger.info("serving on %s:%d", *bound)
        return bound

    def serve_forever(self, host: str, port: int) -> None:
        self.start(host, port)
        try:
            while not self._stopping.is_set():
                self._stopping.wait(1.0)
        except KeyboardInterrupt:
            pass
        finally:
            self.stop()

    def stop(self) -> None:
        self._stopping.set()
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
            self._listener = None
