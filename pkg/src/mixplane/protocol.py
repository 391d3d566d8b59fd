"""Wire protocol: length-prefixed frames over TCP, plus reconnect backoff.

Every message is one frame: a 4-byte big-endian payload length, a 1-byte
task identifier, then the payload. Control payloads are canonical JSON;
chunk payloads are the chunk's canonical bytes split into bounded frames
behind a small JSON header so large chunks stream without huge buffers.
"""

from __future__ import annotations

import json
import socket
import struct
import time
from typing import Callable, Iterator

from .errors import MixplaneError, ProtocolError
from .seeding import canonical_json_bytes

TASK_ERROR = 0x00
TASK_REGISTER = 0x01
TASK_SUBMIT_QUERY = 0x02
TASK_NEXT_CHUNK = 0x03
TASK_FEEDBACK = 0x04
TASK_CHECKPOINT = 0x05
TASK_RESTORE = 0x06
TASK_END_OF_DATA = 0x07

TASK_NAMES = {
    TASK_ERROR: "error",
    TASK_REGISTER: "register",
    TASK_SUBMIT_QUERY: "submit_query",
    TASK_NEXT_CHUNK: "next_chunk",
    TASK_FEEDBACK: "feedback",
    TASK_CHECKPOINT: "checkpoint",
    TASK_RESTORE: "restore",
    TASK_END_OF_DATA: "end_of_data",
}

MAX_DATA_FRAME = 1 << 20  # chunk payload bytes per frame
_HEADER = struct.Struct(">IB")

BACKOFF_BASE = 0.5
BACKOFF_FACTOR = 2.0
BACKOFF_CAP = 30.0


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        read = sock.recv_into(view[got:], n - got)
        if read == 0:
            raise ProtocolError("connection closed mid-frame")
        got += read
    return bytes(buf)


def send_frame(sock: socket.socket, task: int, payload: bytes = b"") -> None:
    sock.sendall(_HEADER.pack(len(payload), task) + payload)


def recv_frame(sock: socket.socket) -> tuple[int, bytes]:
    length, task = _HEADER.unpack(_recv_exact(sock, _HEADER.size))
    payload = _recv_exact(sock, length) if length else b""
    return task, payload


def send_json(sock: socket.socket, task: int, obj) -> None:
    send_frame(sock, task, canonical_json_bytes(obj))


def decode_json(payload: bytes):
    try:
        return json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed JSON payload: {exc}") from exc


def send_chunk_payload(sock: socket.socket, blob: bytes) -> None:
    """Header frame announcing size, then the bytes in bounded frames."""
    frames = max(1, -(-len(blob) // MAX_DATA_FRAME))
    send_json(sock, TASK_NEXT_CHUNK, {"total_bytes": len(blob), "frames": frames})
    for i in range(frames):
        send_frame(sock, TASK_NEXT_CHUNK, blob[i * MAX_DATA_FRAME : (i + 1) * MAX_DATA_FRAME])


def recv_chunk_payload(sock: socket.socket, header: dict) -> bytes:
    total = int(header["total_bytes"])
    frames = int(header["frames"])
    parts = []
    for _ in range(frames):
        task, payload = recv_frame(sock)
        if task != TASK_NEXT_CHUNK:
            raise ProtocolError(f"expected chunk data frame, got task {task:#x}")
        parts.append(payload)
    blob = b"".join(parts)
    if len(blob) != total:
        raise ProtocolError(f"chunk payload truncated: {len(blob)} of {total} bytes")
    return blob


def backoff_delays(
    base: float = BACKOFF_BASE, factor: float = BACKOFF_FACTOR, cap: float = BACKOFF_CAP
) -> Iterator[float]:
    """0.5, 1, 2, 4, ... capped at 30 seconds, forever."""
    delay = base
    while True:
        yield min(delay, cap)
        delay = min(delay * factor, cap)


def connect_with_backoff(
    host: str,
    port: int,
    attempts: int | None = None,
    sleep: Callable[[float], None] = time.sleep,
    base: float = BACKOFF_BASE,
    factor: float = BACKOFF_FACTOR,
    cap: float = BACKOFF_CAP,
) -> socket.socket:
    """Dial until connected, backing off exponentially between failures."""
    delays = backoff_delays(base, factor, cap)
    tried = 0
    while True:
        try:
            return socket.create_connection((host, port))
        except OSError as exc:
            tried += 1
            if attempts is not None and tried >= attempts:
                raise ProtocolError(
                    f"could not connect to {host}:{port} after {tried} attempts"
                ) from exc
            sleep(next(delays))


class ServerReply(MixplaneError):
    """Raised by request helpers when the server answers with an error frame."""

    def __init__(self, message: str, kind: str = "error"):
        super().__init__(message)
        self.kind = kind


def request(sock: socket.socket, task: int, obj) -> tuple[int, dict]:
    """One control round-trip; error frames raise ServerReply."""
    send_json(sock, task, obj)
    reply_task, payload = recv_frame(sock)
    body = decode_json(payload) if payload else {}
    if reply_task == TASK_ERROR:
        raise ServerReply(body.get("message", "server error"), body.get("kind", "error"))
    return reply_task, body
