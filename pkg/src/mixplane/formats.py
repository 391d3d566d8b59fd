"""Record-level IO for jsonl and zstd-compressed jsonl files.

A data file is a sequence of UTF-8 JSON objects, one per newline-terminated
line; the record index within the file is the line number (0-based). Files
are read strictly forward: random access to a range is a single scan that
skips `start` records and parses the next `end - start`. A `FileScanner`
keeps its position so that consecutive ranges of one file are served by one
continued scan.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Iterator

from .errors import DataReadError
from .zstdio import open_zstd

JSONL_SUFFIX = ".jsonl"
ZST_SUFFIX = ".jsonl.zst"


def is_supported(path: str | os.PathLike) -> bool:
    name = str(path)
    return name.endswith(JSONL_SUFFIX) or name.endswith(ZST_SUFFIX)


def open_binary(path: str | os.PathLike):
    """Open a data file as a buffered binary stream, decompressing if needed."""
    name = str(path)
    if name.endswith(ZST_SUFFIX):
        return open_zstd(name, "rb")
    if name.endswith(JSONL_SUFFIX):
        return open(name, "rb")
    raise DataReadError(f"unsupported data file format: {name}")


def _parse_line(raw: bytes, path: str, index: int) -> Any:
    try:
        return json.loads(raw)
    except (ValueError, UnicodeDecodeError) as exc:
        raise DataReadError(f"{path}: malformed JSON on line {index + 1}: {exc}") from exc


def iter_records(path: str | os.PathLike) -> Iterator[Any]:
    """Yield every record of a file in order."""
    spath = str(path)
    with open_binary(spath) as fh:
        for line_no, raw in enumerate(fh):
            raw = raw.rstrip(b"\n")
            if not raw:
                continue
            yield _parse_line(raw, spath, line_no)


def count_records(path: str | os.PathLike) -> int:
    n = 0
    with open_binary(str(path)) as fh:
        for raw in fh:
            if raw.rstrip(b"\n"):
                n += 1
    return n


class FileScanner:
    """Forward-only record reader over one data file.

    `read(start, end)` returns records `start..end-1`. Requests must not move
    backwards; ascending requests continue the same underlying scan without
    reopening the file.
    """

    def __init__(self, path: str | os.PathLike):
        self.path = str(path)
        self._fh = open_binary(self.path)
        self._next_index = 0

    def read(self, start: int, end: int) -> list[Any]:
        if start < 0 or start >= end:
            raise DataReadError(f"{self.path}: invalid range [{start},{end})")
        if start < self._next_index:
            raise DataReadError(
                f"{self.path}: backward scan requested "
                f"(at record {self._next_index}, asked for {start})"
            )
        out: list[Any] = []
        while self._next_index < end:
            raw = self._fh.readline()
            if not raw:
                raise DataReadError(
                    f"{self.path}: range [{start},{end}) beyond end of file "
                    f"({self._next_index} records)"
                )
            stripped = raw.rstrip(b"\n")
            if not stripped:
                continue
            if self._next_index >= start:
                out.append(_parse_line(stripped, self.path, self._next_index))
            self._next_index += 1
        return out

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "FileScanner":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_range(path: str | os.PathLike, start: int, end: int) -> list[Any]:
    """Read records `start..end-1` of a file with a single forward scan."""
    with FileScanner(path) as scanner:
        return scanner.read(start, end)


def read_ranges(path: str | os.PathLike, ranges: list[tuple[int, int]]) -> list[Any]:
    """Read several ascending, disjoint ranges of one file in one scan."""
    out: list[Any] = []
    with FileScanner(path) as scanner:
        for start, end in ranges:
            out.extend(scanner.read(start, end))
    return out


def write_jsonl(path: str | os.PathLike, records: Iterator[Any] | list[Any]) -> int:
    """Write records as one JSON object per line; returns the record count."""
    spath = str(path)
    Path(spath).parent.mkdir(parents=True, exist_ok=True)
    if spath.endswith(ZST_SUFFIX):
        fh = open_zstd(spath, "wb")
    elif spath.endswith(JSONL_SUFFIX):
        fh = open(spath, "wb")
    else:
        raise DataReadError(f"unsupported data file format: {spath}")
    n = 0
    with fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False).encode("utf-8") + b"\n")
            n += 1
    return n
