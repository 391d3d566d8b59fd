"""Streaming zstd encode/decode over the system libzstd via ctypes.

No Python zstd binding is assumed; only `libzstd.so.1` (>= 1.4) with the
standard streaming API. The module exposes binary file objects compatible
with `io.BufferedReader`/`io.BufferedWriter`, so callers can treat a
`.jsonl.zst` file exactly like an uncompressed one.
"""

from __future__ import annotations

import ctypes
import ctypes.util
import io
from typing import BinaryIO

from .errors import DataReadError


class _InBuffer(ctypes.Structure):
    _fields_ = [
        ("src", ctypes.c_void_p),
        ("size", ctypes.c_size_t),
        ("pos", ctypes.c_size_t),
    ]


class _OutBuffer(ctypes.Structure):
    _fields_ = [
        ("dst", ctypes.c_void_p),
        ("size", ctypes.c_size_t),
        ("pos", ctypes.c_size_t),
    ]


_ZSTD_E_CONTINUE = 0
_ZSTD_E_END = 2


def _load_libzstd() -> ctypes.CDLL:
    name = ctypes.util.find_library("zstd") or "libzstd.so.1"
    try:
        lib = ctypes.CDLL(name)
    except OSError as exc:  # pragma: no cover - environment without libzstd
        raise DataReadError(f"libzstd not available: {exc}") from exc
    lib.ZSTD_isError.restype = ctypes.c_uint
    lib.ZSTD_isError.argtypes = [ctypes.c_size_t]
    lib.ZSTD_getErrorName.restype = ctypes.c_char_p
    lib.ZSTD_getErrorName.argtypes = [ctypes.c_size_t]
    lib.ZSTD_createCCtx.restype = ctypes.c_void_p
    lib.ZSTD_freeCCtx.argtypes = [ctypes.c_void_p]
    lib.ZSTD_createDCtx.restype = ctypes.c_void_p
    lib.ZSTD_freeDCtx.argtypes = [ctypes.c_void_p]
    lib.ZSTD_compressStream2.restype = ctypes.c_size_t
    lib.ZSTD_compressStream2.argtypes = [
        ctypes.c_void_p,
        ctypes.POINTER(_OutBuffer),
        ctypes.POINTER(_InBuffer),
        ctypes.c_int,
    ]
    lib.ZSTD_decompressStream.restype = ctypes.c_size_t
    lib.ZSTD_decompressStream.argtypes = [
        ctypes.c_void_p,
        ctypes.POINTER(_OutBuffer),
        ctypes.POINTER(_InBuffer),
    ]
    lib.ZSTD_CCtx_setParameter.restype = ctypes.c_size_t
    lib.ZSTD_CCtx_setParameter.argtypes = [ctypes.c_void_p, ctypes.c_int, ctypes.c_int]
    for sym in ("ZSTD_CStreamInSize", "ZSTD_CStreamOutSize", "ZSTD_DStreamInSize", "ZSTD_DStreamOutSize"):
        fn = getattr(lib, sym)
        fn.restype = ctypes.c_size_t
        fn.argtypes = []
    return lib


_LIB: ctypes.CDLL | None = None


def _lib() -> ctypes.CDLL:
    global _LIB
    if _LIB is None:
        _LIB = _load_libzstd()
    return _LIB


def _check(code: int) -> int:
    lib = _lib()
    if lib.ZSTD_isError(code):
        raise DataReadError(f"zstd error: {lib.ZSTD_getErrorName(code).decode()}")
    return code


class ZstdWriter(io.RawIOBase):
    """Raw binary writer producing one zstd frame over an underlying file."""

    def __init__(self, raw: BinaryIO, level: int = 3):
        self._raw = raw
        lib = _lib()
        self._cctx = lib.ZSTD_createCCtx()
        if not self._cctx:
            raise DataReadError("zstd: failed to create compression context")
        # 100 = ZSTD_c_compressionLevel
        lib.ZSTD_CCtx_setParameter(self._cctx, 100, level)
        self._out_size = lib.ZSTD_CStreamOutSize()
        self._out_buf = ctypes.create_string_buffer(self._out_size)

    def writable(self) -> bool:
        return True

    def _pump(self, data: bytes, end_op: int) -> None:
        lib = _lib()
        src = ctypes.create_string_buffer(data, len(data)) if data else None
        inb = _InBuffer(ctypes.cast(src, ctypes.c_void_p) if src else None, len(data), 0)
        while True:
            outb = _OutBuffer(ctypes.cast(self._out_buf, ctypes.c_void_p), self._out_size, 0)
            remaining = _check(
                lib.ZSTD_compressStream2(self._cctx, ctypes.byref(outb), ctypes.byref(inb), end_op)
            )
            if outb.pos:
                self._raw.write(self._out_buf.raw[: outb.pos])
            if end_op == _ZSTD_E_END:
                if remaining == 0:
                    break
            elif inb.pos >= inb.size:
                break

    def write(self, data) -> int:
        data = bytes(data)
        if data:
            self._pump(data, _ZSTD_E_CONTINUE)
        return len(data)

    def close(self) -> None:
        if not self.closed:
            try:
                self._pump(b"", _ZSTD_E_END)
                self._raw.flush()
                self._raw.close()
            finally:
                _lib().ZSTD_freeCCtx(self._cctx)
                self._cctx = None
        super().close()


class ZstdReader(io.RawIOBase):
    """Raw binary reader streaming decompressed bytes from an underlying file."""

    def __init__(self, raw: BinaryIO):
        self._raw = raw
        lib = _lib()
        self._dctx = lib.ZSTD_createDCtx()
        if not self._dctx:
            raise DataReadError("zstd: failed to create decompression context")
        self._in_size = lib.ZSTD_DStreamInSize()
        self._in_data = b""
        self._in_pos = 0
        self._eof = False

    def readable(self) -> bool:
        return True

    def readinto(self, b) -> int:
        if self._eof:
            return 0
        lib = _lib()
        out_buf = ctypes.create_string_buffer(len(b))
        outb = _OutBuffer(ctypes.cast(out_buf, ctypes.c_void_p), len(b), 0)
        while outb.pos == 0:
            if self._in_pos >= len(self._in_data):
                self._in_data = self._raw.read(self._in_size)
                self._in_pos = 0
                if not self._in_data:
                    self._eof = True
                    break
            chunk = self._in_data[self._in_pos :]
            src = ctypes.create_string_buffer(chunk, len(chunk))
            inb = _InBuffer(ctypes.cast(src, ctypes.c_void_p), len(chunk), 0)
            _check(lib.ZSTD_decompressStream(self._dctx, ctypes.byref(outb), ctypes.byref(inb)))
            self._in_pos += inb.pos
            if inb.pos == 0 and outb.pos == 0:
                raise DataReadError("zstd: truncated or corrupt stream")
        b[: outb.pos] = out_buf.raw[: outb.pos]
        return outb.pos

    def close(self) -> None:
        if not self.closed:
            try:
                self._raw.close()
            finally:
                _lib().ZSTD_freeDCtx(self._dctx)
                self._dctx = None
        super().close()


def open_zstd(path, mode: str = "rb", level: int = 3):
    """Open a zstd-compressed file for buffered binary reading or writing."""
    if mode == "rb":
        return io.BufferedReader(ZstdReader(open(path, "rb")))
    if mode == "wb":
        return io.BufferedWriter(ZstdWriter(open(path, "wb"), level=level))
    raise ValueError(f"unsupported mode {mode!r}")


def compress_file(src_path, dst_path, level: int = 3) -> None:
    """Compress an existing file into a single zstd frame."""
    with open(src_path, "rb") as src, open_zstd(dst_path, "wb", level=level) as dst:
        while True:
            block = src.read(1 << 20)
            if not block:
                break
            dst.write(block)
