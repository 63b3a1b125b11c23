"""Binary container shared by weight files and adapter files.

Layout (all integers little-endian)::

    magic        8 bytes      b"PARAWGT1" (weights) or b"PARAADP1" (adapters)
    version      u16
    reserved     u16          zero
    header_len   u32
    header       header_len bytes of UTF-8 JSON (config block / adapter metadata)
    n_arrays     u32
    n_arrays times:
        name_len u16, name (UTF-8)
        dtype    u8           1 = float32, 2 = float64
        ndim     u8
        dims     u32 * ndim
        data     prod(dims) scalars, little-endian, row-major
    crc32        u32          over every preceding byte

Array order is the writer's insertion order and is preserved on read.
"""
from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .errors import BadMagicError, ChecksumError, FormatError, TruncatedError, VersionMismatchError

WEIGHTS_MAGIC = b"PARAWGT1"
ADAPTER_MAGIC = b"PARAADP1"

_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def pack(magic: bytes, version: int, header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    parts = [magic, struct.pack("<HH", version, 0)]
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts.append(struct.pack("<I", len(hdr)))
    parts.append(hdr)
    parts.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise FormatError(f"array {name!r}: unsupported dtype {arr.dtype}")
        nm = name.encode()
        parts.append(struct.pack("<H", len(nm)))
        parts.append(nm)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"payload truncated at byte {self.pos} (needed {n} more, {len(self.buf) - self.pos} left)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def unpack(buf: bytes, magic: bytes, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    """Decode a container; raises a `FormatError` subclass without partial results."""
    buf = bytes(buf)
    if len(buf) < len(magic):
        raise TruncatedError("payload shorter than the magic number")
    if buf[:len(magic)] != magic:
        raise BadMagicError(f"bad magic {buf[:len(magic)]!r}, expected {magic!r}")
    r = _Reader(buf)
    r.take(len(magic))
    found_version, _ = r.unpack("<HH")
    if found_version != version:
        raise VersionMismatchError(f"format version {found_version}, reader supports {version}")
    if len(buf) < r.pos + 4:
        raise TruncatedError("payload truncated in header")
    if len(buf) >= 4:
        (crc,) = struct.unpack("<I", buf[-4:])
        if zlib.crc32(buf[:-4]) != crc:
            # distinguish a cut-off file from a corrupted one where possible
            _probe_truncation(buf, r.pos)
            raise ChecksumError("checksum mismatch; file is corrupted")
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}") from None
    (n,) = r.unpack("<I")
    arrays = {}
    for _ in range(n):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        code, ndim = r.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise FormatError(f"array {name!r}: unknown dtype code {code}")
        dims = r.unpack(f"<{ndim}I") if ndim else ()
        dt = _CODE_DTYPES[code]
        count = int(np.prod(dims)) if dims else 1
        data = r.take(count * dt.itemsize)
        arrays[name] = np.frombuffer(data, dtype=dt).reshape(dims).astype(dt.newbyteorder("="), copy=True)
    if r.pos != len(buf) - 4:
        raise FormatError(f"{len(buf) - 4 - r.pos} trailing bytes after arrays")
    return header, arrays


def _probe_truncation(buf: bytes, pos: int) -> None:
    r = _Reader(buf)
    r.pos = pos
    try:
        (hlen,) = r.unpack("<I")
        r.take(hlen)
        (n,) = r.unpack("<I")
        for _ in range(n):
            (nlen,) = r.unpack("<H")
            r.take(nlen)
            code, ndim = r.unpack("<BB")
            dims = r.unpack(f"<{ndim}I") if ndim else ()
            dt = _CODE_DTYPES.get(code, np.dtype("<f8"))
            r.take(int(np.prod(dims)) * dt.itemsize if dims else dt.itemsize)
        r.take(4)
    except TruncatedError:
        raise
    except Exception:
        return
