"""Little-endian tensor-record container shared by checkpoints and datasets.

Layout::

    b"DSTA"  u32 version
    u32 header length, UTF-8 header text
    u32 record count
    per record: u32 name length, name bytes, u8 dtype code, u32 rank,
                u64 dims[rank], little-endian payload
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"DSTA"
VERSION = 1

DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i8"): 2,
    np.dtype("u1"): 3,
}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


class FormatError(ValueError):
    pass


class VersionError(FormatError):
    """Well-formed container written by an incompatible format version."""


def encode(header: str, tensors) -> bytes:
    """Serialize ``header`` and an ordered ``[(name, array), ...]``."""
    parts = [MAGIC, struct.pack("<I", VERSION)]
    hb = header.encode("utf-8")
    parts += [struct.pack("<I", len(hb)), hb, struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|",) else arr.dtype
        if dt not in DTYPE_CODES:
            raise FormatError(f"unsupported dtype {arr.dtype} for {name}")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BI", DTYPE_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError("truncated payload")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(raw: bytes) -> tuple[str, list[tuple[str, np.ndarray]]]:
    """Parse a container; raises :class:`FormatError` on any inconsistency."""
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise FormatError("bad magic bytes")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionError(f"unsupported format version {version}")
    (hlen,) = r.unpack("<I")
    header = r.take(hlen).decode("utf-8")
    (count,) = r.unpack("<I")
    tensors = []
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        code, rank = r.unpack("<BI")
        if code not in CODE_DTYPES:
            raise FormatError(f"unknown dtype code {code} for {name}")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        dt = CODE_DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(dims).copy()
        tensors.append((name, arr))
    if r.pos != len(raw):
        raise FormatError("trailing bytes after last record")
    return header, tensors


def write(path, header: str, tensors):
    data = encode(header, tensors)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def read(path):
    with open(path, "rb") as fh:
        return decode(fh.read())
