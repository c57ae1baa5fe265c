"""Binary container shared by model, adapter and dataset files.

Layout (all integers little-endian)::

    magic      8 bytes   b"ARTCRIT\\0"
    version    u32       FORMAT_VERSION
    meta_len   u32
    meta       meta_len bytes of UTF-8 JSON (model config and run metadata)
    n_blocks   u32
    n_blocks x block:
        name_len u16, name (UTF-8)
        dtype    u8        0 = float64, 1 = uint8
        ndim     u8
        dims     ndim x u32
        payload  prod(dims) * itemsize bytes, row-major
    digest     32 bytes  SHA-256 of everything above

Writes go to a temporary sibling and are renamed into place.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"ARTCRIT\x00"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("u1")}
_CODES = {np.dtype("<f8"): 0, np.dtype("u1"): 1}


def encode_container(meta: dict, blocks: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    mb = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts += [struct.pack("<I", len(mb)), mb, struct.pack("<I", len(blocks))]
    for name, arr in blocks.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            arr = arr.astype("<f8", copy=False)
        dt = _CODES.get(arr.dtype)
        if dt is None:
            raise FormatError(f"block {name!r}: unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<BB", dt, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("file is truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_container(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(buf) < len(MAGIC) + 4 + 32:
        raise FormatError("file is truncated")
    if buf[: len(MAGIC)] != MAGIC:
        raise FormatError("not an artcritic container (bad magic)")
    body, digest = buf[:-32], buf[-32:]
    r = _Reader(body)
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    if hashlib.sha256(body).digest() != digest:
        raise FormatError("checksum mismatch: file is truncated or corrupted")
    (mlen,) = r.unpack("<I")
    meta = json.loads(r.take(mlen).decode("utf-8"))
    (n,) = r.unpack("<I")
    blocks: dict[str, np.ndarray] = {}
    for _ in range(n):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        dt, ndim = r.unpack("<BB")
        if dt not in _DTYPES:
            raise FormatError(f"block {name!r}: unknown dtype code {dt}")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        dtype = _DTYPES[dt]
        count = int(np.prod(shape)) if shape else 1
        raw = r.take(count * dtype.itemsize)
        blocks[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    if r.pos != len(body):
        raise FormatError("trailing bytes after the last block")
    return meta, blocks


def write_container(path: str | Path, meta: dict, blocks: dict[str, np.ndarray]) -> None:
    path = Path(path)
    data = encode_container(meta, blocks)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode_container(Path(path).read_bytes())
