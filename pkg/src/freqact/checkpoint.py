"""Single-file checkpoint container.

Byte layout (all integers little-endian)::

    offset 0   4 bytes   magic b"FQAC"
           4   u32       format version (FORMAT_VERSION)
           8   u32       number of sections
          12   sections, back to back

    section:
        u16        name length n
        n bytes    name, UTF-8
        u8         kind: 0 = UTF-8 text, 1 = JSON object, 2 = float64 array
        u8         ndim (0 unless kind == 2)
        u64 * ndim array shape
        u64        payload length in bytes
        u32        CRC-32 of the payload
        payload    text bytes, JSON bytes, or C-order little-endian float64

Sections written by training: ``config`` (text echo of the effective
config), ``meta`` (JSON: epoch, step, dimensions, RNG state), then every
array sorted by name: ``param/<name>``, ``adam_m/<name>``, ``adam_v/<name>``
and ``norm/<name>``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"FQAC"
FORMAT_VERSION = 1
TEXT, JSON, ARRAY = 0, 1, 2


def encode(sections):
    """``sections`` is an ordered list of (name, value) with str, dict or ndarray values."""
    out = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(sections))]
    for name, value in sections:
        raw_name = name.encode("utf-8")
        if isinstance(value, str):
            kind, shape, payload = TEXT, (), value.encode("utf-8")
        elif isinstance(value, dict):
            kind, shape, payload = JSON, (), json.dumps(value, sort_keys=True).encode("utf-8")
        else:
            arr = np.asarray(value, dtype="<f8")
            kind, shape, payload = ARRAY, arr.shape, arr.tobytes(order="C")
        out.append(struct.pack("<H", len(raw_name)) + raw_name)
        out.append(struct.pack("<BB", kind, len(shape)) + b"".join(struct.pack("<Q", s) for s in shape))
        out.append(struct.pack("<QI", len(payload), zlib.crc32(payload)) + payload)
    return b"".join(out)


class _Reader:
    def __init__(self, data, source):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise DataError(f"{self.source}: truncated {what} at offset {self.pos} "
                            f"(need {n} bytes, {len(self.data) - self.pos} left)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(data, source="<bytes>"):
    """Parse checkpoint bytes into an ordered dict of name -> value."""
    r = _Reader(data, source)
    if r.take(4, "magic") != MAGIC:
        raise DataError(f"{source}: not a checkpoint (bad magic at offset 0)")
    version, count = r.unpack("<II", "header")
    if version != FORMAT_VERSION:
        raise DataError(f"{source}: checkpoint format version {version} at offset 4, expected {FORMAT_VERSION}")
    out = {}
    for _ in range(count):
        start = r.pos
        (n,) = r.unpack("<H", "section name length")
        try:
            name = r.take(n, "section name").decode("utf-8")
        except UnicodeDecodeError:
            raise DataError(f"{source}: undecodable section name at offset {start}") from None
        kind, ndim = r.unpack("<BB", "section kind")
        if kind not in (TEXT, JSON, ARRAY):
            raise DataError(f"{source}: unknown section kind {kind} at offset {r.pos - 2}")
        shape = tuple(r.unpack("<Q", "array shape")[0] for _ in range(ndim))
        length, crc = r.unpack("<QI", "payload header")
        payload_at = r.pos
        payload = r.take(length, f"payload of {name!r}")
        if zlib.crc32(payload) != crc:
            raise DataError(f"{source}: checksum mismatch in section {name!r} (payload at offset {payload_at})")
        try:
            if kind == TEXT:
                value = payload.decode("utf-8")
            elif kind == JSON:
                value = json.loads(payload.decode("utf-8"))
            else:
                if length != 8 * int(np.prod(shape, dtype=np.int64)):
                    raise ValueError(f"payload of {length} bytes does not match shape {shape}")
                value = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
        except ValueError as exc:
            raise DataError(f"{source}: bad section {name!r} at offset {start}: {exc}") from None
        out[name] = value
    if r.pos != len(data):
        raise DataError(f"{source}: {len(data) - r.pos} trailing bytes at offset {r.pos}")
    return out


def atomic_write(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, sections):
    atomic_write(path, encode(sections))


def load(path):
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    return decode(data, source=str(path))
