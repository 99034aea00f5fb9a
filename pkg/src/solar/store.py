"""Binary descriptor store.

Layout (all integers little-endian)::

    magic   4 bytes  b"SOLR"
    version u32      1
    dim     u32
    count   u64
    count x { name_len u16, name UTF-8, dim x float32 }
"""

import struct

import numpy as np

from .errors import StoreFormatError, ValidationError
from .fileio import atomic_write, locked

MAGIC = b"SOLR"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")
_NAME_LEN = struct.Struct("<H")
UNIT_TOL = 1e-5


def encode_store(entries):
    entries = [(str(name), np.asarray(vec, dtype="<f4")) for name, vec in entries]
    dims = {vec.shape for _, vec in entries}
    if len(dims) > 1 or any(len(d) != 1 for d in dims):
        raise ValidationError(f"store entries must be 1-d vectors of one length, got shapes {dims}")
    dim = dims.pop()[0] if dims else 0
    names = [name for name, _ in entries]
    if len(set(names)) != len(names):
        raise ValidationError("store entry names must be unique")
    parts = [_HEADER.pack(MAGIC, VERSION, dim, len(entries))]
    for name, vec in entries:
        norm = float(np.linalg.norm(vec.astype(np.float64)))
        if abs(norm - 1.0) > UNIT_TOL:
            raise ValidationError(f"descriptor {name!r} is not unit-norm (norm={norm})")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValidationError(f"entry name too long: {name[:40]}...")
        parts += [_NAME_LEN.pack(len(raw)), raw, vec.tobytes()]
    return b"".join(parts)


def decode_store(data):
    if len(data) < _HEADER.size:
        raise StoreFormatError("truncated store header", len(data))
    magic, version, dim, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise StoreFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise StoreFormatError(f"unsupported store version {version}", 4)
    entries, pos, seen = [], _HEADER.size, set()
    for _ in range(count):
        if pos + _NAME_LEN.size > len(data):
            raise StoreFormatError("truncated record header", pos)
        (n,) = _NAME_LEN.unpack_from(data, pos)
        end = pos + _NAME_LEN.size + n + 4 * dim
        if end > len(data):
            raise StoreFormatError("truncated record", pos)
        try:
            name = data[pos + 2:pos + 2 + n].decode("utf-8")
        except UnicodeDecodeError:
            raise StoreFormatError("record name is not UTF-8", pos + 2) from None
        if name in seen:
            raise StoreFormatError(f"duplicate entry name {name!r}", pos)
        seen.add(name)
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=pos + 2 + n).copy()
        entries.append((name, vec))
        pos = end
    if pos != len(data):
        raise StoreFormatError(f"{len(data) - pos} trailing bytes after {count} records", pos)
    return entries


def write_store(path, entries):
    data = encode_store(entries)
    with locked(path):
        atomic_write(path, data)


def read_store(path):
    with open(path, "rb") as fh:
        return decode_store(fh.read())


def store_matrix(entries):
    """Split entries into ``(names, float64 matrix)``."""
    names = [n for n, _ in entries]
    if not entries:
        return names, np.zeros((0, 0))
    return names, np.stack([v for _, v in entries]).astype(np.float64)
