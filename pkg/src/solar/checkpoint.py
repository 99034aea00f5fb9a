"""Single-file model checkpoints.

Layout (little-endian)::

    magic        8 bytes  b"SOLRCKPT"
    version      u32      1
    header_len   u32
    header       UTF-8 JSON text: {"backbone": <BackboneSpec>, "meta": {...}}
    n_tensors    u32
    n_tensors x { name_len u16, name UTF-8, ndim u8, ndim x u32 dims, float32 values }
"""

import json
import struct

import numpy as np
import torch

from .backbones import BackboneSpec, DescriptorModel
from .errors import StoreFormatError, ValidationError
from .fileio import atomic_write

MAGIC = b"SOLRCKPT"
VERSION = 1


def encode_container(header, tensors):
    raw_header = header.encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(raw_header)), raw_header,
             struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f4")
        raw = name.encode("utf-8")
        if arr.ndim > 255:
            raise ValidationError(f"tensor {name!r} has too many dimensions")
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    return b"".join(parts)


def decode_container(data):
    def need(pos, n, what):
        if pos + n > len(data):
            raise StoreFormatError(f"truncated {what}", pos)

    need(0, 16, "checkpoint header")
    if data[:8] != MAGIC:
        raise StoreFormatError(f"bad magic {data[:8]!r}", 0)
    version, header_len = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise StoreFormatError(f"unsupported checkpoint version {version}", 8)
    pos = 16
    need(pos, header_len, "header text")
    header = data[pos:pos + header_len].decode("utf-8")
    pos += header_len
    need(pos, 4, "tensor count")
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        start = pos
        need(pos, 2, "tensor name length")
        (n,) = struct.unpack_from("<H", data, pos)
        need(pos + 2, n + 1, "tensor name")
        name = data[pos + 2:pos + 2 + n].decode("utf-8")
        ndim = data[pos + 2 + n]
        pos += 3 + n
        need(pos, 4 * ndim, "tensor shape")
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        need(pos, 4 * size, f"tensor {name!r}")
        if name in tensors:
            raise StoreFormatError(f"duplicate tensor {name!r}", start)
        tensors[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
        pos += 4 * size
    if pos != len(data):
        raise StoreFormatError("trailing bytes after last tensor", pos)
    return header, tensors


def encode_checkpoint(model, meta=None, extra=None):
    header = json.dumps({"backbone": json.loads(model.spec.to_text()), "meta": meta or {}},
                        sort_keys=True)
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    for name, value in (extra or {}).items():
        tensors[f"extra/{name}"] = value
    return encode_container(header, tensors)


def save_checkpoint(path, model, meta=None, extra=None):
    atomic_write(path, encode_checkpoint(model, meta, extra))


def decode_checkpoint(data):
    """Return ``(model, meta, extra tensors)``; the model is float32."""
    header, tensors = decode_container(data)
    doc = json.loads(header)
    white = tensors.get("whitening.weight")
    model = DescriptorModel(BackboneSpec(**doc["backbone"]),
                            whiten_dim=None if white is None else white.shape[0])
    state = {k: torch.from_numpy(v) for k, v in tensors.items() if not k.startswith("extra/")}
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise StoreFormatError(f"tensors do not fit the stored backbone: {exc}", 16) from None
    extra = {k[len("extra/"):]: v for k, v in tensors.items() if k.startswith("extra/")}
    return model, doc.get("meta", {}), extra


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
