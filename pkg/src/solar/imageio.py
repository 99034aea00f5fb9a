"""Binary PGM/PPM (P5/P6) image IO with a pluggable decoder registry."""

import os

import numpy as np

from .errors import ValidationError
from .fileio import atomic_write

_DECODERS = {}


def register_decoder(suffix, fn):
    """Route files ending in ``suffix`` through ``fn(path) -> (H, W, c) float array``."""
    _DECODERS[suffix.lower()] = fn


def _header_tokens(data):
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValidationError("truncated PNM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1


def decode_pnm(data):
    tokens, offset = _header_tokens(data)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ValidationError(f"unsupported PNM magic {magic!r}; only binary P5/P6")
    width, height, maxval = (int(t) for t in tokens[1:])
    if not 0 < maxval < 65536:
        raise ValidationError(f"bad PNM maxval {maxval}")
    channels = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    if len(data) - offset < count * dtype.itemsize:
        raise ValidationError("truncated PNM pixel data")
    pixels = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    return pixels.reshape(height, width, channels).astype(np.float64) / maxval


def encode_pnm(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    if image.shape[2] not in (1, 3):
        raise ValidationError(f"PNM images need 1 or 3 channels, got {image.shape[2]}")
    magic = b"P5" if image.shape[2] == 1 else b"P6"
    h, w = image.shape[:2]
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    return b"%s\n%d %d\n255\n" % (magic, w, h) + pixels.tobytes()


def read_image(path):
    suffix = os.path.splitext(os.fspath(path))[1].lower()
    if suffix in _DECODERS:
        return _DECODERS[suffix](path)
    with open(path, "rb") as fh:
        return decode_pnm(fh.read())


def write_image(path, image):
    atomic_write(path, encode_pnm(image))
