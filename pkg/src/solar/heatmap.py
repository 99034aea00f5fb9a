"""Attention-row heatmaps: where a chosen location looks."""

from dataclasses import dataclass

import numpy as np
import torch

from .backbones import to_tensor
from .errors import ValidationError
from .imageio import encode_pnm
from .fileio import atomic_write


@dataclass(frozen=True)
class HeatmapRequest:
    image_id: str
    x: int
    y: int
    insertion: int


def _layer_name(model, insertion):
    for name, label, _ in model.backbone.layers():
        if label == insertion:
            return name
    raise ValidationError(f"backbone has no layer labelled {insertion}")


@torch.no_grad()
def attention_row(model, image, req):
    """Row of the attention matrix for the request's location.

    Returns ``(row as an (h, w) float64 array, (i, j), stride)``.
    """
    if str(req.insertion) not in model.soa:
        raise ValidationError(f"no SOA block at insertion {req.insertion}; model has "
                              f"{sorted(int(k) for k in model.soa) or 'none'}")
    x = to_tensor(image, model.dtype)
    height, width = x.shape[-2:]
    if not (0 <= req.x < width and 0 <= req.y < height):
        raise ValidationError(f"location ({req.x}, {req.y}) lies outside the {width}x{height} image")
    was_training = model.training
    model.eval()
    try:
        _, acts, attn = model.trace(x)
    finally:
        model.train(was_training)
    h, w = acts[_layer_name(model, req.insertion)].shape[-2:]
    stride = model.backbone.stride_at(req.insertion)
    i, j = min(req.y // stride, h - 1), min(req.x // stride, w - 1)
    row = attn[req.insertion][0, i * w + j].double().numpy().reshape(h, w)
    return row, (i, j), stride


def normalize_map(m):
    """Min-max scale to [0, 1]; a constant map becomes all zeros."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi <= lo:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def upscale(m, height, width, stride):
    """Nearest-neighbour upsampling consistent with the pixel-to-cell mapping."""
    rows = np.minimum(np.arange(height) // stride, m.shape[0] - 1)
    cols = np.minimum(np.arange(width) // stride, m.shape[1] - 1)
    return m[np.ix_(rows, cols)]


def render_heatmap(model, image, req):
    """Normalised heatmap at input resolution, plus the raw attention row."""
    row, _, stride = attention_row(model, image, req)
    height, width = np.shape(image)[:2]
    return upscale(normalize_map(row), height, width, stride), row


def export_attention_heatmap(model, image, req, path):
    """Write the heatmap as an 8-bit binary graymap; returns the raw row."""
    heat, row = render_heatmap(model, image, req)
    atomic_write(path, encode_pnm(heat))
    return row
