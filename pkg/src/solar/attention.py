"""Second-order attention (SOA) block.

Locations of an ``(h, w, d)`` map are flattened row-major, location ``(r, c)``
becoming index ``r * w + c``. All projections are bias-free 1x1 linear maps.
"""

import math

import torch
import torch.nn as nn

from .errors import ValidationError

DEFAULT_REDUCTION = 2


class SecondOrderAttention(nn.Module):
    """Residual non-local block ``f + psi(z @ v)`` with ``z = softmax(alpha * q^T k)``.

    ``wpsi`` starts at zero, so a fresh block is an exact identity.
    """

    def __init__(self, d, reduction=DEFAULT_REDUCTION, seed=0, alpha=None):
        super().__init__()
        if reduction < 1 or d % reduction:
            raise ValidationError(f"channel count {d} is not divisible by reduction {reduction}")
        d_qk = d // reduction
        gen = torch.Generator().manual_seed(int(seed))
        std = math.sqrt(2.0 / d)
        self.wq = nn.Parameter(torch.randn(d_qk, d, generator=gen) * std)
        self.wk = nn.Parameter(torch.randn(d_qk, d, generator=gen) * std)
        self.wv = nn.Parameter(torch.randn(d, d, generator=gen) * std)
        self.wpsi = nn.Parameter(torch.zeros(d, d))
        alpha = 1.0 / math.sqrt(d_qk) if alpha is None else float(alpha)
        self.register_buffer("alpha", torch.tensor(alpha))

    @property
    def channels(self):
        return self.wv.shape[0]

    @property
    def qk_channels(self):
        return self.wq.shape[0]

    def forward(self, f):
        return soa_forward(f, self)

    def extra_repr(self):
        return f"d={self.channels}, d_qk={self.qk_channels}, alpha={self.alpha.item():.4g}"


def init_soa(d, reduction=DEFAULT_REDUCTION, seed=0):
    return SecondOrderAttention(d, reduction=reduction, seed=seed)


def _flatten(f):
    *lead, h, w, d = f.shape
    return f.reshape(*lead, h * w, d)


def project_heads(f, params):
    """Return ``q, k`` as ``(..., d_qk, hw)`` and ``v`` as ``(..., hw, d)``."""
    if f.dim() < 3:
        raise ValidationError(f"expected an (..., h, w, d) map, got shape {tuple(f.shape)}")
    if f.shape[-1] != params.channels:
        raise ValidationError(
            f"feature map has {f.shape[-1]} channels, SOA block expects {params.channels}")
    x = _flatten(f)
    q = (x @ params.wq.transpose(0, 1)).transpose(-1, -2)
    k = (x @ params.wk.transpose(0, 1)).transpose(-1, -2)
    v = x @ params.wv.transpose(0, 1)
    return q, k, v


def attention_map(q, k, alpha):
    """Row-stochastic ``(..., hw, hw)`` map; row ``i`` is a softmax over key index ``j``."""
    if q.shape != k.shape:
        raise ValidationError(f"query/key shape mismatch: {tuple(q.shape)} vs {tuple(k.shape)}")
    logits = alpha * (q.transpose(-1, -2) @ k)
    if not torch.isfinite(logits).all():
        raise ValidationError("attention logits are not finite")
    e = torch.exp(logits - logits.amax(dim=-1, keepdim=True))
    return e / e.sum(dim=-1, keepdim=True)


def soa_forward(f, params):
    """Apply the block to ``f`` (..., h, w, d); returns ``(f_so, z)``."""
    q, k, v = project_heads(f, params)
    z = attention_map(q, k, params.alpha)
    mixed = (z @ v) @ params.wpsi.transpose(0, 1)
    f_so = f + mixed.reshape(f.shape)
    return f_so, z
