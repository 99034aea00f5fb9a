"""First-order descriptor head: clipping, GeM pooling, whitening, l2 normalisation.

Functional ops work on channel-last tensors, a feature map being ``(..., h, w, d)``.
"""

import torch
import torch.nn as nn

from .errors import ValidationError

CLIP_EPS = 1e-6
P_INIT = 3.0
P_MIN = 1.0
P_MAX = 100.0


def _check_finite(x, what):
    if not torch.isfinite(x).all():
        raise ValidationError(f"{what} contains non-finite values")


def clip_features(f, eps=CLIP_EPS):
    if eps <= 0:
        raise ValidationError(f"clip eps must be positive, got {eps}")
    _check_finite(f, "feature map")
    return torch.clamp(f, min=eps)


def gem_pool(f, p, eps=CLIP_EPS):
    """Generalised-mean pool over the two spatial axes of ``f`` (..., h, w, d).

    The map is clipped at ``eps`` first. The power mean is evaluated relative
    to the per-channel maximum, which is exact (GeM is 1-homogeneous) and keeps
    large ``p`` from underflowing to zero.
    """
    if f.dim() < 3 or f.shape[-3] * f.shape[-2] == 0 or f.shape[-1] == 0:
        raise ValidationError(f"expected a non-empty (..., h, w, d) map, got shape {tuple(f.shape)}")
    p = torch.as_tensor(p, dtype=f.dtype, device=f.device)
    if not torch.isfinite(p).all() or (p < P_MIN).any():
        raise ValidationError(f"GeM exponent must be >= {P_MIN}, got {p.tolist()}")
    f = clip_features(f, eps)
    scale = f.amax(dim=(-3, -2), keepdim=True).detach()
    mean = (f / scale).pow(p).mean(dim=(-3, -2))
    return scale.squeeze(-2).squeeze(-2) * mean.pow(1.0 / p)


def l2_normalize(v, dim=-1):
    norm = torch.linalg.vector_norm(v, dim=dim, keepdim=True)
    if (norm == 0).any():
        raise ValidationError("cannot l2-normalise a zero vector")
    return v / norm


def whiten(v, weight, bias):
    if v.shape[-1] != weight.shape[1]:
        raise ValidationError(
            f"whitening expects input dim {weight.shape[1]}, got {v.shape[-1]}")
    return v @ weight.transpose(0, 1) + bias


class GeM(nn.Module):
    """Learnable-exponent GeM over a channel-last map; one ``p`` shared by all channels."""

    def __init__(self, p=P_INIT, eps=CLIP_EPS):
        super().__init__()
        if p < P_MIN:
            raise ValidationError(f"GeM exponent must be >= {P_MIN}, got {p}")
        self.p = nn.Parameter(torch.tensor([float(p)]))
        self.eps = eps

    def forward(self, f):
        return gem_pool(f, self.p, self.eps)

    @torch.no_grad()
    def project(self):
        self.p.clamp_(min=P_MIN)

    def extra_repr(self):
        return f"p={self.p.item():.4f}, eps={self.eps}"


class Whitening(nn.Module):
    """Bias-enabled affine projection, identity-initialised."""

    def __init__(self, d_in, d_out=None):
        super().__init__()
        d_out = d_in if d_out is None else d_out
        self.weight = nn.Parameter(torch.eye(d_out, d_in))
        self.bias = nn.Parameter(torch.zeros(d_out))

    def forward(self, v):
        return whiten(v, self.weight, self.bias)
