"""First-order triplet loss, second-order similarity loss and their combination.

Every loss accepts either a list of :class:`Triplet` or an ``(anchors,
positives, negatives)`` tuple of ``(T, d)`` tensors. Distances are squared
Euclidean throughout.
"""

from dataclasses import dataclass
from typing import Any

import torch

from .errors import ValidationError

MARGIN = 1.25
LAMBDA_SOS = 10.0
UNIT_TOL = 1e-6


@dataclass(frozen=True)
class Triplet:
    anchor: torch.Tensor
    positive: torch.Tensor
    negative: torch.Tensor
    anchor_class: Any
    negative_class: Any

    def __post_init__(self):
        if self.anchor_class == self.negative_class:
            raise ValidationError(f"negative shares the anchor class {self.anchor_class!r}")
        for name in ("anchor", "positive", "negative"):
            norm = torch.linalg.vector_norm(getattr(self, name).detach()).item()
            if abs(norm - 1.0) > UNIT_TOL:
                raise ValidationError(f"{name} descriptor is not unit-norm (norm={norm})")


@dataclass(frozen=True)
class LossConfig:
    margin: float = MARGIN
    lam: float = LAMBDA_SOS

    def __post_init__(self):
        if self.margin < 0 or self.lam < 0:
            raise ValidationError(f"margin and lambda must be non-negative, got {self}")


def _stack(triplets):
    if isinstance(triplets, tuple):
        a, p, n = triplets
    else:
        if len(triplets) == 0:
            raise ValidationError("loss needs at least one triplet")
        a = torch.stack([t.anchor for t in triplets])
        p = torch.stack([t.positive for t in triplets])
        n = torch.stack([t.negative for t in triplets])
    if a.shape[0] == 0:
        raise ValidationError("loss needs at least one triplet")
    if not (a.shape == p.shape == n.shape):
        raise ValidationError(f"triplet shape mismatch: {a.shape}, {p.shape}, {n.shape}")
    return a, p, n


def _sqdist(x, y):
    return (x - y).pow(2).sum(dim=-1)


def fos_loss(triplets, margin=MARGIN):
    a, p, n = _stack(triplets)
    # relu passes zero gradient at an exactly-zero hinge argument
    return torch.relu(_sqdist(a, p) - _sqdist(a, n) + margin).mean()


def sos_loss(triplets):
    """``(1/T) * sqrt(sum_t (|a-n|^2 - |p-n|^2)^2)``, normalised outside the root."""
    a, p, n = _stack(triplets)
    inner = _sqdist(a, n) - _sqdist(p, n)
    s = inner.pow(2).sum()
    # sqrt has no derivative at 0; use 0 there
    positive = s > 0
    root = torch.where(positive, torch.sqrt(torch.where(positive, s, torch.ones_like(s))),
                       torch.zeros_like(s))
    return root / a.shape[0]


def total_loss(triplets, cfg=LossConfig()):
    return fos_loss(triplets, cfg.margin) + cfg.lam * sos_loss(triplets)


def loss_terms(triplets, cfg=LossConfig()):
    """Return ``(total, fos, sos)`` computed from one stacking of the triplets."""
    stacked = _stack(triplets)
    fos = fos_loss(stacked, cfg.margin)
    sos = sos_loss(stacked)
    return fos + cfg.lam * sos, fos, sos
