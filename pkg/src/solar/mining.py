"""Anchor sampling and class-distinct hard-negative mining."""

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ValidationError

UNIT_TOL = 1e-6


@dataclass(frozen=True)
class MiningConfig:
    anchors_per_epoch: int = 2000
    negatives_per_anchor: int = 5
    pool_size: int = 20000
    seed: int = 0

    def __post_init__(self):
        if min(self.anchors_per_epoch, self.negatives_per_anchor, self.pool_size) < 1:
            raise ValidationError(f"mining sizes must be positive, got {self}")


DESK_MINING = MiningConfig(anchors_per_epoch=64, negatives_per_anchor=5, pool_size=512)


@dataclass
class LabeledPool:
    descriptors: np.ndarray
    class_ids: np.ndarray
    item_ids: list

    def __post_init__(self):
        self.descriptors = np.asarray(self.descriptors, dtype=np.float64)
        self.class_ids = np.asarray(self.class_ids)
        self.item_ids = [str(i) for i in self.item_ids]
        n = self.descriptors.shape[0]
        if len(self.class_ids) != n or len(self.item_ids) != n:
            raise ValidationError("pool descriptors, class ids and item ids differ in length")
        if len(set(self.item_ids)) != n:
            raise ValidationError("pool item ids are not unique")
        norms = np.linalg.norm(self.descriptors, axis=1)
        if n and np.abs(norms - 1).max() > UNIT_TOL:
            raise ValidationError(f"pool descriptors must be unit-norm (worst norm {norms[np.argmax(np.abs(norms - 1))]})")

    def __len__(self):
        return self.descriptors.shape[0]


class MinedTriplet(NamedTuple):
    anchor: int
    positive: int
    negative: int
    anchor_class: object
    negative_class: object


def epoch_rng(seed, epoch):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch)]))


def sample_anchors(labels, n_anchors, rng):
    """Draw ``(anchor, positive)`` index pairs; anchors without replacement.

    Items whose class has a single member can never be anchors. If fewer
    eligible anchors exist than requested, all are returned with a warning.
    """
    labels = np.asarray(labels)
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    members = {}
    for idx, c in enumerate(labels.tolist()):
        members.setdefault(c, []).append(idx)
    eligible = np.array([i for i, c in enumerate(labels.tolist()) if len(members[c]) >= 2], dtype=int)
    if len(eligible) < n_anchors:
        warnings.warn(f"requested {n_anchors} anchors but only {len(eligible)} are eligible; "
                      "sampling all of them", stacklevel=2)
    chosen = rng.permutation(eligible)[:n_anchors]
    pairs = []
    for a in chosen.tolist():
        others = [i for i in members[labels[a].item()] if i != a]
        pairs.append((a, others[int(rng.integers(len(others)))]))
    return pairs


def mine_hard_negatives(anchor, anchor_class, pool, k):
    """Indices of the ``k`` nearest pool items from ``k`` distinct non-anchor classes.

    Distance is Euclidean; ties break on ascending item id.
    """
    anchor = np.asarray(anchor, dtype=np.float64)
    dist = np.sqrt(((pool.descriptors - anchor) ** 2).sum(axis=1))
    eligible = np.flatnonzero(pool.class_ids != anchor_class)
    n_classes = len(set(pool.class_ids[eligible].tolist()))
    if n_classes < k:
        raise ValidationError(
            f"need {k} negatives from distinct classes but the pool offers only {n_classes} "
            f"classes other than {anchor_class!r} (short by {k - n_classes})")
    ids = np.array(pool.item_ids)[eligible]
    order = eligible[np.lexsort((ids, dist[eligible]))]
    picked, seen = [], set()
    for i in order.tolist():
        c = pool.class_ids[i].item()
        if c in seen:
            continue
        seen.add(c)
        picked.append(i)
        if len(picked) == k:
            break
    return picked


def build_triplets(anchor, positive, negatives, anchor_class, negative_classes):
    if len(negatives) == 0:
        raise ValidationError("cannot build triplets without negatives")
    return [MinedTriplet(anchor, positive, n, anchor_class, c)
            for n, c in zip(negatives, negative_classes)]


def mine_epoch(descriptors, labels, ids, cfg, epoch, candidates=None, anchor_candidates=None):
    """Plan one epoch of triplets over dataset indices.

    ``candidates`` restricts the negative pool and, unless ``anchor_candidates``
    is given, the anchors too (e.g. to the training classes). The pool is
    re-drawn each epoch from ``(cfg.seed, epoch)``. Returns a list with one
    group of ``k`` :class:`MinedTriplet` per anchor.
    """
    labels = np.asarray(labels)
    candidates = np.arange(len(labels)) if candidates is None else np.asarray(candidates)
    anchors = candidates if anchor_candidates is None else np.asarray(anchor_candidates)
    rng = epoch_rng(cfg.seed, epoch)
    pool_idx = np.sort(rng.permutation(candidates)[:cfg.pool_size])
    pool = LabeledPool(np.asarray(descriptors)[pool_idx], labels[pool_idx],
                       [ids[i] for i in pool_idx.tolist()])
    pairs = sample_anchors(labels[anchors], cfg.anchors_per_epoch, rng)
    groups = []
    for a_local, p_local in pairs:
        a, p = int(anchors[a_local]), int(anchors[p_local])
        neg_local = mine_hard_negatives(descriptors[a], labels[a], pool, cfg.negatives_per_anchor)
        negs = [int(pool_idx[j]) for j in neg_local]
        groups.append(build_triplets(a, p, negs, labels[a].item(), [labels[n].item() for n in negs]))
    return groups
