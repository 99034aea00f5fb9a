"""Retrieval and verification metrics, plus the GeM exponent sweep.

Rankings order the database by descending inner product with the query,
ties going to the smaller id. Junk items are dropped from a ranking before
any metric is computed.
"""

import json
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch

from .backbones import crop, extract_descriptors
from .errors import ValidationError

PROTOCOLS = ("easy", "medium", "hard")


@dataclass
class QueryGroundTruth:
    id: str
    bbox: list = None
    easy: list = field(default_factory=list)
    hard: list = field(default_factory=list)
    junk: list = field(default_factory=list)

    def __post_init__(self):
        self.id = str(self.id)
        self.easy, self.hard, self.junk = ([str(i) for i in ids] for ids in (self.easy, self.hard, self.junk))
        e, h, j = set(self.easy), set(self.hard), set(self.junk)
        if e & h or e & j or h & j:
            raise ValidationError(f"query {self.id}: easy/hard/junk lists overlap")


@dataclass
class RetrievalGroundTruth:
    queries: list

    def __getitem__(self, qid):
        for q in self.queries:
            if q.id == qid:
                return q
        raise KeyError(qid)

    @property
    def query_ids(self):
        return [q.id for q in self.queries]

    def to_json(self):
        return json.dumps({"queries": [
            {"id": q.id, "bbox": q.bbox, "easy": q.easy, "hard": q.hard, "junk": q.junk}
            for q in self.queries]}, indent=1)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        if "queries" not in doc:
            raise ValidationError('ground truth needs a top-level "queries" array')
        return cls([QueryGroundTruth(q["id"], q.get("bbox"), q.get("easy", []), q.get("hard", []),
                                     q.get("junk", [])) for q in doc["queries"]])


def load_ground_truth(path):
    with open(path) as fh:
        return RetrievalGroundTruth.from_json(fh.read())


class RankedResult(NamedTuple):
    query_id: str
    ranking: list


def rank_database(query_vecs, query_ids, db_vecs, db_ids):
    db_ids = [str(i) for i in db_ids]
    keys = np.array(db_ids)
    sims = np.asarray(query_vecs, dtype=np.float64) @ np.asarray(db_vecs, dtype=np.float64).T
    results = []
    for qid, row in zip(query_ids, np.atleast_2d(sims)):
        order = np.lexsort((keys, -row))
        results.append(RankedResult(str(qid), [db_ids[i] for i in order]))
    return results


def protocol_split(gt, protocol):
    """Return ``(positives, junk)`` id sets of one query under a protocol."""
    easy, hard, junk = set(gt.easy), set(gt.hard), set(gt.junk)
    if protocol == "easy":
        return easy, junk | hard
    if protocol == "medium":
        return easy | hard, junk
    if protocol == "hard":
        return hard, junk | easy
    raise ValidationError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")


def _filtered_hits(ranked, positives, junk):
    return np.array([r in positives for r in ranked if r not in junk], dtype=bool)


def average_precision(ranked, positives, junk=()):
    positives, junk = set(positives), set(junk)
    if not positives:
        raise ValidationError("average precision needs at least one positive")
    if positives & junk:
        raise ValidationError("positives and junk overlap")
    hits = _filtered_hits(ranked, positives, junk)
    ranks = np.flatnonzero(hits) + 1
    return float(np.sum(np.arange(1, len(ranks) + 1) / ranks) / len(positives))


def precision_at_k(ranked, positives, junk=(), k=10):
    positives, junk = set(positives), set(junk)
    hits = _filtered_hits(ranked, positives, junk)
    return float(hits[:k].sum() / min(k, len(positives)))


def _per_query(metric, results, gt, protocol):
    values = []
    for res in results:
        positives, junk = protocol_split(gt[res.query_id], protocol)
        if not positives:
            warnings.warn(f"query {res.query_id} has no positives under {protocol}; skipped",
                          stacklevel=3)
            continue
        values.append(metric(res.ranking, positives, junk))
    if not values:
        raise ValidationError(f"every query was skipped under the {protocol} protocol")
    return float(np.mean(values))


def mean_ap(results, gt, protocol="medium"):
    return _per_query(average_precision, results, gt, protocol)


def mp_at_k(results, gt, protocol="medium", k=10):
    return _per_query(lambda r, p, j: precision_at_k(r, p, j, k), results, gt, protocol)


@dataclass
class VerificationSet:
    positive: np.ndarray
    negative: np.ndarray

    def __post_init__(self):
        self.positive = np.asarray(self.positive, dtype=np.float64).ravel()
        self.negative = np.asarray(self.negative, dtype=np.float64).ravel()


def fpr_at_95(v, recall=95):
    """Fraction of negative pairs at or below the distance admitting ``recall``% of positives."""
    n = len(v.positive)
    if n < 20 or len(v.negative) == 0:
        raise ValidationError(f"need >= 20 positive and >= 1 negative pairs, got {n} and {len(v.negative)}")
    if not (np.isfinite(v.positive).all() and np.isfinite(v.negative).all()):
        raise ValidationError("pair distances must be finite")
    needed = -(-recall * n // 100)
    threshold = np.sort(v.positive)[needed - 1]
    return float(np.count_nonzero(v.negative <= threshold) / len(v.negative))


def pair_distances(desc_a, desc_b):
    return np.linalg.norm(np.asarray(desc_a) - np.asarray(desc_b), axis=1)


def query_images(images, ids, gt, bbox_crop=True):
    """Crop query images to their ground-truth boxes when one is given."""
    out = []
    for im, qid in zip(images, ids):
        box = gt[qid].bbox if bbox_crop else None
        out.append(crop(im, box) if box else im)
    return out


def evaluate(model, queries, query_ids, database, db_ids, gt, scales=(1.0,),
             protocols=PROTOCOLS, k=10):
    """Extract, rank and score. Returns ``{protocol: {"mAP": .., "mP@k": ..}}``."""
    qv = extract_descriptors(queries, model, scales)
    dv = extract_descriptors(database, model, scales)
    results = rank_database(qv, query_ids, dv, db_ids)
    return score(results, gt, protocols, k)


def score(results, gt, protocols=PROTOCOLS, k=10):
    return {proto: {"mAP": mean_ap(results, gt, proto), f"mP@{k}": mp_at_k(results, gt, proto, k)}
            for proto in protocols}


@dataclass
class SweepResult:
    learned_p: float
    rows: list  # (p, {protocol: mAP})


def p_sweep(model, queries, query_ids, database, db_ids, gt, p_values, scales=(1.0,),
            protocols=PROTOCOLS):
    """mAP with the GeM exponent overridden to each value (no retraining)."""
    if model.gem is None:
        raise ValidationError("model has no GeM head to sweep")
    bad = [p for p in p_values if not 1.0 <= p <= 100.0]
    if bad:
        raise ValidationError(f"sweep values must lie in [1, 100], got {bad}")
    learned = model.gem.p.detach().clone()
    rows = []
    try:
        for p in p_values:
            with torch.no_grad():
                model.gem.p.fill_(float(p))
            metrics = evaluate(model, queries, query_ids, database, db_ids, gt, scales, protocols)
            rows.append((float(p), {proto: metrics[proto]["mAP"] for proto in protocols}))
    finally:
        with torch.no_grad():
            model.gem.p.copy_(learned)
    return SweepResult(float(learned.item()), rows)
