"""Slow, literal reference implementations used to cross-check the fast paths.

Everything here works on numpy float64 with explicit loops, sharing no code
with the modules it checks.
"""

import math

import numpy as np


def gem(f, p, eps=1e-6):
    """Direct power mean of an ``(h, w, d)`` map, per channel."""
    f = np.maximum(np.asarray(f, dtype=np.float64), eps)
    h, w, d = f.shape
    out = np.zeros(d)
    for c in range(d):
        total = 0.0
        for i in range(h):
            for j in range(w):
                total += f[i, j, c] ** p
        out[c] = (total / (h * w)) ** (1.0 / p)
    return out


def softmax_rows(logits):
    logits = np.asarray(logits, dtype=np.float64)
    out = np.zeros_like(logits)
    for i, row in enumerate(logits):
        e = np.array([math.exp(x - row.max()) for x in row])
        out[i] = e / e.sum()
    return out


def soa(f, wq, wk, wv, wpsi, alpha):
    """Second-order attention on one ``(h, w, d)`` map; returns ``(f_so, z)``."""
    f = np.asarray(f, dtype=np.float64)
    h, w, d = f.shape
    x = [f[i, j] for i in range(h) for j in range(w)]  # row-major positions
    q = [wq @ xi for xi in x]
    k = [wk @ xi for xi in x]
    v = [wv @ xi for xi in x]
    n = len(x)
    z = softmax_rows([[alpha * float(q[i] @ k[j]) for j in range(n)] for i in range(n)])
    out = np.zeros_like(f)
    for i in range(n):
        mixed = sum(z[i, j] * v[j] for j in range(n))
        out[i // w, i % w] = x[i] + wpsi @ mixed
    return out, z


def _sq(a, b):
    return float(np.sum((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))


def fos(triplets, margin):
    return sum(max(0.0, _sq(a, p) - _sq(a, n) + margin) for a, p, n in triplets) / len(triplets)


def sos(triplets):
    return math.sqrt(sum((_sq(a, n) - _sq(p, n)) ** 2 for a, p, n in triplets)) / len(triplets)


def hard_negatives(anchor, anchor_class, descriptors, classes, ids, k):
    """Filter other classes, sort by (distance, id), keep the first per class."""
    rows = []
    for idx, (vec, cls, iid) in enumerate(zip(descriptors, classes, ids)):
        if cls == anchor_class:
            continue
        rows.append((math.sqrt(_sq(anchor, vec)), str(iid), idx, cls))
    rows.sort(key=lambda r: (r[0], r[1]))
    picked, seen = [], set()
    for _, _, idx, cls in rows:
        if cls not in seen:
            seen.add(cls)
            picked.append(idx)
    return picked[:k] if len(seen) >= k else None


def average_precision(ranked, positives, junk):
    kept = [r for r in ranked if r not in junk]
    total = 0.0
    for r in range(1, len(kept) + 1):
        if kept[r - 1] in positives:
            prefix = kept[:r]
            total += sum(1 for x in prefix if x in positives) / r
    return total / len(positives)


def precision_at_k(ranked, positives, junk, k):
    kept = [r for r in ranked if r not in junk]
    return sum(1 for x in kept[:k] if x in positives) / min(k, len(positives))


def fpr_at_95(positive, negative, recall=95):
    """Scan candidate thresholds upward; the first admitting ``recall``% wins."""
    positive = sorted(float(x) for x in positive)
    for t in positive:
        if 100 * sum(1 for x in positive if x <= t) >= recall * len(positive):
            return sum(1 for x in negative if x <= t) / len(negative)
    raise ValueError("no threshold reaches the requested recall")


def numeric_grad(fn, x, eps=1e-6):
    """Central finite differences of the scalar ``fn`` at the float64 array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = fn(x)
        flat[i] = old - eps
        down = fn(x)
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return g


def relative_error(a, b):
    """``|a - b| / max(|a|, |b|)`` in the 2-norm; 0 when both vanish."""
    a, b = np.ravel(np.asarray(a, dtype=np.float64)), np.ravel(np.asarray(b, dtype=np.float64))
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)
