"""Slow, obviously-correct reference implementations used by the tests."""

import math

import numpy as np


def scan_nearest(points, entries):
    """Exhaustive scan; strict ``<`` keeps the lowest index on ties."""
    out = np.empty(len(points), dtype=np.int64)
    for i, p in enumerate(points):
        best, arg = math.inf, -1
        for k, c in enumerate(entries):
            d = float(np.sum((p - c) ** 2))
            if d < best:
                best, arg = d, k
        out[i] = arg
    return out


def tie_instance(rng, k, d, n):
    """Integer-valued points and codebook with exact ties and duplicate entries."""
    entries = rng.integers(-3, 4, size=(k, d)).astype(np.float64)
    points = rng.integers(-3, 4, size=(n, d)).astype(np.float64)
    if k >= 3:
        entries[k - 1] = entries[rng.integers(k - 1)]  # duplicate row
    for i in range(0, n, 2):
        a, b = rng.choice(k, size=2, replace=False)
        v = rng.integers(-2, 3, size=d).astype(np.float64)
        # p sits exactly between entries a and b
        entries[a] = points[i] + v
        entries[b] = points[i] - v
    return points, entries


def brute_infonce(emb, tau):
    """Per-anchor loop: positive is the next token of the same sentence,
    negatives are all tokens of the other sentences."""
    b, m, _ = emb.shape
    z = emb / np.linalg.norm(emb, axis=-1, keepdims=True)
    losses = []
    for i in range(b):
        for j in range(m - 1):
            anchor = z[i, j]
            pos = anchor @ z[i, j + 1] / tau
            negs = [anchor @ z[o, t] / tau for o in range(b) if o != i for t in range(m)]
            logits = np.array([pos] + negs)
            top = logits.max()
            losses.append(-(pos - top - math.log(np.exp(logits - top).sum())))
    return float(np.mean(losses))
