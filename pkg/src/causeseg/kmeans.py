"""Spherical k-means with k-means++ seeding, shared by the codebook
baseline and the inference-time cluster probe.

Distances are cosine (objective sum of 1 - cos); centroids live on the
unit sphere and are renormalized after every Lloyd update. Empty clusters
are reseeded from the currently most expensive point, which keeps the
objective non-increasing.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .rng import RngStream
from .tensor_math import unit_rows

__all__ = ["spherical_kmeans"]


def _kmeanspp_seeds(xu: np.ndarray, k: int, rng: RngStream) -> np.ndarray:
    n = xu.shape[0]
    seeds = np.empty(k, dtype=np.int64)
    seeds[0] = rng.integers(0, n)
    # 1 - cos is proportional to squared chordal distance on the sphere,
    # so it plays the role of D^2 in the classic seeding rule.
    dist = 1.0 - xu @ xu[seeds[0]]
    np.maximum(dist, 0.0, out=dist)
    for i in range(1, k):
        total = dist.sum()
        if total <= 1e-15:
            seeds[i] = rng.integers(0, n)
        else:
            seeds[i] = rng.choice(n, p=dist / total)
        np.minimum(dist, np.maximum(1.0 - xu @ xu[seeds[i]], 0.0), out=dist)
    return seeds


def spherical_kmeans(x: np.ndarray, k: int, iters: int, rng: RngStream,
                     n_init: int = 10):
    """Cluster rows of x into k unit centroids.

    Runs `n_init` independently seeded Lloyd optimizations and keeps the
    best final objective. Returns (centroids k x d float32, labels,
    objective_trace) for the winning run; the trace holds the objective
    after each assignment step and is non-increasing.
    """
    if n_init < 1:
        raise ValidationError("n_init must be >= 1")
    best = None
    for restart in range(n_init):
        result = _lloyd(x, k, iters, rng.child(f"init{restart}"))
        if best is None or result[2][-1] < best[2][-1]:
            best = result
    return best


def _lloyd(x: np.ndarray, k: int, iters: int, rng: RngStream):
    xu = unit_rows(x, "kmeans input")
    n = xu.shape[0]
    if k < 1 or k > n:
        raise ValidationError(f"need 1 <= k <= n rows, got k={k}, n={n}")
    if iters < 1:
        raise ValidationError("iters must be >= 1")

    centroids = xu[_kmeanspp_seeds(xu, k, rng)].copy()
    labels = np.full(n, -1, dtype=np.int64)
    trace: list[float] = []
    for _ in range(iters):
        sim = xu @ centroids.T
        new_labels = np.argmax(sim, axis=1)
        cost = 1.0 - sim[np.arange(n), new_labels]
        trace.append(float(cost.sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels

        for j in range(k):
            members = labels == j
            if not members.any():
                worst = int(np.argmax(cost))
                centroids[j] = xu[worst]
                labels[worst] = j
                cost[worst] = 0.0
                continue
            mean = xu[members].sum(axis=0)
            norm = np.linalg.norm(mean)
            if norm > 1e-12:
                centroids[j] = mean / norm
            # A perfectly cancelling cluster keeps its previous centroid.

    return centroids.astype(np.float32), labels, trace
