"""Empirical entropy and mutual information between adjacent frames.

Patches are quantized against a k-means codebook; the joint distribution
of two frames is defined by positional pairing of their label sequences.
Alignment changes the pairing, not the per-frame label multiset, so
per-frame entropy is invariant under alignment while the conditional
entropy (and hence MI) is not. All entropies are in nats.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Codebook",
    "fit_codebook",
    "quantize",
    "entropy",
    "conditional_entropy",
    "mutual_information",
    "clip_adjacent_mi",
]

DEFAULT_K = 16
_KMEANS_MAX_ITER = 100
_KMEANS_TOL = 1e-6


@dataclass
class Codebook:
    k: int
    centroids: np.ndarray
    seed: int

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("Codebook: k must be >= 2")
        c = np.asarray(self.centroids, dtype=np.float64)
        if c.shape[0] != self.k:
            raise ValueError("Codebook: centroid count does not match k")
        if np.unique(c, axis=0).shape[0] != self.k:
            raise ValueError("Codebook: centroids must be pairwise distinct")
        self.centroids = c


def _sq_dists(points, centroids):
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def fit_codebook(patches, k, seed):
    """k-means with k-means++ seeding; deterministic under the seed."""
    points = np.asarray(patches, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("fit_codebook: patches must be [m, C]")
    if np.unique(points, axis=0).shape[0] < k:
        raise ValueError(f"fit_codebook: fewer than k={k} distinct patches")
    rng = np.random.default_rng(seed)
    m = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(m)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        probs = d2 / d2.sum() if d2.sum() > 0 else np.full(m, 1.0 / m)
        centroids[i] = points[rng.choice(m, p=probs)]
        d2 = np.minimum(d2, ((points - centroids[i]) ** 2).sum(axis=1))
    for _ in range(_KMEANS_MAX_ITER):
        labels = _sq_dists(points, centroids).argmin(axis=1)
        new = centroids.copy()
        for i in range(k):
            members = points[labels == i]
            if len(members):
                new[i] = members.mean(axis=0)
            else:
                # deterministic repair: move to the point farthest from its centroid
                far = _sq_dists(points, new).min(axis=1).argmax()
                new[i] = points[far]
        shift = np.abs(new - centroids).max()
        centroids = new
        if shift < _KMEANS_TOL:
            break
    if np.unique(centroids, axis=0).shape[0] < k:
        # collapse can only happen on degenerate inputs; nudge is not allowed,
        # so surface it instead of silently merging symbols
        raise ValueError("fit_codebook: k-means collapsed two centroids")
    return Codebook(k, centroids, seed)


def quantize(frame, cb):
    """Nearest-centroid label per patch; ties go to the lowest index."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2 or frame.shape[1] != cb.centroids.shape[1]:
        raise ValueError("quantize: frame dims do not match the codebook")
    return _sq_dists(frame, cb.centroids).argmin(axis=1)


def _freqs(labels):
    labels = np.asarray(labels, dtype=np.intp)
    if labels.size == 0:
        raise ValueError("empty label sequence")
    counts = np.bincount(labels)
    return counts[counts > 0] / labels.size


def entropy(labels):
    """-sum p log p over empirical label frequencies, in nats."""
    p = _freqs(labels)
    return float(-(p * np.log(p)).sum())


def _joint_entropy(a, b):
    a = np.asarray(a, dtype=np.intp)
    b = np.asarray(b, dtype=np.intp)
    if a.shape != b.shape:
        raise ValueError("label sequences must have equal length")
    width = int(b.max()) + 1
    return entropy(a * width + b)


def conditional_entropy(a, b):
    """H(B | A) from the empirical joint of positionally paired labels."""
    return _joint_entropy(a, b) - entropy(a)


def mutual_information(a, b):
    """H(B) - H(B | A); symmetric and non-negative up to rounding."""
    return entropy(a) + entropy(b) - _joint_entropy(a, b)


def clip_adjacent_mi(x, cb):
    """Mean MI over adjacent frame pairs of a clip, under one codebook."""
    if x.t_len < 2:
        raise ValueError("clip_adjacent_mi: need at least two frames")
    tokens = x.tokens()
    labels = [quantize(frame, cb) for frame in tokens]
    vals = [mutual_information(labels[t - 1], labels[t]) for t in range(1, x.t_len)]
    return float(np.mean(vals))
