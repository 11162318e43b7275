"""Chained per-frame alignment of feature volumes and its exact inverse.

Frame t is matched against the already-aligned frame t-1 (sequential
dependency), gathered by the solved permutation, and recorded in the
plan. De-alignment applies the inverse maps, restoring the input
bit-exactly. Similarities are computed on L2-normalized copies that
never participate in differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .matching import Permutation, cosine_similarity_matrix, solve_assignment_exact

__all__ = [
    "FeatureVolume",
    "AlignmentPlan",
    "align_clip",
    "dealign_clip",
    "permutation_matrix",
    "compute_alignment_maps",
]


@dataclass
class FeatureVolume:
    """Dense [T, H, W, C] float array of patch features."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 4:
            raise ValueError("FeatureVolume: values must be [T, H, W, C]")
        if not np.all(np.isfinite(v)):
            raise ValueError("FeatureVolume: non-finite values")
        self.values = v

    @property
    def t_len(self):
        return self.values.shape[0]

    @property
    def h(self):
        return self.values.shape[1]

    @property
    def w(self):
        return self.values.shape[2]

    @property
    def c(self):
        return self.values.shape[3]

    @property
    def n_patches(self):
        return self.h * self.w

    def tokens(self):
        """[T, HW, C] view of the volume."""
        return self.values.reshape(self.t_len, self.n_patches, self.c)

    def copy(self):
        return FeatureVolume(self.values.copy())


@dataclass
class AlignmentPlan:
    """One gather permutation per frame; entry 0 is always the identity."""

    perms: list

    def __post_init__(self):
        if not self.perms:
            raise ValueError("AlignmentPlan: empty plan")
        if not self.perms[0].is_identity():
            raise ValueError("AlignmentPlan: perms[0] must be the identity")
        n = self.perms[0].n
        if any(p.n != n for p in self.perms):
            raise ValueError("AlignmentPlan: inconsistent permutation sizes")

    @property
    def t_len(self):
        return len(self.perms)

    @property
    def n_patches(self):
        return self.perms[0].n

    def maps(self):
        """[T, HW] integer array of gather maps."""
        return np.stack([p.map for p in self.perms])

    def inverse_maps(self):
        return np.stack([p.inverse().map for p in self.perms])


def compute_alignment_maps(tokens):
    """Gather maps for a [T, n, c] token array, chained over frames.

    Row 0 is the identity. Matching runs on normalized copies of the
    data and is therefore outside any gradient path by construction.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    t_len, n, _ = tokens.shape
    maps = np.empty((t_len, n), dtype=np.intp)
    maps[0] = np.arange(n)
    prev = tokens[0]
    for t in range(1, t_len):
        s = cosine_similarity_matrix(prev, tokens[t])
        perm = solve_assignment_exact(s)
        maps[t] = perm.map
        prev = tokens[t][perm.map]
    return maps


def align_clip(x):
    """Align a clip frame by frame; returns the aligned volume and plan."""
    maps = compute_alignment_maps(x.tokens())
    aligned = x.tokens()[np.arange(x.t_len)[:, None], maps]
    plan = AlignmentPlan([Permutation(m.copy()) for m in maps])
    return FeatureVolume(aligned.reshape(x.values.shape)), plan


def dealign_clip(x_aligned, plan):
    """Invert align_clip; round-trips bit-exactly."""
    if plan.t_len != x_aligned.t_len or plan.n_patches != x_aligned.n_patches:
        raise ValueError("dealign_clip: plan does not match the volume")
    inv = plan.inverse_maps()
    restored = x_aligned.tokens()[np.arange(x_aligned.t_len)[:, None], inv]
    return FeatureVolume(restored.reshape(x_aligned.values.shape))


def permutation_matrix(p):
    """One-hot matrix M with M[j, map[j]] = 1; M.T is the inverse's matrix."""
    m = np.zeros((p.n, p.n))
    m[np.arange(p.n), p.map] = 1.0
    return m
