"""Deterministic synthetic clips with known ground-truth correspondences.

All generators are seed-driven. Base frames are rejection-sampled so
every pair of patches has cosine similarity at most 1 - MIN_COSINE_GAP,
which makes the optimal matching unique in noise-free cases. Truth
permutations use the gather convention of the matching module: gathering
frame t by truth_perms[t] reproduces the base frame ordering.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .alignment import FeatureVolume
from .matching import Permutation

__all__ = [
    "SyntheticClip",
    "MotionDataset",
    "MIN_COSINE_GAP",
    "gen_static",
    "gen_shifted",
    "gen_shuffled",
    "gen_motion_dataset",
    "DIRECTIONS",
]

MIN_COSINE_GAP = 0.1
_MAX_REJECTIONS = 1000

# class id -> (dx, dy): right, left, down, up
DIRECTIONS = ((1, 0), (-1, 0), (0, 1), (0, -1))


@dataclass
class SyntheticClip:
    volume: FeatureVolume
    truth_perms: list | None = None
    label: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.truth_perms is not None:
            n = self.volume.n_patches
            if len(self.truth_perms) != self.volume.t_len or any(p.n != n for p in self.truth_perms):
                raise ValueError("SyntheticClip: truth_perms inconsistent with volume dims")


@dataclass
class MotionDataset:
    clips: list
    train_indices: list
    val_indices: list

    @property
    def train(self):
        return [self.clips[i] for i in self.train_indices]

    @property
    def val(self):
        return [self.clips[i] for i in self.val_indices]


def _distinct_base(h, w, c, rng):
    """Random [H, W, C] frame whose patches have pairwise cosine gap >= 0.1."""
    n = h * w
    for _ in range(_MAX_REJECTIONS):
        frame = rng.normal(size=(n, c))
        unit = frame / np.linalg.norm(frame, axis=1, keepdims=True)
        sim = unit @ unit.T
        np.fill_diagonal(sim, -1.0)
        if n == 1 or sim.max() <= 1.0 - MIN_COSINE_GAP:
            return frame.reshape(h, w, c)
    raise ValueError(
        f"could not sample {n} patches with cosine gap >= {MIN_COSINE_GAP} in {c} dims")


def _translation_map(h, w, dy, dx):
    """Gather map undoing a cyclic translation by (dy, dx)."""
    r, cc = np.divmod(np.arange(h * w), w)
    return ((r + dy) % h) * w + (cc + dx) % w


def gen_static(t, h, w, c, seed):
    rng = np.random.default_rng(seed)
    base = _distinct_base(h, w, c, rng)
    vol = np.broadcast_to(base, (t, h, w, c)).copy()
    truths = [Permutation.identity(h * w) for _ in range(t)]
    return SyntheticClip(FeatureVolume(vol), truths, None, seed)


def gen_shifted(t, h, w, c, dx, dy, seed):
    """Base frame cyclically translated by (ti*dx, ti*dy) at frame ti."""
    rng = np.random.default_rng(seed)
    base = _distinct_base(h, w, c, rng)
    vol = np.empty((t, h, w, c))
    truths = []
    for ti in range(t):
        vol[ti] = np.roll(base, shift=(ti * dy, ti * dx), axis=(0, 1))
        truths.append(Permutation(_translation_map(h, w, ti * dy, ti * dx)))
    return SyntheticClip(FeatureVolume(vol), truths, None, seed)


def gen_shuffled(base, seed):
    """Independent uniform per-frame shuffles of every frame except frame 0."""
    rng = np.random.default_rng(seed)
    tokens = base.volume.tokens().copy()
    t_len, n, _ = tokens.shape
    old_truths = base.truth_perms or [Permutation.identity(n) for _ in range(t_len)]
    truths = [old_truths[0]]
    for ti in range(1, t_len):
        g = rng.permutation(n)
        inv_g = np.empty(n, dtype=np.intp)
        inv_g[g] = np.arange(n)
        tokens[ti] = tokens[ti][g]
        truths.append(Permutation(inv_g[old_truths[ti].map]))
    vol = tokens.reshape(base.volume.values.shape)
    return SyntheticClip(FeatureVolume(vol), truths, base.label, seed)


def gen_motion_dataset(n_clips, t, h, w, c, classes=4, shuffled=False, seed=0,
                       noise_sigma=0.05):
    """Balanced 4-direction motion clips with an 80/20 train/val split.

    Each clip has its own distinct-patch base frame, cyclically
    translated one step per frame in the class direction, with small
    per-frame additive noise. With `shuffled`, one uniform permutation
    per frame index (shared by all clips of the dataset) is applied
    after the motion; per-clip independent shuffles would make the
    class label unrecoverable from the clip contents.
    """
    if classes != 4:
        raise ValueError("gen_motion_dataset: classes must be 4 (direction labels)")
    if h < 2 and w < 2:
        raise ValueError("gen_motion_dataset: grid too small for motion")
    rng = np.random.default_rng(seed)
    n = h * w
    shuffles = [np.arange(n)]
    for _ in range(1, t):
        shuffles.append(rng.permutation(n))
    clips = []
    for idx in range(n_clips):
        label = idx % classes
        dx, dy = DIRECTIONS[label]
        base = _distinct_base(h, w, c, rng)
        tokens = np.empty((t, n, c))
        truths = []
        for ti in range(t):
            frame = np.roll(base, shift=(ti * dy, ti * dx), axis=(0, 1))
            frame = frame + rng.normal(scale=noise_sigma, size=frame.shape)
            m_translate = _translation_map(h, w, ti * dy, ti * dx)
            if shuffled and ti > 0:
                g = shuffles[ti]
                inv_g = np.empty(n, dtype=np.intp)
                inv_g[g] = np.arange(n)
                tokens[ti] = frame.reshape(n, c)[g]
                truths.append(Permutation(inv_g[m_translate]))
            else:
                tokens[ti] = frame.reshape(n, c)
                truths.append(Permutation(m_translate))
        vol = FeatureVolume(tokens.reshape(t, h, w, c))
        clips.append(SyntheticClip(vol, truths, label, seed))
    val_indices = [i for i in range(n_clips) if i % 5 == 4]
    train_indices = [i for i in range(n_clips) if i % 5 != 4]
    return MotionDataset(clips, train_indices, val_indices)
