"""Unit tests for the synthetic clip generators."""

import numpy as np
import pytest

from ata.alignment import align_clip
from ata.synthdata import (
    DIRECTIONS,
    MIN_COSINE_GAP,
    gen_motion_dataset,
    gen_shifted,
    gen_shuffled,
    gen_static,
)


class TestGenStatic:
    def test_all_frames_equal_and_identity_truth(self):
        clip = gen_static(5, 3, 3, 6, seed=0)
        vol = clip.volume.values
        for t in range(1, 5):
            np.testing.assert_array_equal(vol[t], vol[0])
        assert all(p.is_identity() for p in clip.truth_perms)

    def test_patches_have_cosine_gap(self):
        clip = gen_static(2, 4, 4, 16, seed=1)
        tokens = clip.volume.tokens()[0]
        unit = tokens / np.linalg.norm(tokens, axis=1, keepdims=True)
        sim = unit @ unit.T
        np.fill_diagonal(sim, -1.0)
        assert sim.max() <= 1.0 - MIN_COSINE_GAP

    def test_alignment_of_output_is_identity(self):
        clip = gen_static(4, 3, 3, 8, seed=2)
        _, plan = align_clip(clip.volume)
        assert all(p.is_identity() for p in plan.perms)


class TestGenShifted:
    def test_zero_shift_reduces_to_static(self):
        shifted = gen_shifted(4, 3, 3, 6, dx=0, dy=0, seed=3)
        static = gen_static(4, 3, 3, 6, seed=3)
        np.testing.assert_array_equal(shifted.volume.values, static.volume.values)
        assert all(p.is_identity() for p in shifted.truth_perms)

    def test_row_rotation_hand_case(self):
        clip = gen_shifted(2, 1, 3, 8, dx=1, dy=0, seed=4)
        _, plan = align_clip(clip.volume)
        np.testing.assert_array_equal(plan.perms[1].map, [1, 2, 0])

    def test_truth_gathers_back_to_base(self):
        clip = gen_shifted(5, 4, 4, 8, dx=1, dy=1, seed=5)
        tokens = clip.volume.tokens()
        for t in range(5):
            np.testing.assert_allclose(tokens[t][clip.truth_perms[t].map], tokens[0])

    def test_alignment_recovers_truth_many_seeds(self):
        for seed in range(25):
            clip = gen_shifted(4, 3, 3, 8, dx=1, dy=0, seed=seed)
            _, plan = align_clip(clip.volume)
            for p, truth in zip(plan.perms, clip.truth_perms):
                np.testing.assert_array_equal(p.map, truth.map)


class TestGenShuffled:
    def test_preserves_label_and_frame_zero(self):
        base = gen_shifted(4, 3, 3, 6, dx=1, dy=0, seed=6)
        base.label = 2
        shuffled = gen_shuffled(base, seed=7)
        assert shuffled.label == 2
        np.testing.assert_array_equal(shuffled.volume.tokens()[0], base.volume.tokens()[0])

    def test_truth_still_gathers_back_to_base(self):
        base = gen_shifted(5, 3, 3, 8, dx=0, dy=1, seed=8)
        shuffled = gen_shuffled(base, seed=9)
        tokens = shuffled.volume.tokens()
        for t in range(5):
            np.testing.assert_allclose(tokens[t][shuffled.truth_perms[t].map], tokens[0])

    def test_frame_multisets_unchanged(self):
        base = gen_static(4, 3, 3, 6, seed=10)
        shuffled = gen_shuffled(base, seed=11)
        for t in range(4):
            a = np.sort(base.volume.tokens()[t], axis=0)
            b = np.sort(shuffled.volume.tokens()[t], axis=0)
            np.testing.assert_array_equal(a, b)


class TestGenMotionDataset:
    def test_balanced_classes_and_split(self):
        ds = gen_motion_dataset(40, 4, 4, 4, 6, seed=0)
        counts = np.bincount([c.label for c in ds.clips], minlength=4)
        assert counts.max() - counts.min() <= 1
        assert len(ds.train) + len(ds.val) == 40
        assert set(ds.train_indices).isdisjoint(ds.val_indices)

    def test_labels_match_directions(self):
        ds = gen_motion_dataset(8, 3, 4, 4, 6, seed=1, noise_sigma=0.0)
        for clip in ds.clips:
            dx, dy = DIRECTIONS[clip.label]
            tokens = clip.volume.tokens()
            frame1 = tokens[0].reshape(4, 4, 6)
            rolled = np.roll(frame1, shift=(dy, dx), axis=(0, 1)).reshape(16, 6)
            np.testing.assert_allclose(tokens[1], rolled)

    def test_same_seed_identical_bytes(self):
        a = gen_motion_dataset(10, 4, 3, 3, 6, seed=2, shuffled=True)
        b = gen_motion_dataset(10, 4, 3, 3, 6, seed=2, shuffled=True)
        for ca, cb in zip(a.clips, b.clips):
            assert ca.volume.values.tobytes() == cb.volume.values.tobytes()

    def test_shuffles_shared_across_clips(self):
        # the same per-frame shuffle applies to every clip, so composing a
        # clip's truth with the inverse of another clip's same-direction
        # truth yields the identity at every frame
        ds = gen_motion_dataset(8, 4, 3, 3, 6, seed=3, shuffled=True)
        same_dir = [c for c in ds.clips if c.label == 0]
        a, b = same_dir[0], same_dir[1]
        for pa, pb in zip(a.truth_perms, b.truth_perms):
            np.testing.assert_array_equal(pa.map, pb.map)

    def test_rejects_degenerate_grid(self):
        with pytest.raises(ValueError):
            gen_motion_dataset(4, 4, 1, 1, 6, seed=0)
