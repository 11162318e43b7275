"""End-to-end acceptance gate.

Each test exercises one shipping criterion at its stated tolerance and
prints a single PASS/FAIL line with the measured numbers. Criteria are
independent; run the whole file for the full gate.
"""

import time

import numpy as np
import pytest

from ata import numerics as nm
from ata.alignment import FeatureVolume, align_clip, dealign_clip
from ata.infotheory import clip_adjacent_mi, entropy, fit_codebook, mutual_information
from ata.matching import (
    Permutation,
    matching_score,
    solve_assignment_bruteforce,
    solve_assignment_exact,
)
from ata.model import ModelConfig, TrainConfig, count_flops, forward_classifier, init_params, train
from ata.numerics import Tensor
from ata.synthdata import gen_motion_dataset, gen_shifted, gen_shuffled, gen_static


def _report(name, ok, detail):
    print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


def test_01_roundtrip_identity():
    """200 random clips de-align back to the original bit-for-bit."""
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    exact = 0
    for _ in range(200):
        t, h, w, c = (int(rng.integers(1, 9)), int(rng.integers(1, 9)),
                      int(rng.integers(1, 9)), int(rng.integers(1, 17)))
        vol = FeatureVolume(rng.normal(size=(t, h, w, c)))
        aligned, plan = align_clip(vol)
        restored = dealign_clip(aligned, plan)
        exact += restored.values.tobytes() == vol.values.tobytes()
    elapsed = time.perf_counter() - t0
    ok = exact == 200 and elapsed < 30
    _report("round-trip identity", ok, f"{exact}/200 bit-identical in {elapsed:.1f}s")


def test_02_assignment_optimality():
    """Exact solver matches the brute-force oracle on 500 matrices."""
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(500):
        n = int(rng.integers(2, 8))
        s = rng.uniform(-1.0, 1.0, (n, n))
        exact = matching_score(s, solve_assignment_exact(s))
        brute = matching_score(s, solve_assignment_bruteforce(s))
        worst = max(worst, abs(exact - brute))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-9 and elapsed < 60
    _report("assignment optimality", ok,
            f"max |exact - brute| = {worst:.2e} over 500 matrices in {elapsed:.1f}s")


def test_03_criterion_monotonicity():
    """Optimal matching never scores below the identity pairing."""
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    violations = 0
    for _ in range(1000):
        n = int(rng.integers(2, 17))
        prev = rng.normal(size=(n, 8))
        curr = rng.normal(size=(n, 8))
        from ata.matching import cosine_similarity_matrix
        s = cosine_similarity_matrix(prev, curr)
        opt = matching_score(s, solve_assignment_exact(s))
        ident = matching_score(s, Permutation.identity(n))
        violations += opt < ident - 1e-12
    elapsed = time.perf_counter() - t0
    ok = violations == 0 and elapsed < 60
    _report("criterion monotonicity", ok,
            f"{violations}/1000 violations in {elapsed:.1f}s")


def test_04_ground_truth_recovery():
    """Alignment recovers the stored permutations of shifted clips."""
    t0 = time.perf_counter()
    recovered = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        dx, dy = int(rng.integers(-1, 2)), int(rng.integers(-1, 2))
        clip = gen_shifted(6, 4, 4, 8, dx=dx, dy=dy, seed=seed)
        _, plan = align_clip(clip.volume)
        recovered += all(
            np.array_equal(p.map, truth.map)
            for p, truth in zip(plan.perms, clip.truth_perms))
    elapsed = time.perf_counter() - t0
    ok = recovered == 100 and elapsed < 60
    _report("ground-truth recovery", ok, f"{recovered}/100 seeds exact in {elapsed:.1f}s")


def test_05_mi_increase():
    """Adjacent-frame MI rises under alignment on shifted and shuffled clips."""
    t0 = time.perf_counter()
    increased = 0
    deltas = []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        # 64 patches against a k=16 codebook keeps quantization non-bijective
        base = gen_shifted(6, 8, 8, 8, dx=int(rng.integers(0, 2)),
                           dy=int(rng.integers(0, 2)), seed=seed)
        clip = gen_shuffled(base, seed=seed + 1) if seed % 2 else base
        cb = fit_codebook(clip.volume.tokens().reshape(-1, 8), 16, seed=seed)
        before = clip_adjacent_mi(clip.volume, cb)
        aligned, _ = align_clip(clip.volume)
        after = clip_adjacent_mi(aligned, cb)
        deltas.append(after - before)
        increased += after >= before
    elapsed = time.perf_counter() - t0
    mean_delta = float(np.mean(deltas))
    ok = increased >= 95 and mean_delta > 0 and elapsed < 300
    _report("MI increase", ok,
            f"{increased}/100 seeds non-decreasing, mean delta {mean_delta:.4f} "
            f"in {elapsed:.1f}s")


def test_06_gradient_correctness():
    """Finite differences agree with reverse mode on the full classifier."""
    t0 = time.perf_counter()
    worst = 0.0
    for variant in ("averaging", "temporal", "joint", "ata"):
        cfg = ModelConfig(t_len=2, h=2, w=2, c_in=3, d=4, heads=2, depth=1,
                          variant=variant, classes=3, seed=0)
        params = init_params(cfg)
        clip = FeatureVolume(np.random.default_rng(3).normal(size=(2, 2, 2, 3)))
        frozen = None
        if variant == "ata":
            captured = []
            forward_classifier(clip, params, cfg, capture_plans=captured)
            frozen = captured
        names = sorted(params)
        tensors = [params[k] for k in names]

        def f(tensor_list, _frozen=frozen, _cfg=cfg, _clip=clip,
              _names=names, _params=params):
            logits = forward_classifier(_clip, _params, _cfg, frozen_plans=_frozen)
            return nm.cross_entropy_logits(logits, [1])

        err = nm.finite_diff_check(f, tensors, h=1e-6)
        worst = max(worst, err)
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 300
    _report("gradient correctness", ok,
            f"max relative error {worst:.2e} over all variants in {elapsed:.1f}s")


def test_07_training_separation():
    """Aligned temporal routes beat fixed-position routes on shuffled motion
    and match them on plain motion."""
    t0 = time.perf_counter()
    hyper = TrainConfig(lr=0.1, epochs=30, batch=16, seed=0)
    results = {}
    for shuffled in (True, False):
        ds = gen_motion_dataset(1000, 8, 4, 4, 8, shuffled=shuffled, seed=42)
        for variant in ("ata", "temporal"):
            cfg = ModelConfig(8, 4, 4, 8, d=32, heads=4, depth=2,
                              variant=variant, classes=4, seed=0)
            _, metrics = train(ds, cfg, hyper)
            # mean of the last five epochs smooths epoch-to-epoch noise
            results[(shuffled, variant)] = float(
                np.mean([m["val_acc"] for m in metrics[-5:]]))
    elapsed = time.perf_counter() - t0
    gap_shuffled = results[(True, "ata")] - results[(True, "temporal")]
    gap_plain = abs(results[(False, "ata")] - results[(False, "temporal")])
    ok = gap_shuffled >= 0.15 and gap_plain <= 0.05 and elapsed < 1800
    _report("training separation", ok,
            f"shuffled ata {results[(True, 'ata')]:.2f} vs temporal "
            f"{results[(True, 'temporal')]:.2f} (gap {gap_shuffled:+.2f}); plain ata "
            f"{results[(False, 'ata')]:.2f} vs temporal "
            f"{results[(False, 'temporal')]:.2f} (gap {gap_plain:.2f}); {elapsed:.0f}s")


def test_08_complexity_scaling():
    """Exact-solver wall time grows polynomially with the cubic window."""
    rng = np.random.default_rng(4)
    sizes = [32, 64, 128, 256]
    t0 = time.perf_counter()
    medians = []
    for n in sizes:
        times = []
        for _ in range(3):
            s = rng.uniform(-1.0, 1.0, (n, n))
            t1 = time.perf_counter()
            solve_assignment_exact(s)
            times.append(time.perf_counter() - t1)
        medians.append(float(np.median(times)))
    slope = float(np.polyfit(np.log(sizes), np.log(medians), 1)[0])
    elapsed = time.perf_counter() - t0
    ok = 2.0 <= slope <= 3.6 and elapsed < 300
    _report("complexity scaling", ok,
            f"log-log slope {slope:.2f} over n={sizes} in {elapsed:.1f}s")


def test_09_flop_parity():
    """Aligned and factorized variants share attention-path counts; the
    joint > factorized > spatial ordering holds."""
    rng = np.random.default_rng(5)
    parity = ordering = 0
    for _ in range(20):
        cfg = ModelConfig(t_len=int(rng.integers(2, 17)),
                          h=int(rng.integers(2, 9)), w=int(rng.integers(2, 9)),
                          c_in=8, d=int(rng.integers(1, 9)) * 8, heads=8,
                          depth=1, variant="ata", classes=4, seed=0)
        ata = count_flops(cfg, "ata")
        fact = count_flops(cfg, "temporal")
        joint = count_flops(cfg, "joint")
        spatial = count_flops(cfg, "averaging")
        parity += (ata.attention == fact.attention
                   and ata.projections == fact.projections)
        ordering += joint.attention > fact.attention > spatial.attention
    ok = parity == 20 and ordering == 20
    _report("FLOP parity", ok,
            f"parity {parity}/20, ordering {ordering}/20 random configs")


def test_10_estimator_sanity():
    """MI(a, a) equals H(a); independent pairs give near-zero MI."""
    rng = np.random.default_rng(6)
    a = rng.integers(0, 16, 4096)
    self_gap = abs(mutual_information(a, a) - entropy(a))
    worst_indep = 0.0
    for _ in range(10):
        x = rng.integers(0, 8, 4096)
        y = rng.integers(0, 8, 4096)
        worst_indep = max(worst_indep, mutual_information(x, y))
    ok = self_gap < 1e-12 and worst_indep <= 0.05
    _report("estimator sanity", ok,
            f"|MI(a,a) - H(a)| = {self_gap:.2e}, max independent MI "
            f"{worst_indep:.4f} at 4096 samples")
