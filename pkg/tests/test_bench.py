import numpy as np
import pytest

from biequi.bench import (PairRecord, fibonacci_axes, gen_synthetic_pair, inlier_ratio, make_augment_configs,
                          measured_overlap, metric_rmse, metrics_rre_rte, registration_recall, robust_report,
                          run_benchmark)
from biequi.errors import EmptyCorrespondences, IncompleteGrid, OverlapInfeasible
from biequi.geometry import RigidTransform, apply_transform, axis_angle_rotation, compose, invert, random_transform
from biequi.matching import FineMatchSet
from biequi.registration import RegisterOptions


def test_metrics_known_values():
    src = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 2.0, 0]])
    gt = RigidTransform.identity()
    shifted = RigidTransform(np.eye(3), [0.3, 0.4, 0])
    assert metric_rmse(shifted, gt, src) == pytest.approx(0.5)
    rre, rte = metrics_rre_rte(RigidTransform(axis_angle_rotation([0, 0, 1], np.radians(30)), [0, 0, 1]), gt)
    assert rre == pytest.approx(30.0) and rte == pytest.approx(1.0)
    assert registration_recall([0.1, 0.3, 0.19, 0.2]) == 0.5
    with pytest.raises(ValueError):
        registration_recall([])


def test_rmse_brute_force_and_left_invariance(rng):
    for _ in range(20):
        src = rng.normal(size=(50, 3))
        est, gt, h = random_transform(rng), random_transform(rng), random_transform(rng)
        direct = np.sqrt(np.mean([np.sum((est.r @ p + est.t - gt.r @ p - gt.t) ** 2) for p in src]))
        assert metric_rmse(est, gt, src) == pytest.approx(direct, rel=1e-9, abs=1e-12)
        assert metric_rmse(compose(h, est), compose(h, gt), src) == pytest.approx(direct, rel=1e-9, abs=1e-12)


def test_inlier_ratio(rng):
    x = rng.normal(size=(10, 3))
    gt = random_transform(rng)
    y = apply_transform(invert(gt), x)
    y[:4] += 1.0
    corr = FineMatchSet(np.arange(10), np.arange(10), np.ones(10))
    assert inlier_ratio(corr, x, y, gt) == pytest.approx(0.6)
    with pytest.raises(EmptyCorrespondences):
        inlier_ratio(FineMatchSet.empty(), x, y, gt)


@pytest.mark.parametrize("mode", ["split", "joint"])
def test_augment_configs(mode):
    cfgs = make_augment_configs(0, mode)
    assert len(cfgs) == 54
    for c in cfgs:
        for r in (c.ref_rotation, c.src_rotation):
            np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
            assert np.linalg.det(r) == pytest.approx(1.0)
    if mode == "split":
        assert [c.which for c in cfgs] == ["ref"] * 27 + ["src"] * 27
        for a, b in zip(cfgs[:27], cfgs[27:]):
            np.testing.assert_array_equal(a.ref_rotation, b.src_rotation)


def test_augment_apply_keeps_alignment(rng):
    src = rng.normal(size=(30, 3))
    gt = random_transform(rng)
    ref = apply_transform(gt, src)
    for c in make_augment_configs(4, "joint")[::7]:
        r2, s2, g2 = c.apply(ref, src, gt)
        np.testing.assert_allclose(apply_transform(g2, s2), r2, atol=1e-12)


def test_fibonacci_axes_separation():
    for seed in range(100):
        axes = fibonacci_axes(9, seed)
        np.testing.assert_allclose(np.linalg.norm(axes, axis=1), 1.0)
        cos = (axes @ axes.T)[np.triu_indices(9, 1)]
        assert np.degrees(np.arccos(cos.max())) > 15.0
        # also as undirected lines
        assert np.degrees(np.arccos(np.abs(cos).max())) > 15.0


def test_robust_report_all_success():
    rep = robust_report(np.ones((3, 54)), np.full((3, 54), 0.4))
    assert rep.mean_rr == rep.robust_rr == 1.0
    assert rep.robust_ir == pytest.approx(0.4)


def test_robust_report_single_failure():
    rec = np.ones((1, 54))
    rec[0, 17] = 0
    rep = robust_report(rec, rec)
    assert rep.mean_rr == pytest.approx(53 / 54)
    assert rep.robust_rr == 0.0


def test_robust_report_matches_double_loop(rng):
    rec = (rng.random((7, 54)) < 0.8).astype(float)
    ir = rng.random((7, 54))
    rep = robust_report(rec, ir, overlaps=[0.05, 0.15, 0.15, 0.5, 0.99, 1.0, 0.33])
    robust = sum(min(row) for row in rec.tolist()) / 7
    mean = sum(sum(row) for row in rec.tolist()) / (7 * 54)
    assert rep.robust_rr == pytest.approx(robust, abs=1e-12)
    assert rep.mean_rr == pytest.approx(mean, abs=1e-12)
    assert rep.robust_rr <= rep.mean_rr and rep.robust_ir <= rep.mean_ir
    assert sum(b["n_pairs"] for b in rep.buckets) == 7
    assert [b["lo"] for b in rep.buckets] == [0.0, 0.1, 0.3, 0.5, 0.9]


def test_robust_report_incomplete():
    with pytest.raises(IncompleteGrid):
        robust_report([[1, 1], [1]], [[1, 1], [1]])
    with pytest.raises(IncompleteGrid):
        robust_report([[1, None]], [[1, 1]])
    with pytest.raises(IncompleteGrid):
        robust_report([], [])
    with pytest.raises(IncompleteGrid):
        robust_report(np.ones((2, 3)), np.ones((2, 4)))


def test_synthetic_full_overlap_exact():
    pair = gen_synthetic_pair(3, 500, 1.0, 0.0)
    np.testing.assert_allclose(apply_transform(pair.gt, pair.src[pair.matches[:, 1]]), pair.ref[pair.matches[:, 0]],
                               atol=1e-12)
    assert len(pair.matches) == 500
    assert pair.overlap == 1.0


@pytest.mark.parametrize("target", [0.3, 0.5, 0.8])
def test_synthetic_overlap_tolerance(target):
    for seed in range(20):
        pair = gen_synthetic_pair(seed, 800, target)
        assert abs(pair.overlap - target) <= 0.1
        assert pair.overlap == pytest.approx(measured_overlap(pair.ref, pair.src, pair.gt))
        ref, src, gt, matches = pair
        d = np.linalg.norm(apply_transform(gt, src[matches[:, 1]]) - ref[matches[:, 0]], axis=1)
        assert d.max() < 0.1


def test_synthetic_deterministic_and_errors():
    a, b = gen_synthetic_pair(9, 300, 0.5), gen_synthetic_pair(9, 300, 0.5)
    np.testing.assert_array_equal(a.ref, b.ref)
    np.testing.assert_array_equal(a.matches, b.matches)
    with pytest.raises(OverlapInfeasible):
        gen_synthetic_pair(0, 3, 0.15, max_tries=3)
    with pytest.raises(ValueError):
        gen_synthetic_pair(0, 100, 0.0)


def test_run_benchmark_oracle_augmented(params):
    pair = gen_synthetic_pair(5, 1000, 0.6, 0.0)
    clouds = {"r": pair.ref, "s": pair.src}
    rep = run_benchmark(params, [PairRecord("r", "s", pair.gt, pair.overlap)], clouds.__getitem__, augment="54",
                        opts=RegisterOptions(oracle_matches=pair.matches), jobs=2)
    assert len(rep.pairs[0]["configs"]) == 54
    assert rep.mean_rr == rep.robust_rr == 1.0
    assert max(c["rmse_m"] for c in rep.pairs[0]["configs"]) < 1e-6


def test_run_benchmark_jobs_independent(params, small_pair):
    clouds = {"r": small_pair.ref, "s": small_pair.src}
    recs = [PairRecord("r", "s", small_pair.gt, small_pair.overlap)] * 2
    a = run_benchmark(params, recs, clouds.__getitem__, jobs=1).to_dict()
    b = run_benchmark(params, recs, clouds.__getitem__, jobs=2).to_dict()
    assert a == b
    assert a["robust_rr"] <= a["mean_rr"]
    with pytest.raises(ValueError):
        run_benchmark(params, recs, clouds.__getitem__, augment="12")
