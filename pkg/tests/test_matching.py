import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from biequi.errors import EmptyFeatures, IndexOutOfRange, ShapeMismatch
from biequi.geometry import random_rotation
from biequi.matching import (FineMatchSet, coarse_correlation_topk, fine_cost_matrix, fine_nll_loss,
                             gram_invariant_feature, marginal_residual, mutual_topm, sinkhorn, sinkhorn_batch)


def plain_sinkhorn(scores, iters, dustbin):
    """Alternating row/column normalisation in the plain domain."""
    n, m = scores.shape
    z = np.full((n + 1, m + 1), float(dustbin))
    z[:n, :m] = scores
    k = np.exp(z)
    mu = np.r_[np.ones(n), m] / (n + m)
    nu = np.r_[np.ones(m), n] / (n + m)
    a, b = np.ones(n + 1), np.ones(m + 1)
    for _ in range(iters):
        a = mu / (k @ b)
        b = nu / (k.T @ a)
    return a[:, None] * k * b[None, :] * (n + m)


def test_coarse_topk_examples(rng):
    f = np.eye(4)
    cm = coarse_correlation_topk(f, f, 3)
    assert cm.pairs() == [(0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0)]
    cm = coarse_correlation_topk(rng.normal(size=(3, 5)), rng.normal(size=(2, 5)), 100)
    assert len(cm) == 6 and cm.margin == float("inf")
    assert np.all(np.diff(cm.scores) <= 0)
    with pytest.raises(EmptyFeatures):
        coarse_correlation_topk(np.zeros((0, 5)), f, 1)


def test_coarse_topk_brute_force(rng):
    fx, fy = rng.normal(size=(20, 8)), rng.normal(size=(30, 8))
    cm = coarse_correlation_topk(fx, fy, 50)
    s = (fx / np.linalg.norm(fx, axis=1, keepdims=True)) @ (fy / np.linalg.norm(fy, axis=1, keepdims=True)).T
    flat = sorted(((-s[i, j], i, j) for i in range(20) for j in range(30)))[:50]
    assert [(i, j) for _, i, j in flat] == list(zip(cm.rows.tolist(), cm.cols.tolist()))
    assert cm.margin == pytest.approx(-flat[-1][0] - np.sort(s.ravel())[::-1][50])


def test_gram_invariant_feature(rng):
    w = rng.normal(size=(16, 5))
    assert not gram_invariant_feature(np.zeros((3, 4)), w).any()
    fv = rng.normal(size=(10, 3, 4))
    r = random_rotation(rng)
    np.testing.assert_allclose(gram_invariant_feature(np.einsum("ab,nbc->nac", r, fv), w),
                               gram_invariant_feature(fv, w), atol=1e-12)
    e = np.array([[1.0], [0.0], [0.0]])
    w1 = rng.normal(size=(1, 3))
    np.testing.assert_allclose(gram_invariant_feature(e, w1), w1[0])
    with pytest.raises(ShapeMismatch):
        gram_invariant_feature(fv, w[:3])


def test_fine_cost_matrix(rng):
    d = 4
    np.testing.assert_allclose(fine_cost_matrix(np.eye(d), np.eye(d)), np.eye(d) / 2.0)
    assert not fine_cost_matrix(rng.normal(size=(3, d)), np.zeros((5, d))).any()
    with pytest.raises(ShapeMismatch):
        fine_cost_matrix(np.eye(3), np.eye(4))


def test_sinkhorn_examples():
    z = sinkhorn(np.zeros((1, 1)), 10, -np.inf)
    assert z[0, 0] == pytest.approx(1.0)
    z = sinkhorn(np.full((4, 4), 2.0), 100, 1.0)
    inner = z[:-1, :-1]
    np.testing.assert_allclose(inner, inner[0, 0], rtol=1e-12)
    with pytest.raises(ValueError):
        sinkhorn(np.zeros((2, 2)), 0, 1.0)


def test_sinkhorn_against_plain_oracle(rng):
    for shape in [(5, 7), (64, 80), (9, 3)]:
        s = rng.uniform(-10, 10, shape)
        z = sinkhorn(s, 100, 1.0)
        assert marginal_residual(z) < 1e-6
        np.testing.assert_allclose(z, plain_sinkhorn(s, 100, 1.0), atol=1e-8)


def test_sinkhorn_batch_matches_single(rng):
    mats = [rng.uniform(-3, 3, (n, m)) for n, m in [(3, 4), (10, 2), (1, 1), (7, 7)]]
    batch = sinkhorn_batch(mats, 100, 0.5)
    for s, z in zip(mats, batch):
        np.testing.assert_allclose(z, plain_sinkhorn(s, 100, 0.5), atol=1e-10)
    assert sinkhorn_batch([], 10) == []


def test_sinkhorn_without_dustbin_balanced(rng):
    s = rng.uniform(-2, 2, (4, 6))
    z = sinkhorn(s, 500, -np.inf)
    np.testing.assert_allclose(z[:-1].sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(z[:-1, :-1].sum(axis=0), 4 / 6, atol=1e-9)
    assert not z[-1].any() and not z[:, -1].any()


def test_mutual_topm_examples(rng):
    z = np.eye(5) + 0.01 * rng.uniform(size=(5, 5))
    m = mutual_topm(z, 1)
    np.testing.assert_array_equal(m.p, np.arange(5))
    np.testing.assert_array_equal(m.q, np.arange(5))
    z = rng.uniform(size=(3, 4))
    assert len(mutual_topm(z, 4)) == 12


def brute_mutual(z, m):
    out = set()
    for p in range(z.shape[0]):
        for q in range(z.shape[1]):
            row_rank = sum((z[p, j] > z[p, q]) or (z[p, j] == z[p, q] and j < q) for j in range(z.shape[1]))
            col_rank = sum((z[i, q] > z[p, q]) or (z[i, q] == z[p, q] and i < p) for i in range(z.shape[0]))
            if row_rank < m and col_rank < m:
                out.add((p, q))
    return out


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 8)), elements=st.sampled_from([0.0, 0.25, 0.5, 1.0])),
       st.integers(1, 4))
def test_mutual_topm_brute_force(z, m):
    got = mutual_topm(z, m)
    assert set(zip(got.p.tolist(), got.q.tolist())) == brute_mutual(z, m)
    np.testing.assert_array_equal(got.weight, z[got.p, got.q])


def test_fine_nll_loss(rng):
    z = np.zeros((4, 4))
    z[0, 0] = z[1, 1] = z[2, 3] = z[3, 2] = 1.0
    assert fine_nll_loss(z, [[0, 0], [1, 1]], [2], [2]) == 0.0
    n, m = 4, 5
    z = np.full((n + 1, m + 1), 1.0 / (m + 1))
    assert fine_nll_loss(z, [[0, 0], [1, 2], [3, 4]]) == pytest.approx(3 * np.log(m + 1))
    z = rng.uniform(0.01, 1, (6, 7))
    gt, ux, uy = [[0, 1], [2, 3]], [4], [5, 0]
    oracle = -(np.log(z[0, 1]) + np.log(z[2, 3]) + np.log(z[4, 6]) + np.log(z[5, 5]) + np.log(z[5, 0]))
    assert fine_nll_loss(z, gt, ux, uy) == pytest.approx(oracle, rel=1e-12)
    with pytest.raises(IndexOutOfRange):
        fine_nll_loss(z, [[9, 0]])


def test_fine_match_set_concat():
    a = FineMatchSet(np.array([1]), np.array([2]), np.array([0.5]))
    c = FineMatchSet.concat([a, FineMatchSet.empty(), a])
    assert len(c) == 2 and c.p.dtype == np.int64
    assert len(FineMatchSet.concat([])) == 0
