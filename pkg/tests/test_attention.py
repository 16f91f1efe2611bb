import numpy as np
import pytest

from biequi.attention import (PairFeatures, _weights, build_pairs, coarse_transformer,
                              equivariant_pair_cross_attention, geometric_embedding, intra_self_attention,
                              invariant_cross_attention, softmax_rows, transformer_block)
from biequi.backbone import FeatureSet, rotate_vectors, vn_linear
from biequi.errors import RowSumViolation, ShapeMismatch
from biequi.geometry import apply_transform, random_transform
from biequi.selftest import rel_err

N = 64


@pytest.fixture(scope="module")
def setup(params):
    rng = np.random.default_rng(5)
    cfg = params.config
    cs, cv = cfg.scalar_dims[-1], cfg.vector_dims[-1]
    px, py = rng.uniform(-1, 1, (N, 3)), rng.uniform(-1, 1, (N + 3, 3))
    fx = FeatureSet(rng.normal(size=(N, cs)), rng.normal(size=(N, 3, cv)))
    fy = FeatureSet(rng.normal(size=(N + 3, cs)), rng.normal(size=(N + 3, 3, cv)))
    return px, py, fx, fy


def embed(params, pts):
    cfg = params.config
    return geometric_embedding(pts, params["main/geo/w"], cfg.sigma_d, cfg.sigma_a_deg, cfg.n_anchors)


def test_softmax_rows_stochastic(rng):
    s = softmax_rows(rng.normal(size=(10, 7)) * 100)
    np.testing.assert_allclose(s.sum(axis=1), 1, atol=1e-12)


def test_geometric_embedding_invariance(params, setup, rng):
    px = setup[0]
    r = embed(params, px)
    assert r.shape == (N, N, params.config.geo_dims)
    for _ in range(20):
        assert rel_err(embed(params, apply_transform(random_transform(rng), px)), r) < 1e-6


def test_geometric_embedding_diagonal_and_tiny(params):
    r = embed(params, np.array([[0.0, 0, 0], [1.0, 0, 0]]))
    np.testing.assert_allclose(r[0, 0], r[1, 1])
    assert embed(params, np.zeros((1, 3))).shape == (1, 1, params.config.geo_dims)


def test_geometric_embedding_distance_component(params):
    """Two configurations with equal distance matrices (a reflection) share
    the distance part of the embedding."""
    from biequi.attention import sinusoidal
    pts = np.random.default_rng(1).normal(size=(6, 3))
    mirrored = pts * [1, 1, -1]
    d1 = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    d2 = np.linalg.norm(mirrored[:, None] - mirrored[None], axis=-1)
    np.testing.assert_allclose(sinusoidal(d1 / 0.2, 8), sinusoidal(d2 / 0.2, 8), atol=1e-12)


def test_intra_self_attention_equivariance(params, setup, rng):
    px, _, fx, _ = setup
    w = _weights(params, "main/block0/intra")
    base = intra_self_attention(embed(params, px), fx.scalars, fx.vectors, w)
    for _ in range(20):
        t = random_transform(rng)
        s, v = intra_self_attention(embed(params, apply_transform(t, px)), fx.scalars, rotate_vectors(t.r, fx.vectors), w)
        assert rel_err(s, base[0]) < 1e-6
        assert rel_err(v, rotate_vectors(t.r, base[1])) < 1e-6


def test_intra_self_attention_single_point(params, setup):
    _, _, fx, _ = setup
    w = _weights(params, "main/block0/intra")
    s, v = intra_self_attention(np.zeros((1, 1, params.config.geo_dims)), fx.scalars[:1], fx.vectors[:1], w)
    np.testing.assert_allclose(s, fx.scalars[:1] + fx.scalars[:1] @ w["w_v"])
    np.testing.assert_allclose(v, fx.vectors[:1] + vn_linear(fx.vectors[:1], w["vn"]))


def test_intra_self_attention_zero_vectors_scalar_only(params, setup):
    px, _, fx, _ = setup
    w = _weights(params, "main/block0/intra")
    r = embed(params, px)
    s, _ = intra_self_attention(r, fx.scalars, np.zeros_like(fx.vectors), w)
    q = fx.scalars @ w["w_q"]
    e = np.einsum("ic,ijc->ij", q, fx.scalars[None] @ w["w_k"] + r @ w["w_r"])
    a = np.exp(e - e.max(axis=1, keepdims=True))
    a /= a.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(s, fx.scalars + a @ (fx.scalars @ w["w_v"]), rtol=1e-9, atol=1e-9)


def test_invariant_cross_attention(params, setup):
    _, _, fx, fy = setup
    w = _weights(params, "main/block0/cross")
    _, s = invariant_cross_attention(fx.scalars, fy.scalars[:1], w)
    np.testing.assert_array_equal(s, 1.0)
    same = np.repeat(fy.scalars[:1], 5, axis=0)
    _, s = invariant_cross_attention(fx.scalars, same, w)
    np.testing.assert_allclose(s, 0.2, atol=1e-12)
    with pytest.raises(ShapeMismatch):
        invariant_cross_attention(fx.scalars, fy.scalars[:, :3], w)


def test_build_pairs(rng):
    py = rng.normal(size=(4, 3))
    fs, fv = rng.normal(size=(4, 2)), rng.normal(size=(4, 3, 2))
    onehot = np.eye(4)[[2, 0]]
    pf = build_pairs(py, fs, fv, onehot)
    np.testing.assert_array_equal(pf.points, py[[2, 0]])
    np.testing.assert_array_equal(pf.vectors, fv[[2, 0]])
    pf = build_pairs(py, fs, fv, np.full((1, 4), 0.25))
    np.testing.assert_allclose(pf.points[0], py.mean(axis=0))
    s = softmax_rows(rng.normal(size=(3, 4)))
    t = rng.normal(size=3)
    np.testing.assert_allclose(build_pairs(py + t, fs, fv, s).points, build_pairs(py, fs, fv, s).points + t,
                               atol=1e-12)
    with pytest.raises(RowSumViolation):
        build_pairs(py, fs, fv, np.full((1, 4), 0.3))


def test_pair_cross_attention_equivariance(params, setup, rng):
    px, py, fx, fy = setup
    cross = _weights(params, "main/block0/cross")
    pair = _weights(params, "main/block0/pair")
    _, s = invariant_cross_attention(fx.scalars, fy.scalars, cross)
    base = equivariant_pair_cross_attention(fx.scalars, fx.vectors, build_pairs(py, fy.scalars, fy.vectors, s), pair)
    for _ in range(20):
        gx, gy = random_transform(rng), random_transform(rng)
        pf = build_pairs(apply_transform(gy, py), fy.scalars, rotate_vectors(gy.r, fy.vectors), s)
        out = equivariant_pair_cross_attention(fx.scalars, rotate_vectors(gx.r, fx.vectors), pf, pair)
        assert rel_err(out[0], base[0]) < 1e-6
        assert rel_err(out[1], rotate_vectors(gx.r, base[1])) < 1e-6


def test_pair_cross_attention_zero_vectors(params, setup):
    _, _, fx, fy = setup
    pair = _weights(params, "main/block0/pair")
    zx = np.zeros_like(fx.vectors)
    pf = PairFeatures(np.zeros((N, 3)), fy.scalars[:N], np.zeros_like(zx))
    s, v = equivariant_pair_cross_attention(fx.scalars, zx, pf, pair)
    e = (fx.scalars @ pair["w_q"]) @ (pf.scalars @ pair["w_k"]).T
    np.testing.assert_allclose(s, fx.scalars + softmax_rows(e) @ (pf.scalars @ pair["w_v"]), rtol=1e-9, atol=1e-9)
    assert not v.any()


def test_pair_cross_attention_single_point(params, setup):
    _, _, fx, fy = setup
    pair = _weights(params, "main/block0/pair")
    pf = PairFeatures(np.zeros((1, 3)), fy.scalars[:1], fy.vectors[:1])
    s, _ = equivariant_pair_cross_attention(fx.scalars[:1], fx.vectors[:1], pf, pair)
    np.testing.assert_allclose(s, fx.scalars[:1] + fy.scalars[:1] @ pair["w_v"])


def test_block_matches_manual_composition(params, setup):
    px, py, fx, fy = setup
    out = coarse_transformer(params, px, fx, py, fy)
    r_x, r_y = embed(params, px), embed(params, py)
    state = (fx.scalars, fx.vectors, fy.scalars, fy.vectors)
    for b in range(params.config.n_blocks):
        intra = _weights(params, f"main/block{b}/intra")
        cross = _weights(params, f"main/block{b}/cross")
        pair = _weights(params, f"main/block{b}/pair")
        sx, vx = intra_self_attention(r_x, state[0], state[1], intra)
        sy, vy = intra_self_attention(r_y, state[2], state[3], intra)
        nx, sxy = invariant_cross_attention(sx, sy, cross)
        ny, syx = invariant_cross_attention(sy, sx, cross)
        ox = equivariant_pair_cross_attention(nx, vx, build_pairs(py, ny, vy, sxy), pair)
        oy = equivariant_pair_cross_attention(ny, vy, build_pairs(px, nx, vx, syx), pair)
        block, _ = transformer_block(params, f"main/block{b}", state, r_x, r_y, px, py)
        state = (ox[0], ox[1], oy[0], oy[1])
        for a, c in zip(block, state):
            np.testing.assert_array_equal(a, c)
    np.testing.assert_array_equal(out.fs_x, state[0])
    np.testing.assert_array_equal(out.fs_y, state[2])


def test_coarse_transformer_invariance(params, setup, rng):
    px, py, fx, fy = setup
    base = coarse_transformer(params, px, fx, py, fy)
    for _ in range(3):
        gx, gy = random_transform(rng), random_transform(rng)
        out = coarse_transformer(params, apply_transform(gx, px), fx.rotated(gx.r), apply_transform(gy, py),
                                 fy.rotated(gy.r))
        assert rel_err(out.fs_x, base.fs_x) < 1e-5
        assert rel_err(out.fs_y, base.fs_y) < 1e-5
        for s_xy, _ in out.assignments:
            np.testing.assert_allclose(s_xy.sum(axis=1), 1, atol=1e-9)


def test_coarse_transformer_zero_values_pass_through(params, setup):
    px, py, fx, fy = setup
    zeroed = {k: np.zeros(params[k].shape) for k in params
              if k.startswith("main/block") and k.rsplit("/", 1)[1] in ("w_v", "vn")}
    out = coarse_transformer(params.replaced(zeroed), px, fx, py, fy)
    np.testing.assert_array_equal(out.fs_x, fx.scalars)
    np.testing.assert_array_equal(out.fv_y, fy.vectors)


def test_coarse_transformer_with_rotation(params, setup, rng):
    """With a pose estimate the output stays invariant when the estimate
    moves with the clouds."""
    px, py, fx, fy = setup
    r0 = random_transform(rng).r
    base = coarse_transformer(params, px, fx, py, fy, rotation=r0)
    gx, gy = random_transform(rng), random_transform(rng)
    out = coarse_transformer(params, apply_transform(gx, px), fx.rotated(gx.r), apply_transform(gy, py),
                             fy.rotated(gy.r), rotation=gx.r @ r0 @ gy.r.T)
    assert rel_err(out.fs_x, base.fs_x) < 1e-5
