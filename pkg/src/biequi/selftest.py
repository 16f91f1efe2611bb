"""Numerical equivariance property suite.

Each check draws random rigid motions, evaluates a map before and after
moving its inputs and reports the largest relative discrepancy against the
predicted transformation of its outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import (build_pairs, coarse_transformer, equivariant_pair_cross_attention, geometric_embedding,
                        intra_self_attention, invariant_cross_attention, _weights)
from .backbone import FeatureSet, extract_features, rotate_vectors, vn_linear, vn_nonlinearity
from .geometry import apply_transform, compose, invert, random_rotation, random_transform, rotation_geodesic_angle
from .params import init_params
from .pointcloud import build_hierarchy
from .primitives import align, channel_tensor_product, phi_norm, svd_bieq

SUITES = ("primitives", "attention", "pipeline")


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self):
        return bool(self.error <= self.tol)

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: max error {self.error:.3e} (tol {self.tol:.1e})"


def rel_err(a, b):
    """Largest absolute difference, relative to the size of ``b`` when that
    exceeds one."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.abs(a - b).max() / max(1.0, np.abs(b).max()))


def sign_aligned_err(u1, v1, u2, v2):
    """Like :func:`rel_err` on ``(u, v)`` pairs, allowing each column pair
    ``(u_k, v_k)`` to flip sign jointly."""
    err = 0.0
    for k in range(u1.shape[-1]):
        plus = max(rel_err(u1[:, k], u2[:, k]), rel_err(v1[:, k], v2[:, k]))
        minus = max(rel_err(u1[:, k], -u2[:, k]), rel_err(v1[:, k], -v2[:, k]))
        err = max(err, min(plus, minus))
    return err


def gapped_matrix(rng, min_gap=0.1):
    """Random 3x3 matrix whose singular values are at least ``min_gap`` apart."""
    s = np.sort(rng.uniform(0.2, 2.0, 3))[::-1]
    while s[0] - s[1] <= min_gap or s[1] - s[2] <= min_gap:
        s = np.sort(rng.uniform(0.2, 2.0, 3))[::-1]
    return random_rotation(rng) @ np.diag(s) @ random_rotation(rng).T


def check_primitives(rng, tol, n=50, channels=8):
    errs = {"channel_tensor_product": 0.0, "phi_norm": 0.0, "svd_bieq (up to pair signs)": 0.0,
            "align": 0.0, "vn_linear": 0.0, "vn_nonlinearity": 0.0}
    gamma = rng.normal(size=channels)
    beta = rng.normal(size=channels)
    w = rng.normal(size=(channels, channels))
    for _ in range(n):
        r1, r2 = random_rotation(rng), random_rotation(rng)
        vx = rng.normal(size=(3, channels))
        vy = rng.normal(size=(3, channels))
        b = channel_tensor_product(vx, vy)
        moved = np.einsum("ab,bdc,ed->aec", r1, b, r2)
        errs["channel_tensor_product"] = max(errs["channel_tensor_product"],
                                             rel_err(channel_tensor_product(r1 @ vx, r2 @ vy), moved))
        bb = rng.normal(size=(3, 3, channels))
        lhs = phi_norm(np.einsum("ab,bdc,ed->aec", r1, bb, r2), gamma, beta)
        rhs = np.einsum("ab,bdc,ed->aec", r1, phi_norm(bb, gamma, beta), r2)
        errs["phi_norm"] = max(errs["phi_norm"], rel_err(lhs, rhs))
        f = gapped_matrix(rng)
        u, v = svd_bieq(f)
        u2, v2 = svd_bieq(r1 @ f @ r2.T)
        errs["svd_bieq (up to pair signs)"] = max(errs["svd_bieq (up to pair signs)"],
                                                  sign_aligned_err(u2, v2, r1 @ u, r2 @ v))
        errs["align"] = max(errs["align"], rel_err(align(r1 @ vx, r2 @ vy, gamma, beta),
                                                   r1 @ align(vx, vy, gamma, beta)))
        errs["vn_linear"] = max(errs["vn_linear"], rel_err(vn_linear(r1 @ vx, w), r1 @ vn_linear(vx, w)))
        errs["vn_nonlinearity"] = max(errs["vn_nonlinearity"],
                                      rel_err(vn_nonlinearity(r1 @ vx, w), r1 @ vn_nonlinearity(vx, w)))
    return [CheckResult(k, e, tol) for k, e in errs.items()]


def random_features(rng, n, cs, cv):
    return FeatureSet(rng.normal(size=(n, cs)), rng.normal(size=(n, 3, cv)))


def check_attention(rng, tol, params, n_motions=20, n_points=64):
    cfg = params.config
    cs, cv = cfg.scalar_dims[-1], cfg.vector_dims[-1]
    geo = dict(sigma_d=cfg.sigma_d, sigma_a_deg=cfg.sigma_a_deg, n_anchors=cfg.n_anchors)
    w_geo = params["main/geo/w"]
    intra = _weights(params, "main/block0/intra")
    cross = _weights(params, "main/block0/cross")
    pair = _weights(params, "main/block0/pair")
    px = rng.uniform(-1, 1, (n_points, 3))
    py = rng.uniform(-1, 1, (n_points + 5, 3))
    fx = random_features(rng, n_points, cs, cv)
    fy = random_features(rng, n_points + 5, cs, cv)
    r_x = geometric_embedding(px, w_geo, **geo)
    base_intra = intra_self_attention(r_x, fx.scalars, fx.vectors, intra)
    _, s_xy = invariant_cross_attention(fx.scalars, fy.scalars, cross)
    base_pair = equivariant_pair_cross_attention(fx.scalars, fx.vectors, build_pairs(py, fy.scalars, fy.vectors, s_xy),
                                                 pair)
    base_ct = coarse_transformer(params, px, fx, py, fy)
    errs = dict.fromkeys(["geometric_embedding", "intra_self_attention", "invariant_cross_attention",
                          "equivariant_pair_cross_attention", "coarse_transformer"], 0.0)
    for _ in range(n_motions):
        gx, gy = random_transform(rng), random_transform(rng)
        qx, qy = apply_transform(gx, px), apply_transform(gy, py)
        gfx, gfy = fx.rotated(gx.r), fy.rotated(gy.r)
        r_q = geometric_embedding(qx, w_geo, **geo)
        errs["geometric_embedding"] = max(errs["geometric_embedding"], rel_err(r_q, r_x))
        s, v = intra_self_attention(r_q, gfx.scalars, gfx.vectors, intra)
        errs["intra_self_attention"] = max(errs["intra_self_attention"], rel_err(s, base_intra[0]),
                                           rel_err(v, rotate_vectors(gx.r, base_intra[1])))
        _, s2 = invariant_cross_attention(gfx.scalars, gfy.scalars, cross)
        errs["invariant_cross_attention"] = max(errs["invariant_cross_attention"], rel_err(s2, s_xy))
        s, v = equivariant_pair_cross_attention(gfx.scalars, gfx.vectors,
                                                build_pairs(qy, gfy.scalars, gfy.vectors, s2), pair)
        errs["equivariant_pair_cross_attention"] = max(errs["equivariant_pair_cross_attention"],
                                                       rel_err(s, base_pair[0]),
                                                       rel_err(v, rotate_vectors(gx.r, base_pair[1])))
        ct = coarse_transformer(params, qx, gfx, qy, gfy)
        errs["coarse_transformer"] = max(errs["coarse_transformer"], rel_err(ct.fs_x, base_ct.fs_x),
                                         rel_err(ct.fs_y, base_ct.fs_y))
    return [CheckResult(k, e, tol) for k, e in errs.items()]


def check_pipeline(rng, tol, params, n_points=1200, n_motions=3):
    from .bench import gen_synthetic_pair
    from .registration import register_pair

    pair = gen_synthetic_pair(int(rng.integers(2 ** 31)), n_points, 0.6)
    h = build_hierarchy(pair.ref, params.config.base_voxel, params.config.n_levels, params.config.grid_frame)
    base_feats = extract_features(h, params)
    base = register_pair(params, pair.ref, pair.src)
    errs = {"backbone": 0.0, "register_pair bi-equivariance": 0.0, "register_pair permutation": 0.0}
    for _ in range(n_motions):
        g1, g2 = random_transform(rng), random_transform(rng)
        h2 = build_hierarchy(apply_transform(g1, pair.ref), params.config.base_voxel, params.config.n_levels,
                             params.config.grid_frame)
        for a, b in zip(extract_features(h2, params), base_feats):
            errs["backbone"] = max(errs["backbone"], rel_err(a.scalars, b.scalars),
                                   rel_err(a.vectors, rotate_vectors(g1.r, b.vectors)))
        res = register_pair(params, apply_transform(g1, pair.ref), apply_transform(g2, pair.src))
        if base.success and res.success:
            expect = compose(g1, compose(base.transform, invert(g2)))
            errs["register_pair bi-equivariance"] = max(
                errs["register_pair bi-equivariance"], rotation_geodesic_angle(res.transform.r, expect.r),
                float(np.linalg.norm(res.transform.t - expect.t)))
        elif base.success != res.success:
            errs["register_pair bi-equivariance"] = np.inf
    perm = rng.permutation(len(pair.src))
    res = register_pair(params, pair.ref, pair.src[perm])
    errs["register_pair permutation"] = rel_err(res.transform.as_matrix(), base.transform.as_matrix())
    return [CheckResult(k, e, tol) for k, e in errs.items()]


def run_selftest(suite="all", seed=0, tol=1e-5, params=None):
    """Run one suite (or ``"all"``) and return its list of
    :class:`CheckResult`."""
    if suite != "all" and suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}")
    params = params or init_params(seed=seed)
    rng = np.random.default_rng(seed)
    results = []
    if suite in ("primitives", "all"):
        results += check_primitives(rng, tol)
    if suite in ("attention", "all"):
        results += check_attention(rng, tol, params)
    if suite in ("pipeline", "all"):
        results += check_pipeline(rng, tol, params)
    return results
