"""Coarse-correspondence transformer on superpoints.

Each block runs intra-cloud self-attention on both clouds, an invariant
scalar cross-attention whose scores double as the soft assignment between
the clouds, and an equivariant cross-attention over the resulting point
pairs. X is the reference cloud and Y the source cloud; the same weights
serve both directions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import vn_linear
from .errors import RowSumViolation, ShapeMismatch
from .primitives import align

ROW_SUM_TOL = 1e-9


def softmax_rows(e):
    e = e - e.max(axis=1, keepdims=True)
    w = np.exp(e)
    return w / w.sum(axis=1, keepdims=True)


def sinusoidal(x, dims):
    """Transformer-style sin/cos features of a scalar array: ``(...,) -> (..., dims)``."""
    half = dims // 2
    freq = np.exp(-np.log(10000.0) * np.arange(half) * 2.0 / dims)
    arg = x[..., None] * freq
    out = np.empty(x.shape + (dims,))
    out[..., 0::2] = np.sin(arg)
    out[..., 1::2] = np.cos(arg)
    return out


def geometric_embedding(points, w_geo, sigma_d=0.2, sigma_a_deg=15.0, n_anchors=3):
    """Rigid-motion invariant pairwise embedding ``r_ij``, shape ``(N, N, C_g)``.

    Built from the distance ``|x_i - x_j|`` and the angles between the edge
    ``x_i -> x_j`` and the edges from ``x_i`` to its ``n_anchors`` nearest
    other points. Missing anchors (tiny clouds) and zero-length edges
    contribute an angle of zero.
    """
    points = np.asarray(points, dtype=float)
    n = len(points)
    dims = w_geo.shape[1]
    if w_geo.shape[0] != (1 + n_anchors) * dims:
        raise ShapeMismatch(f"geometric embedding weights {w_geo.shape} do not match {n_anchors} anchors")
    diff = points[None, :, :] - points[:, None, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    parts = [sinusoidal(dist / sigma_d, dims)]
    masked = dist + np.diag(np.full(n, np.inf))
    order = np.argsort(masked, axis=1, kind="stable")
    for a in range(n_anchors):
        if a < n - 1:
            anchor = diff[np.arange(n), order[:, a]]
            cross = np.cross(diff, anchor[:, None, :])
            dot = np.einsum("ijk,ik->ij", diff, anchor)
            angle = np.degrees(np.arctan2(np.linalg.norm(cross, axis=-1), dot))
        else:
            angle = np.zeros((n, n))
        parts.append(sinusoidal(angle / sigma_a_deg, dims))
    return np.concatenate(parts, axis=-1) @ w_geo


def _weights(params, base):
    return {key.rsplit("/", 1)[1]: params[key] for key in params if key.startswith(base + "/")}


def intra_self_attention(r, fs, fv, w):
    """Self-attention within one cloud, scalar and vector channels in parallel.

    ``e_ij = (fs_i W_Q)(fs_j W_K + r_ij W_R)^T + (fv_i w_q).(fv_j w_k)``; the
    row softmax of ``e`` averages ``fs W_v`` and ``VN(fv)``, added back
    residually.

    Parameters
    ----------
    r : ndarray (N, N, C_g)
        Invariant geometric embedding.
    fs : ndarray (N, C)
    fv : ndarray (N, 3, C_v)
    w : dict
        ``w_q, w_k, w_r, w_v, wq_vec, wk_vec, vn``.
    """
    n, c = fs.shape
    if r.shape[:2] != (n, n) or fv.shape[0] != n or w["w_q"].shape[0] != c:
        raise ShapeMismatch("intra_self_attention: shapes disagree")
    q = fs @ w["w_q"]
    k = fs @ w["w_k"]
    e = q @ k.T + np.einsum("ic,ijc->ij", q, r @ w["w_r"])
    e = e + (fv @ w["wq_vec"]) @ (fv @ w["wk_vec"]).T
    s = softmax_rows(e)
    new_s = fs + s @ (fs @ w["w_v"])
    new_v = fv + np.einsum("ij,jac->iac", s, vn_linear(fv, w["vn"]))
    return new_s, new_v


def invariant_cross_attention(fs_x, fs_y, w):
    """Scaled dot-product cross-attention on scalars only.

    Returns the updated ``fs_x`` and the row-stochastic score matrix, which
    serves as the soft assignment from X to Y.
    """
    if fs_x.shape[1] != fs_y.shape[1] or w["w_q"].shape[0] != fs_x.shape[1]:
        raise ShapeMismatch("invariant_cross_attention: feature widths disagree")
    q = fs_x @ w["w_q"]
    k = fs_y @ w["w_k"]
    s = softmax_rows(q @ k.T / np.sqrt(q.shape[1]))
    return fs_x + s @ (fs_y @ w["w_v"]), s


@dataclass(frozen=True)
class PairFeatures:
    """Soft partners ``y_p = S Y`` and their averaged features."""

    points: np.ndarray
    scalars: np.ndarray
    vectors: np.ndarray


def build_pairs(points_y, fs_y, fv_y, s):
    s = np.asarray(s, dtype=float)
    if s.ndim != 2 or s.shape[1] != len(points_y):
        raise ShapeMismatch("build_pairs: assignment does not match the cloud")
    if np.any(s < 0) or np.abs(s.sum(axis=1) - 1.0).max() > ROW_SUM_TOL:
        raise RowSumViolation("soft assignment rows must be nonnegative and sum to 1")
    return PairFeatures(s @ points_y, s @ fs_y, np.einsum("ij,jac->iac", s, fv_y))


def equivariant_pair_cross_attention(fs_x, fv_x, pairs, w, rotation=None):
    """Cross-attention from X onto its soft partners in Y.

    Partner vector features are aligned once per pair, ``a_j =
    align(fv_x_j, fv_p_j)``, so they rotate with X; with ``rotation`` given
    they are instead rotated by that matrix (used once a pose estimate
    exists). Scores are ``(fs_x_i W_Q)(fs_p_j W_K)^T + (fv_x_i w_q).(a_j w_k)``.
    """
    n, c = fs_x.shape
    if pairs.scalars.shape != (n, c) or pairs.vectors.shape != fv_x.shape:
        raise ShapeMismatch("equivariant_pair_cross_attention: pair features do not match X")
    if rotation is None:
        aligned = align(fv_x, pairs.vectors, w["ln_gamma"], w["ln_beta"])
    else:
        aligned = np.einsum("ab,nbc->nac", rotation, pairs.vectors)
    q = fs_x @ w["w_q"]
    k = pairs.scalars @ w["w_k"]
    e = q @ k.T + (fv_x @ w["wq_vec"]) @ (aligned @ w["wk_vec"]).T
    s = softmax_rows(e)
    new_s = fs_x + s @ (pairs.scalars @ w["w_v"])
    new_v = fv_x + np.einsum("ij,jac->iac", s, vn_linear(aligned, w["vn"]))
    return new_s, new_v


@dataclass
class TransformerOutput:
    fs_x: np.ndarray
    fs_y: np.ndarray
    fv_x: np.ndarray
    fv_y: np.ndarray
    assignments: list


def transformer_block(params, base, state, r_x, r_y, pts_x, pts_y, rotation=None):
    fs_x, fv_x, fs_y, fv_y = state
    intra = _weights(params, f"{base}/intra")
    fs_x, fv_x = intra_self_attention(r_x, fs_x, fv_x, intra)
    fs_y, fv_y = intra_self_attention(r_y, fs_y, fv_y, intra)

    cross = _weights(params, f"{base}/cross")
    new_x, s_xy = invariant_cross_attention(fs_x, fs_y, cross)
    new_y, s_yx = invariant_cross_attention(fs_y, fs_x, cross)
    fs_x, fs_y = new_x, new_y

    pair = _weights(params, f"{base}/pair")
    pairs_x = build_pairs(pts_y, fs_y, fv_y, s_xy)
    pairs_y = build_pairs(pts_x, fs_x, fv_x, s_yx)
    back = None if rotation is None else rotation.T
    out_x = equivariant_pair_cross_attention(fs_x, fv_x, pairs_x, pair, rotation)
    out_y = equivariant_pair_cross_attention(fs_y, fv_y, pairs_y, pair, back)
    return (out_x[0], out_x[1], out_y[0], out_y[1]), (s_xy, s_yx)


def coarse_transformer(params, pts_x, feats_x, pts_y, feats_y, prefix="main", rotation=None):
    """Run ``n_blocks`` transformer blocks on the superpoints of both clouds.

    ``rotation`` (source to reference) replaces the learned alignment in the
    pair cross-attention; the returned scalars are invariant per-superpoint
    features for both clouds.
    """
    cfg = params.config
    w_geo = params[f"{prefix}/geo/w"]
    geo = dict(sigma_d=cfg.sigma_d, sigma_a_deg=cfg.sigma_a_deg, n_anchors=cfg.n_anchors)
    r_x = geometric_embedding(pts_x, w_geo, **geo)
    r_y = geometric_embedding(pts_y, w_geo, **geo)
    state = (feats_x.scalars, feats_x.vectors, feats_y.scalars, feats_y.vectors)
    assignments = []
    for b in range(cfg.n_blocks):
        state, s = transformer_block(params, f"{prefix}/block{b}", state, r_x, r_y, pts_x, pts_y, rotation)
        assignments.append(s)
    return TransformerOutput(state[0], state[2], state[1], state[3], assignments)
