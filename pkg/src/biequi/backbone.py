"""Hierarchical feature extractor with invariant scalar channels and
rotation-equivariant vector channels.

Vector features are stored as ``(N, 3, C)`` arrays: one 3-vector per channel.
A rotation ``R`` acts on axis ``-2``; every map here commutes with that
action, and only relative point positions ever enter, so translations drop
out exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .errors import EmptyLevel, ShapeMismatch
from .pointcloud import knn

LEAKY_SLOPE = 0.01
EPS = 1e-12


@dataclass(frozen=True)
class FeatureSet:
    scalars: np.ndarray
    vectors: np.ndarray

    def __len__(self):
        return len(self.scalars)

    def rotated(self, r):
        return FeatureSet(self.scalars, rotate_vectors(r, self.vectors))


def rotate_vectors(r, v):
    return np.einsum("ab,...bc->...ac", r, v)


def leaky_relu(x):
    return np.where(x >= 0, x, LEAKY_SLOPE * x)


def vn_linear(v, w):
    """Vector-neuron linear map: mixes channels, never coordinates."""
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    if v.shape[-2] != 3 or v.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"vn_linear: features {v.shape} vs weights {w.shape}")
    return v @ w


def vn_nonlinearity(v, w_gate):
    """Direction-gated rectifier.

    Each channel ``v_c`` is compared with a learned direction
    ``q_c = (v @ w_gate)[:, c]``; it passes unchanged when ``<v_c, q_c> >= 0``
    and otherwise loses its component along ``q_c``.
    """
    q = vn_linear(v, w_gate)
    dot = np.sum(v * q, axis=-2, keepdims=True)
    qn = np.maximum(np.linalg.norm(q, axis=-2, keepdims=True), EPS)
    qhat = q / qn
    along = np.sum(v * qhat, axis=-2, keepdims=True)
    return np.where(dot >= 0, v, v - along * qhat)


def hybrid_layer(points, neighbors, feats, w_s, b_s, w_v, gate):
    """One message-passing step on scalar and vector channels.

    Messages are averaged over the neighbour list. Scalars see the
    neighbour's scalars, the edge length and the channel-wise inner products
    of the two points' vector features; vectors see the neighbour's vectors
    plus the edge vector as one extra channel. Both branches are residual.
    """
    points = np.asarray(points, dtype=float)
    neighbors = np.asarray(neighbors)
    fs, fv = feats.scalars, feats.vectors
    n, cs = fs.shape
    cv = fv.shape[-1]
    if fv.shape != (n, 3, cv) or neighbors.shape[0] != n:
        raise ShapeMismatch("hybrid_layer: points, neighbours and features disagree")
    if w_s.shape != (2 * cs + 1 + cv, cs) or w_v.shape != (cv + 1, cv):
        raise ShapeMismatch("hybrid_layer: weight shapes do not match feature widths")
    if neighbors.size and (neighbors.min() < 0 or neighbors.max() >= n):
        raise ShapeMismatch("hybrid_layer: neighbour index out of range")
    k = neighbors.shape[1]
    rel = points[neighbors] - points[:, None, :]
    dist = np.sqrt(np.sum(rel * rel, axis=-1, keepdims=True))
    fv_j = fv[neighbors]
    gram = np.einsum("nac,nkac->nkc", fv, fv_j)
    msg = np.concatenate([np.broadcast_to(fs[:, None, :], (n, k, cs)), fs[neighbors], dist, gram], axis=-1)
    new_s = leaky_relu(msg.mean(axis=1) @ w_s + b_s) + fs

    vec_msg = np.concatenate([fv_j, rel[..., None]], axis=-1).mean(axis=1)
    new_v = vn_nonlinearity(vn_linear(vec_msg, w_v), gate) + fv
    return FeatureSet(new_s, new_v)


def standardize(feats):
    """Per-cloud feature standardisation.

    Scalars are centred and scaled per channel over the points; vector
    channels are divided by their root-mean-square norm over the points.
    Both statistics are rotation invariant and ignore point order, so the
    contract of :class:`FeatureSet` is preserved.
    """
    fs = feats.scalars - feats.scalars.mean(axis=0)
    fs = fs / np.maximum(fs.std(axis=0), EPS)
    rms = np.sqrt(np.mean(np.sum(feats.vectors ** 2, axis=-2), axis=0))
    return FeatureSet(fs, feats.vectors / np.maximum(rms, EPS))


def edge_features(points, neighbors, k):
    """Mean-centred edge vectors to the neighbours as ``k`` vector channels,
    zero-padded when fewer neighbours exist."""
    n = len(points)
    rel = points[neighbors] - points[:, None, :]
    rel = rel - rel.mean(axis=1, keepdims=True)
    out = np.zeros((n, 3, k))
    out[:, :, :rel.shape[1]] = rel.transpose(0, 2, 1)
    return out


def pool_to_parents(parent, n_parents, values):
    """Mean of child rows per parent (child order fixed by index)."""
    n = len(parent)
    counts = np.bincount(parent, minlength=n_parents).astype(float)
    mat = sparse.csr_matrix((1.0 / counts[parent], (parent, np.arange(n))), shape=(n_parents, n))
    flat = values.reshape(n, -1)
    return np.asarray(mat @ flat).reshape((n_parents,) + values.shape[1:])


def level_neighbors(points, k):
    return knn(points, points, min(k, len(points)))


def extract_features(hierarchy, params, neighbors=None):
    """Features for every level of ``hierarchy``, fine to coarse.

    Parameters
    ----------
    hierarchy : CloudHierarchy
    params : ParamSet
    neighbors : list of ndarray, optional
        Precomputed kNN index matrices per level.

    Returns
    -------
    list of FeatureSet
    """
    cfg = params.config
    if len(hierarchy.levels) != cfg.n_levels:
        raise ShapeMismatch(f"hierarchy has {len(hierarchy.levels)} levels, config expects {cfg.n_levels}")
    if any(len(level) == 0 for level in hierarchy.levels):
        raise EmptyLevel("hierarchy has an empty level")
    if neighbors is None:
        neighbors = [level_neighbors(pts, cfg.k_neighbors) for pts in hierarchy.levels]
    pts0 = hierarchy.levels[0]
    fs = np.ones((len(pts0), 1)) @ params["backbone/lift_s"]
    fv = vn_linear(edge_features(pts0, neighbors[0], cfg.k_neighbors), params["backbone/init_vn"])
    feats = FeatureSet(fs, fv)
    out = []
    for lvl, pts in enumerate(hierarchy.levels):
        if lvl > 0:
            parent = hierarchy.parents[lvl - 1]
            pooled_s = pool_to_parents(parent, len(pts), feats.scalars)
            pooled_v = pool_to_parents(parent, len(pts), feats.vectors)
            feats = FeatureSet(pooled_s @ params[f"backbone/t{lvl - 1}/w_s"],
                               vn_linear(pooled_v, params[f"backbone/t{lvl - 1}/w_v"]))
        for m in range(cfg.layers_per_level):
            base = f"backbone/l{lvl}/h{m}"
            feats = hybrid_layer(pts, neighbors[lvl], feats, params[f"{base}/w_s"], params[f"{base}/b_s"],
                                 params[f"{base}/w_v"], params[f"{base}/gate"])
        out.append(feats)
    return out
