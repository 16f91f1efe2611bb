"""Coarse superpoint matching and dense matching by optimal transport."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyFeatures, IndexOutOfRange, ShapeMismatch

LOG_CLAMP = 1e-30


@dataclass(frozen=True)
class CoarseMatches:
    """Top-K superpoint pairs by similarity, best first."""

    rows: np.ndarray
    cols: np.ndarray
    scores: np.ndarray
    margin: float

    def __len__(self):
        return len(self.rows)

    def pairs(self):
        return list(zip(self.rows.tolist(), self.cols.tolist(), self.scores.tolist()))


@dataclass(frozen=True)
class FineMatchSet:
    """Matches ``(p, q)`` between reference index ``p`` and source index
    ``q`` with soft-assignment weight."""

    p: np.ndarray
    q: np.ndarray
    weight: np.ndarray

    def __len__(self):
        return len(self.p)

    @classmethod
    def empty(cls):
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0))

    @classmethod
    def concat(cls, sets):
        sets = list(sets)
        if not sets:
            return cls.empty()
        return cls(np.concatenate([s.p for s in sets]).astype(np.int64),
                   np.concatenate([s.q for s in sets]).astype(np.int64),
                   np.concatenate([s.weight for s in sets]).astype(float))


def _normalize_rows(f):
    n = np.linalg.norm(f, axis=1, keepdims=True)
    return np.divide(f, n, out=np.zeros_like(f), where=n > 0)


def coarse_similarity(f_cx, f_cy):
    """Cosine similarity between every pair of superpoint features."""
    return _normalize_rows(np.asarray(f_cx, dtype=float)) @ _normalize_rows(np.asarray(f_cy, dtype=float)).T


def coarse_correlation_topk(f_cx, f_cy, k):
    """The ``k`` most similar superpoint pairs.

    Ties are broken lexicographically on ``(i, j)``. ``margin`` is the gap
    between the k-th and (k+1)-th score (``inf`` when everything is kept);
    the selected set is stable under perturbations smaller than it.
    """
    f_cx = np.asarray(f_cx, dtype=float)
    f_cy = np.asarray(f_cy, dtype=float)
    if f_cx.size == 0 or f_cy.size == 0:
        raise EmptyFeatures("coarse matching needs features for both clouds")
    if f_cx.shape[1] != f_cy.shape[1]:
        raise ShapeMismatch("coarse feature widths differ")
    if k < 1:
        raise ValueError("k must be at least 1")
    s = coarse_similarity(f_cx, f_cy).ravel()
    order = np.lexsort((np.arange(s.size), -s))
    k = min(k, s.size)
    top = order[:k]
    margin = float(s[order[k - 1]] - s[order[k]]) if k < s.size else float("inf")
    rows, cols = np.divmod(top, f_cy.shape[0])
    return CoarseMatches(rows.astype(np.int64), cols.astype(np.int64), s[top], margin)


def gram_invariant_feature(fv, w):
    """Rotation-invariant features ``vec(fv^T fv) @ w`` from vector
    channels ``(..., 3, C)``; ``w`` has shape ``(C*C, D)``."""
    fv = np.asarray(fv, dtype=float)
    c = fv.shape[-1]
    if w.shape[0] != c * c:
        raise ShapeMismatch(f"Gram feature weights {w.shape} need {c * c} rows")
    gram = np.einsum("...ac,...ad->...cd", fv, fv)
    return gram.reshape(fv.shape[:-2] + (c * c,)) @ w


def fine_cost_matrix(fx, fy):
    fx = np.asarray(fx, dtype=float)
    fy = np.asarray(fy, dtype=float)
    if fx.ndim != 2 or fy.ndim != 2 or fx.shape[1] != fy.shape[1]:
        raise ShapeMismatch(f"fine features {fx.shape} vs {fy.shape}")
    return fx @ fy.T / np.sqrt(fx.shape[1])


def _lse(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def sinkhorn_batch(score_list, iters=100, dustbin=1.0):
    """Log-domain Sinkhorn on a batch of score matrices, each augmented with
    a dustbin row and column holding the score ``dustbin``.

    Real rows and columns carry unit mass; the dustbin row carries the
    number of real columns and the dustbin column the number of real rows.

    Returns
    -------
    list of ndarray
        Assignment matrices of shape ``(n + 1, m + 1)``; every real row and
        every real column sums to one at convergence.
    """
    if iters < 1:
        raise ValueError("iters must be at least 1")
    if not score_list:
        return []
    dustbin = float(dustbin)
    shapes = [np.shape(s) for s in score_list]
    nmax = max(s[0] for s in shapes)
    mmax = max(s[1] for s in shapes)
    b = len(score_list)
    ninf = -np.inf
    z = np.full((b, nmax + 1, mmax + 1), ninf)
    log_mu = np.full((b, nmax + 1), ninf)
    log_nu = np.full((b, mmax + 1), ninf)
    for i, (s, (n, m)) in enumerate(zip(score_list, shapes)):
        z[i, :n, :m] = s
        z[i, :n, mmax] = dustbin
        z[i, nmax, :m] = dustbin
        z[i, nmax, mmax] = dustbin
        norm = -np.log(n + m)
        log_mu[i, :n] = norm
        log_mu[i, nmax] = np.log(m) + norm if m else ninf
        log_nu[i, :m] = norm
        log_nu[i, mmax] = np.log(n) + norm if n else ninf
    row_ok = np.isfinite(log_mu)
    col_ok = np.isfinite(log_nu)
    u = np.zeros_like(log_mu)
    v = np.zeros_like(log_nu)
    with np.errstate(invalid="ignore"):
        for _ in range(iters):
            u = np.where(row_ok, log_mu - _lse(z + v[:, None, :], axis=2), ninf)
            v = np.where(col_ok, log_nu - _lse(z + u[:, :, None], axis=1), ninf)
    out = []
    for i, (n, m) in enumerate(shapes):
        norm = -np.log(n + m)
        logp = z[i] + u[i][:, None] + v[i][None, :] - norm
        rows = np.r_[np.arange(n), nmax]
        cols = np.r_[np.arange(m), mmax]
        out.append(np.exp(logp[np.ix_(rows, cols)]))
    return out


def sinkhorn(scores, iters=100, dustbin=1.0):
    """Optimal-transport assignment for one ``(n, m)`` score matrix.

    A dustbin score of ``-inf`` disables the dustbin: the plain balanced
    problem (rows mass 1, columns mass ``n / m``) is solved and the dustbin
    row and column of the result are zero.
    """
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 2:
        raise ShapeMismatch("scores must be a matrix")
    if np.isneginf(dustbin):
        n, m = scores.shape
        if iters < 1:
            raise ValueError("iters must be at least 1")
        log_mu = np.zeros(n)
        log_nu = np.full(m, np.log(n / m))
        u = np.zeros(n)
        v = np.zeros(m)
        for _ in range(iters):
            u = log_mu - _lse(scores + v[None, :], axis=1)
            v = log_nu - _lse(scores + u[:, None], axis=0)
        out = np.zeros((n + 1, m + 1))
        out[:n, :m] = np.exp(scores + u[:, None] + v[None, :])
        return out
    return sinkhorn_batch([scores], iters, dustbin)[0]


def marginal_residual(z):
    """Largest deviation from one among real-row and real-column sums."""
    z = np.asarray(z, dtype=float)
    rows = np.abs(z[:-1].sum(axis=1) - 1.0)
    cols = np.abs(z[:, :-1].sum(axis=0) - 1.0)
    return float(max(rows.max(initial=0.0), cols.max(initial=0.0)))


def mutual_topm(z, m):
    """Entries ranking in the top ``m`` of both their row and their column
    (ties favour the lower index)."""
    z = np.asarray(z, dtype=float)
    if m < 1:
        raise ValueError("m must be at least 1")
    n_rows, n_cols = z.shape
    if z.size == 0:
        return FineMatchSet.empty()
    row_keep = np.zeros(z.shape, dtype=bool)
    col_keep = np.zeros(z.shape, dtype=bool)
    top_r = np.argsort(-z, axis=1, kind="stable")[:, :m]
    row_keep[np.arange(n_rows)[:, None], top_r] = True
    top_c = np.argsort(-z, axis=0, kind="stable")[:m, :]
    col_keep[top_c, np.arange(n_cols)[None, :]] = True
    p, q = np.nonzero(row_keep & col_keep)
    return FineMatchSet(p.astype(np.int64), q.astype(np.int64), z[p, q])


def fine_nll_loss(z, gt, unmatched_x=(), unmatched_y=()):
    """Negative log-likelihood of an assignment matrix ``z`` (with dustbins)
    against ground-truth matches ``gt`` and unmatched points of either side.
    Forward evaluation only."""
    z = np.asarray(z, dtype=float)
    n, m = z.shape[0] - 1, z.shape[1] - 1
    gt = np.asarray(gt, dtype=np.int64).reshape(-1, 2)
    ux = np.asarray(unmatched_x, dtype=np.int64).reshape(-1)
    uy = np.asarray(unmatched_y, dtype=np.int64).reshape(-1)
    if (gt.size and (gt.min() < 0 or gt[:, 0].max() >= n or gt[:, 1].max() >= m)) \
            or (ux.size and (ux.min() < 0 or ux.max() >= n)) \
            or (uy.size and (uy.min() < 0 or uy.max() >= m)):
        raise IndexOutOfRange("match index outside the assignment matrix")
    logz = np.log(np.maximum(z, LOG_CLAMP))
    return float(-logz[gt[:, 0], gt[:, 1]].sum() - logz[ux, m].sum() - logz[n, uy].sum())
