"""End-to-end pair registration: hierarchy, backbone, coarse transformer,
top-K superpoint candidates, optimal-transport fine matching, one weighted
Procrustes fit per candidate and local-to-global selection.

Transforms map source points into the reference frame.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .attention import coarse_transformer
from .backbone import extract_features, standardize
from .errors import DegenerateConfiguration, NoValidCandidate
from .geometry import RigidTransform, apply_transform, compose, invert, rotation_geodesic_angle, weighted_procrustes
from .matching import (FineMatchSet, coarse_correlation_topk, fine_cost_matrix, gram_invariant_feature,
                       marginal_residual, mutual_topm, sinkhorn_batch)
from .pointcloud import as_points, assign_fine_to_coarse, build_hierarchy, invariant_subsample


@dataclass(frozen=True)
class RegisterOptions:
    """Per-call options.

    ``oracle_matches`` holds planted ``(ref_index, src_index)`` pairs into
    the input clouds; when given, learned matching is bypassed and the
    planted pairs are fed through Sinkhorn, mutual top-M and local-to-global
    selection. ``flip_diagnostic`` also registers the swapped pair and
    reports how far that estimate is from the inverse.
    """

    seed: int = 0
    max_points: int | None = None
    top_k: int | None = None
    oracle_matches: np.ndarray | None = None
    oracle_score: float = 10.0
    flip_diagnostic: bool = False


@dataclass
class Candidate:
    ref_superpoint: int
    src_superpoint: int
    score: float
    transform: RigidTransform | None = None
    n_matches: int = 0
    inlier_score: float = 0.0
    dropped: str | None = None


@dataclass
class PairContext:
    ref_index: np.ndarray
    src_index: np.ndarray
    ref_hierarchy: object
    src_hierarchy: object
    ref_features: list | None = None
    src_features: list | None = None


@dataclass
class RegistrationResult:
    transform: RigidTransform | None
    success: bool
    candidates: list
    correspondences: FineMatchSet
    ref_points: np.ndarray
    src_points: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    failure: str | None = None
    context: PairContext | None = field(default=None, repr=False)

    def correspondence_points(self):
        """Matched ``(reference, source)`` coordinates, one row per match."""
        c = self.correspondences
        return self.ref_points[c.p], self.src_points[c.q]


def local_candidate(matches, ref_points, src_points):
    """Weighted Procrustes fit of one candidate's matches (source onto
    reference)."""
    if len(matches) < 3:
        raise DegenerateConfiguration(f"{len(matches)} matches; at least 3 are needed")
    return weighted_procrustes(src_points[matches.q], ref_points[matches.p], matches.weight)


def _residuals(transforms, ref_xyz, src_xyz):
    rs = np.stack([t.r for t in transforms])
    ts = np.stack([t.t for t in transforms])
    pred = np.einsum("cab,nb->cna", rs, src_xyz) + ts[:, None, :]
    return np.linalg.norm(pred - ref_xyz[None], axis=-1)


def local_to_global(candidates, matches, ref_points, src_points, tau=0.1, refits=1):
    """Pick the candidate transform with the largest weighted inlier count
    over all matches, then re-fit it on its inliers.

    Parameters
    ----------
    candidates : list of RigidTransform or None
        ``None`` marks a dropped candidate.
    matches : FineMatchSet
        Union of the fine matches of all candidates.
    tau : float
        Acceptance radius in metres.

    Returns
    -------
    transform : RigidTransform
    best : int
        Index of the winning candidate (lowest index on ties).
    scores : ndarray
        Weighted inlier count per candidate (``-inf`` for dropped ones).
    """
    valid = [i for i, t in enumerate(candidates) if t is not None]
    if not valid:
        raise NoValidCandidate("no candidate transform survived")
    scores = np.full(len(candidates), -np.inf)
    ref_xyz = ref_points[matches.p]
    src_xyz = src_points[matches.q]
    if len(matches):
        res = _residuals([candidates[i] for i in valid], ref_xyz, src_xyz)
        scores[valid] = ((res < tau) * matches.weight[None, :]).sum(axis=1)
    else:
        scores[valid] = 0.0
    best = int(np.argmax(scores))
    transform = candidates[best]
    for _ in range(refits):
        if not len(matches):
            break
        inl = _residuals([transform], ref_xyz, src_xyz)[0] < tau
        try:
            transform = weighted_procrustes(src_xyz[inl], ref_xyz[inl], matches.weight[inl])
        except DegenerateConfiguration:
            break
    return transform, best, scores


def _prepare(params, ref, src, opts, with_features=True):
    cfg = params.config
    ref = as_points(ref)
    src = as_points(src)
    if len(ref) == 0 or len(src) == 0:
        raise ValueError("both clouds must be nonempty")
    max_points = opts.max_points or cfg.max_points
    ridx = invariant_subsample(ref, max_points, opts.seed, cfg.grid_frame)
    sidx = invariant_subsample(src, max_points, opts.seed, cfg.grid_frame)
    rh = build_hierarchy(ref[ridx], cfg.base_voxel, cfg.n_levels, cfg.grid_frame)
    sh = build_hierarchy(src[sidx], cfg.base_voxel, cfg.n_levels, cfg.grid_frame)
    ctx = PairContext(ridx, sidx, rh, sh)
    if with_features:
        _ensure_features(params, ctx)
    return ctx


def _ensure_features(params, ctx):
    if ctx.ref_features is None:
        ctx.ref_features = [standardize(f) for f in extract_features(ctx.ref_hierarchy, params)]
        ctx.src_features = [standardize(f) for f in extract_features(ctx.src_hierarchy, params)]


def _fit_candidates(params, prefix, cands, ref_pts, src_pts, diag, positive_only=False):
    """Sinkhorn, mutual top-M and a Procrustes fit for every candidate.

    ``cands`` holds ``(Candidate, ref_indices, src_indices, score_matrix)``.
    With ``positive_only`` only pairs with a positive score are kept.
    """
    cfg = params.config
    zs = sinkhorn_batch([c[3] for c in cands], cfg.sinkhorn_iters, params[f"{prefix}/fine/dustbin"][0])
    residual = 0.0
    sets = []
    transforms = []
    for (cand, nx, ny, score), z in zip(cands, zs):
        residual = max(residual, marginal_residual(z))
        local = mutual_topm(z[:-1, :-1], cfg.mutual_m)
        if positive_only:
            keep = score[local.p, local.q] > 0
            local = FineMatchSet(local.p[keep], local.q[keep], local.weight[keep])
        mk = FineMatchSet(nx[local.p], ny[local.q], local.weight)
        cand.n_matches = len(mk)
        try:
            cand.transform = local_candidate(mk, ref_pts, src_pts)
        except DegenerateConfiguration as exc:
            cand.dropped = f"DegenerateConfiguration: {exc}"
        sets.append(mk)
        transforms.append(cand.transform)
    diag["sinkhorn_residual"] = residual
    return transforms, FineMatchSet.concat(sets)


def _failure(reason, ref_pts, src_pts, candidates, diag, ctx):
    return RegistrationResult(None, False, candidates, FineMatchSet.empty(), ref_pts, src_pts,
                              diag, failure=reason, context=ctx)


def _fine_features(feats, w_u):
    f = np.concatenate([gram_invariant_feature(feats.vectors, w_u), feats.scalars], axis=1)
    n = np.linalg.norm(f, axis=1, keepdims=True)
    return f / np.maximum(n, 1e-12)


def _learned_candidates(params, ctx, prefix, k, rotation, diag):
    cfg = params.config
    rh, sh = ctx.ref_hierarchy, ctx.src_hierarchy
    t0 = time.perf_counter()
    out = coarse_transformer(params, rh.superpoints, ctx.ref_features[-1], sh.superpoints,
                             ctx.src_features[-1], prefix=prefix, rotation=rotation)
    diag["timing"]["coarse_transformer"] = time.perf_counter() - t0
    coarse = coarse_correlation_topk(out.fs_x, out.fs_y, k)
    diag["topk_margin"] = coarse.margin

    part_x = assign_fine_to_coarse(rh.dense, rh.superpoints)
    part_y = assign_fine_to_coarse(sh.dense, sh.superpoints)
    w_u = params[f"{prefix}/fine/w_u"]
    fx = _fine_features(ctx.ref_features[1], w_u)
    fy = _fine_features(ctx.src_features[1], w_u)
    cands = []
    for i, j, score in coarse.pairs():
        cand = Candidate(i, j, score)
        nx, ny = part_x[i], part_y[j]
        if len(nx) == 0 or len(ny) == 0:
            cand.dropped = "empty neighbourhood"
        cands.append((cand, nx, ny, fine_cost_matrix(fx[nx], fy[ny]) if cand.dropped is None else None))
    return cands


def _oracle_candidates(params, ctx, opts):
    planted = np.asarray(opts.oracle_matches, dtype=np.int64).reshape(-1, 2)
    rh = ctx.ref_hierarchy
    r_pos = np.full(int(max(ctx.ref_index.max(), planted[:, 0].max(initial=0))) + 1, -1)
    r_pos[ctx.ref_index] = np.arange(len(ctx.ref_index))
    s_pos = np.full(int(max(ctx.src_index.max(), planted[:, 1].max(initial=0))) + 1, -1)
    s_pos[ctx.src_index] = np.arange(len(ctx.src_index))
    a = r_pos[planted[:, 0]]
    b = s_pos[planted[:, 1]]
    keep = (a >= 0) & (b >= 0)
    a, b = a[keep], b[keep]
    cands = []
    if not len(a):
        return cands
    groups = assign_fine_to_coarse(rh.levels[0][a], rh.superpoints)
    for c, members in enumerate(groups.groups):
        if len(members) == 0:
            continue
        nx, ix = np.unique(a[members], return_inverse=True)
        ny, iy = np.unique(b[members], return_inverse=True)
        scores = np.full((len(nx), len(ny)), -opts.oracle_score)
        scores[ix, iy] = opts.oracle_score
        cands.append((Candidate(c, -1, float(len(members))), nx, ny, scores))
    return cands


def _estimate(params, ctx, prefix, opts, rotation=None):
    cfg = params.config
    diag = {"timing": {}, "stage": prefix}
    oracle = opts.oracle_matches is not None
    if oracle:
        ref_pts, src_pts = ctx.ref_hierarchy.levels[0], ctx.src_hierarchy.levels[0]
    else:
        ref_pts, src_pts = ctx.ref_hierarchy.dense, ctx.src_hierarchy.dense
    k = cfg.top_k if opts.top_k is None else opts.top_k
    if not oracle and k < 1:
        return _failure("NoValidCandidate: empty candidate set", ref_pts, src_pts, [], diag, ctx)
    if oracle:
        cands = _oracle_candidates(params, ctx, opts)
    else:
        _ensure_features(params, ctx)
        cands = _learned_candidates(params, ctx, prefix, k, rotation, diag)
    candidates = [c[0] for c in cands]
    live = [c for c in cands if c[0].dropped is None]
    t0 = time.perf_counter()
    transforms, matches = _fit_candidates(params, prefix, live, ref_pts, src_pts, diag, positive_only=oracle)
    diag["timing"]["fine_matching"] = time.perf_counter() - t0
    diag["n_candidates"] = len(candidates)
    diag["n_valid_candidates"] = sum(t is not None for t in transforms)
    try:
        transform, best, scores = local_to_global(transforms, matches, ref_pts, src_pts,
                                                  cfg.acceptance_radius, cfg.lgr_refits)
    except NoValidCandidate as exc:
        return _failure(f"NoValidCandidate: {exc}", ref_pts, src_pts, candidates, diag, ctx)
    for cand, score in zip([c[0] for c in live], scores):
        cand.inlier_score = float(score) if np.isfinite(score) else 0.0
    diag["best_candidate"] = candidates.index(live[best][0])
    return RegistrationResult(transform, True, candidates, matches, ref_pts, src_pts, diag, context=ctx)


def register_pair(params, ref, src, opts=None):
    """Estimate the transform taking ``src`` into the frame of ``ref``.

    Parameters
    ----------
    params : ParamSet
    ref, src : array_like (N, 3) or PointCloud
    opts : RegisterOptions, optional

    Returns
    -------
    RegistrationResult
        ``success`` is False (with ``failure`` set) when no candidate
        survives; valid clouds never raise for that reason.
    """
    opts = opts or RegisterOptions()
    ref = getattr(ref, "points", ref)
    src = getattr(src, "points", src)
    t0 = time.perf_counter()
    ctx = _prepare(params, ref, src, opts, with_features=opts.oracle_matches is None)
    prep = time.perf_counter() - t0
    result = _estimate(params, ctx, "main", opts)
    result.diagnostics["timing"]["prepare"] = prep
    result.diagnostics["timing"]["total"] = time.perf_counter() - t0
    if opts.flip_diagnostic and result.success:
        result.diagnostics["flip_discrepancy"] = _flip_discrepancy(params, ref, src, opts, result.transform)
    return result


def _flip_discrepancy(params, ref, src, opts, transform):
    # swapping the clouds should invert the estimate; nothing enforces it
    oracle = opts.oracle_matches
    if oracle is not None:
        oracle = np.asarray(oracle, dtype=np.int64).reshape(-1, 2)[:, ::-1]
    flipped = register_pair(params, src, ref, replace(opts, oracle_matches=oracle, flip_diagnostic=False))
    if not flipped.success:
        return None
    back = invert(flipped.transform)
    return {"rotation_rad": rotation_geodesic_angle(back.r, transform.r),
            "translation_m": float(np.linalg.norm(back.t - transform.t))}


def iterative_refine(params, prev, ref, src, steps=None, opts=None):
    """Re-run the matcher ``steps`` times with the current estimate rotating
    the source vector features in place of the learned alignment.

    Every step appends to ``diagnostics["refinement_trace"]``; a failed step
    keeps the previous estimate.
    """
    opts = opts or RegisterOptions()
    steps = params.config.refine_steps if steps is None else steps
    if steps == 0:
        return prev
    if not prev.success:
        raise ValueError("refinement needs a successful initial registration")
    ref = as_points(getattr(ref, "points", ref))
    src = as_points(getattr(src, "points", src))
    ctx = prev.context or _prepare(params, ref, src, opts, with_features=opts.oracle_matches is None)
    current = prev
    trace = []
    for step in range(steps):
        if params.config.refine_moves_points:
            moved_ctx = _prepare(params, ref, apply_transform(current.transform, src), opts,
                                 with_features=opts.oracle_matches is None)
            res = _estimate(params, moved_ctx, "refine", opts)
            if res.success:
                back = invert(current.transform)
                res = replace(res, transform=compose(res.transform, current.transform),
                              src_points=apply_transform(back, res.src_points), context=ctx)
        else:
            res = _estimate(params, ctx, "refine", opts, rotation=current.transform.r)
        if res.success:
            current = res
        trace.append({"step": step, "success": res.success, "matrix": current.transform.to_list()})
    diagnostics = dict(current.diagnostics)
    diagnostics["refinement_trace"] = trace
    return replace(current, diagnostics=diagnostics)
