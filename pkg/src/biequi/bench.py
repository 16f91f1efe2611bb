"""Evaluation metrics, the rotation-augmentation robustness protocol and a
synthetic scan-pair generator.

Ground-truth transforms map source points into the reference frame.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyCorrespondences, IncompleteGrid, OverlapInfeasible
from .geometry import (RigidTransform, apply_transform, axis_angle_rotation, compose, invert, random_rotation,
                       random_transform, rotation_geodesic_angle)
from .pointcloud import as_points
from .registration import RegisterOptions, iterative_refine, register_pair

OVERLAP_RADIUS = 0.1
INLIER_RADIUS = 0.1
RECALL_RMSE = 0.2
AUGMENT_ANGLES = (np.pi / 2, np.pi, 3 * np.pi / 2)
N_AXES = 9
BOX = 2.0


def metric_rmse(est, gt, src):
    """RMSE between ``src`` moved by ``gt^-1 est`` and ``src`` itself."""
    src = as_points(getattr(src, "points", src))
    err = apply_transform(compose(invert(gt), est), src) - src
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))


def metrics_rre_rte(est, gt):
    """Rotation error in degrees and translation error in metres."""
    return float(np.degrees(rotation_geodesic_angle(est.r, gt.r))), float(np.linalg.norm(est.t - gt.t))


def inlier_ratio(corr, points_x, points_y, gt, tau=INLIER_RADIUS):
    """Fraction of matches ``(p, q)`` with ``|gt(y_q) - x_p| < tau``."""
    if len(corr) == 0:
        raise EmptyCorrespondences("inlier ratio of an empty match set")
    x = as_points(getattr(points_x, "points", points_x))[corr.p]
    y = as_points(getattr(points_y, "points", points_y))[corr.q]
    return float(np.mean(np.linalg.norm(apply_transform(gt, y) - x, axis=1) < tau))


def registration_recall(rmse, threshold=RECALL_RMSE):
    rmse = np.asarray(rmse, dtype=float).ravel()
    if rmse.size == 0:
        raise ValueError("registration recall needs at least one value")
    return float(np.mean(rmse < threshold))


@dataclass(frozen=True)
class AugmentConfig:
    """Rotations applied (about the origin) to the reference and source."""

    which: str
    ref_rotation: np.ndarray
    src_rotation: np.ndarray

    def apply(self, ref, src, gt):
        """Perturbed ``(ref, src, gt)``."""
        a = RigidTransform(self.ref_rotation, np.zeros(3))
        b = RigidTransform(self.src_rotation, np.zeros(3))
        return apply_transform(a, ref), apply_transform(b, src), compose(a, compose(gt, invert(b)))

    @property
    def rotation(self):
        return self.ref_rotation if self.which == "ref" else self.src_rotation


def fibonacci_axes(n, seed):
    """``n`` near-uniform rotation axes (golden spiral over a hemisphere, so
    no two axes are close to antiparallel), turned by a rotation drawn from
    ``seed``."""
    i = np.arange(n) + 0.5
    z = 1.0 - i / n
    phi = np.pi * (1.0 + np.sqrt(5.0)) * i
    rho = np.sqrt(1.0 - z * z)
    axes = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
    return axes @ random_rotation(np.random.default_rng(seed)).T


def make_augment_configs(seed=0, mode="split"):
    """The 54 pose perturbations per pair.

    ``mode="split"`` rotates one cloud at a time: 9 axes times 3 angles on
    the reference, then the same 27 rotations on the source. ``mode="joint"``
    rotates both clouds in every configuration, the reference by ``R_i`` and
    the source by ``R_i`` (first 27) or ``R_i^T`` (last 27).
    """
    rots = [axis_angle_rotation(axis, angle) for axis in fibonacci_axes(N_AXES, seed) for angle in AUGMENT_ANGLES]
    eye = np.eye(3)
    if mode == "split":
        return [AugmentConfig("ref", r, eye) for r in rots] + [AugmentConfig("src", eye, r) for r in rots]
    if mode == "joint":
        return [AugmentConfig("both", r, r) for r in rots] + [AugmentConfig("both", r, r.T) for r in rots]
    raise ValueError(f"unknown augment mode {mode!r}")


@dataclass
class RobustReport:
    pairs: list
    mean_rr: float
    robust_rr: float
    mean_ir: float
    robust_ir: float
    buckets: list = field(default_factory=list)

    def to_dict(self):
        return {"pairs": self.pairs, "mean_rr": self.mean_rr, "robust_rr": self.robust_rr,
                "mean_ir": self.mean_ir, "robust_ir": self.robust_ir, "buckets": self.buckets}


def _grid(values, name):
    try:
        arr = np.array(values, dtype=float)
    except ValueError as exc:
        raise IncompleteGrid(f"{name}: ragged pair/config grid") from exc
    if arr.ndim != 2 or arr.size == 0 or np.isnan(arr).any():
        raise IncompleteGrid(f"{name}: every pair needs a value for every config")
    return arr


def robust_report(recall, ir, overlaps=None, pairs=None):
    """Aggregate a pair-by-config grid of recall indicators and inlier ratios.

    Parameters
    ----------
    recall, ir : array_like (P, C)
        Missing entries (``None``/NaN or ragged rows) raise
        :class:`IncompleteGrid`.
    overlaps : sequence of float or None, optional
        Known overlap per pair; pairs with one are grouped into buckets of
        width 0.1.
    pairs : list of dict, optional
        Per-pair detail copied into the report.
    """
    rec = _grid(recall, "recall")
    irs = _grid(ir, "inlier ratio")
    if rec.shape != irs.shape:
        raise IncompleteGrid("recall and inlier-ratio grids differ in shape")
    buckets = []
    if overlaps is not None:
        ov = np.array([np.nan if o is None else o for o in overlaps], dtype=float)
        idx = np.minimum(np.floor(ov * 10 + 1e-9), 9)
        for b in range(10):
            sel = idx == b
            if sel.any():
                buckets.append({"lo": b / 10, "hi": (b + 1) / 10, "n_pairs": int(sel.sum()),
                                "mean_rr": float(rec[sel].mean()), "robust_rr": float(rec[sel].min(axis=1).mean()),
                                "mean_ir": float(irs[sel].mean()), "robust_ir": float(irs[sel].min(axis=1).mean())})
    return RobustReport(pairs or [], float(rec.mean()), float(rec.min(axis=1).mean()),
                        float(irs.mean()), float(irs.min(axis=1).mean()), buckets)


def _surface(rng):
    n_bumps = int(rng.integers(5, 11))
    centers = rng.uniform(0.0, BOX, size=(n_bumps, 2))
    heights = rng.uniform(-0.3, 0.3, size=n_bumps)
    widths = rng.uniform(0.15, 0.45, size=n_bumps)

    def height(xy):
        d2 = np.sum((xy[:, None, :] - centers[None]) ** 2, axis=-1)
        return np.exp(-d2 / (2 * widths ** 2)) @ heights

    return height


def measured_overlap(ref, src, gt, radius=OVERLAP_RADIUS):
    """Fraction of reference points with a gt-aligned source point within
    ``radius``."""
    d, _ = cKDTree(apply_transform(gt, src)).query(ref, k=1)
    return float(np.mean(d < radius))


@dataclass(frozen=True)
class SyntheticPair:
    ref: np.ndarray
    src: np.ndarray
    gt: RigidTransform
    matches: np.ndarray
    overlap: float

    def __iter__(self):
        return iter((self.ref, self.src, self.gt, self.matches))


def gen_synthetic_pair(seed, n_points, overlap_target, noise_sigma=0.005, max_tries=100):
    """Two overlapping noisy scans of a random smooth surface.

    The surface is a sum of 5 to 10 Gaussian bumps over a 2 m square. The
    reference keeps the slab ``x <= w`` and the source ``x >= 2 - w``; both
    draw the same samples inside the shared strip, which yields the planted
    matches. Noise is drawn independently per cloud, and ``gt`` maps the
    source onto the reference.

    Returns
    -------
    SyntheticPair
        Unpacks as ``(ref, src, gt, matches)``; ``matches`` rows are
        ``(ref_index, src_index)``.
    """
    if not 0.0 < overlap_target <= 1.0:
        raise ValueError("overlap_target must lie in (0, 1]")
    if n_points < 3:
        raise ValueError("n_points must be at least 3")
    rng = np.random.default_rng(seed)
    height = _surface(rng)
    gt = random_transform(rng)
    full = overlap_target >= 1.0
    width = BOX if full else min(BOX, (BOX - OVERLAP_RADIUS + 0.01) / (2.0 - overlap_target))
    for _ in range(max_tries):
        n_shared = n_points if full else int(round(n_points * max(2 * width - BOX, 0.0) / width))
        n_own = n_points - n_shared

        def sample(n, lo, hi):
            xy = np.column_stack([rng.uniform(lo, hi, n), rng.uniform(0.0, BOX, n)])
            return np.column_stack([xy, height(xy)])

        shared = sample(n_shared, BOX - width, width)
        ref_own = sample(n_own, 0.0, BOX - width)
        src_own = sample(n_own, width, BOX)
        ref_world = np.vstack([shared, ref_own])
        src_world = np.vstack([shared, src_own])
        ref_perm = rng.permutation(n_points)
        src_perm = rng.permutation(n_points)
        ref_world = ref_world[ref_perm]
        src_world = src_world[src_perm]
        ref_pos = np.argsort(ref_perm)
        src_pos = np.argsort(src_perm)
        matches = np.column_stack([ref_pos[:n_shared], src_pos[:n_shared]]).astype(np.int64)
        order = np.argsort(matches[:, 0], kind="stable")
        matches = matches[order]

        ref = ref_world
        src = apply_transform(invert(gt), src_world)
        if noise_sigma > 0:
            ref = ref + rng.normal(0.0, noise_sigma, ref.shape)
            src = src + rng.normal(0.0, noise_sigma, src.shape)
        overlap = 1.0 if full else measured_overlap(ref, src, gt)
        if abs(overlap - overlap_target) <= 0.1:
            return SyntheticPair(ref, src, gt, matches, overlap)
    raise OverlapInfeasible(f"could not reach overlap {overlap_target} in {max_tries} tries")


@dataclass(frozen=True)
class PairRecord:
    ref: str
    src: str
    gt: RigidTransform
    overlap: float | None = None


def default_jobs():
    try:
        return max(1, int(os.environ.get("BQF_NUM_JOBS", "1")))
    except ValueError:
        return 1


def _evaluate(params, ref, src, gt, opts, refine):
    res = register_pair(params, ref, src, opts)
    if res.success and refine:
        res = iterative_refine(params, res, ref, src, refine, opts)
    row = {"success": res.success, "rmse_m": None, "rre_deg": None, "rte_m": None, "ir": 0.0, "recall": False}
    if res.success:
        row["rmse_m"] = metric_rmse(res.transform, gt, src)
        row["rre_deg"], row["rte_m"] = metrics_rre_rte(res.transform, gt)
        row["recall"] = row["rmse_m"] < RECALL_RMSE
        if len(res.correspondences):
            row["ir"] = inlier_ratio(res.correspondences, res.ref_points, res.src_points, gt)
    else:
        row["failure"] = res.failure
    return row


def run_benchmark(params, records, load, augment="none", augment_mode="split", seed=0, jobs=None,
                  refine=0, opts=None):
    """Register every pair under every pose configuration.

    Parameters
    ----------
    records : list of PairRecord
    load : callable
        Maps a path to an ``(N, 3)`` array.
    augment : {"none", "54"}
    jobs : int, optional
        Worker threads (defaults to ``BQF_NUM_JOBS`` or 1). Results are
        collected by ``(pair, config)`` index, so the report does not depend
        on it.
    """
    opts = opts or RegisterOptions(seed=seed)
    if augment == "none":
        configs = [AugmentConfig("none", np.eye(3), np.eye(3))]
    elif augment == "54":
        configs = make_augment_configs(seed, augment_mode)
    else:
        raise ValueError(f"unknown augment setting {augment!r}")
    clouds = [(load(r.ref), load(r.src)) for r in records]
    tasks = [(i, j) for i in range(len(records)) for j in range(len(configs))]

    def work(task):
        i, j = task
        ref, src, gt = configs[j].apply(*clouds[i], records[i].gt)
        return _evaluate(params, ref, src, gt, opts, refine)

    jobs = jobs or default_jobs()
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(work, tasks))
    else:
        rows = [work(t) for t in tasks]

    grid = [rows[i * len(configs):(i + 1) * len(configs)] for i in range(len(records))]
    pairs = [{"ref": r.ref, "src": r.src, "overlap": r.overlap, "configs": g} for r, g in zip(records, grid)]
    recall = [[float(c["recall"]) for c in g] for g in grid]
    ir = [[c["ir"] for c in g] for g in grid]
    overlaps = [r.overlap for r in records]
    return robust_report(recall, ir, overlaps if any(o is not None for o in overlaps) else None, pairs)
