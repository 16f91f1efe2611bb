"""Rigid-body algebra on SO(3)/SE(3), a 3x3 Jacobi SVD and the weighted
Procrustes solver.

Rotations are plain ``(3, 3)`` float arrays; :class:`RigidTransform` bundles a
rotation with a translation and acts on row-stacked points ``(N, 3)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConfiguration, NonConvergence

ROTATION_TOL = 1e-9
SVD_MAX_SWEEPS = 30

_PAIRS = ((0, 1), (0, 2), (1, 2))


def check_rotation(m, tol=ROTATION_TOL):
    """Return ``m`` as a float array, raising ``ValueError`` unless it is a
    proper rotation within ``tol``."""
    m = np.asarray(m, dtype=float)
    if m.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("rotation has non-finite entries")
    if np.abs(m @ m.T - np.eye(3)).max() > tol:
        raise ValueError("rotation is not orthogonal")
    if abs(np.linalg.det(m) - 1.0) > tol:
        raise ValueError("rotation determinant is not +1")
    return m


@dataclass(frozen=True)
class RigidTransform:
    """Rotation ``r`` followed by translation ``t``: ``p -> r @ p + t``."""

    r: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        r = np.array(self.r, dtype=float)
        t = np.array(self.t, dtype=float).reshape(3)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=float)
        if m.shape == (16,):
            m = m.reshape(4, 4)
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.r
        m[:3, 3] = self.t
        return m

    def to_list(self):
        """16 numbers, row-major, last row ``0 0 0 1``."""
        return [float(x) for x in self.as_matrix().ravel()]

    def __matmul__(self, other):
        if isinstance(other, RigidTransform):
            return compose(self, other)
        return apply_transform(self, other)

    def inverse(self):
        return invert(self)

    def allclose(self, other, atol=1e-9):
        return bool(np.allclose(self.r, other.r, rtol=0, atol=atol)
                    and np.allclose(self.t, other.t, rtol=0, atol=atol))


def compose(a, b):
    """Transform equal to applying ``b`` first, then ``a``."""
    return RigidTransform(a.r @ b.r, a.r @ b.t + a.t)


def invert(t):
    rt = t.r.T
    return RigidTransform(rt, -rt @ t.t)


def apply_transform(t, pts):
    pts = np.asarray(pts, dtype=float)
    return pts @ t.r.T + t.t


def rotation_geodesic_angle(a, b):
    """Angle in ``[0, pi]`` of the relative rotation ``a.T @ b``.

    Mathematically ``arccos((trace(a.T b) - 1) / 2)``; evaluated through
    ``atan2`` of the skew part so small angles keep full precision.
    """
    m = np.asarray(a, dtype=float).T @ np.asarray(b, dtype=float)
    c = np.trace(m) - 1.0
    s = math.sqrt((m[2, 1] - m[1, 2]) ** 2 + (m[0, 2] - m[2, 0]) ** 2
                  + (m[1, 0] - m[0, 1]) ** 2)
    return math.atan2(s, c)


def axis_angle_rotation(axis, angle):
    """Rodrigues formula; ``axis`` need not be normalised."""
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0:
        raise ValueError("rotation axis is zero")
    k = axis / n
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + math.sin(angle) * kx + (1.0 - math.cos(angle)) * (kx @ kx)


def quaternion_to_rotation(q):
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def random_rotation(rng):
    """Haar-uniform rotation from a normalised Gaussian quaternion."""
    return quaternion_to_rotation(rng.standard_normal(4))


def random_transform(rng, translation_scale=1.0):
    return RigidTransform(random_rotation(rng),
                          translation_scale * rng.standard_normal(3))


@dataclass(frozen=True)
class Svd3Result:
    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray
    converged: bool = True
    sweeps: int = 0

    def reconstruct(self):
        return (self.u * self.sigma) @ self.v.T


def _complete_basis(u, rank):
    if rank == 0:
        return np.eye(3)
    if rank == 1:
        a = u[:, 0]
        helper = np.zeros(3)
        helper[np.argmin(np.abs(a))] = 1.0
        b = helper - (helper @ a) * a
        u[:, 1] = b / np.linalg.norm(b)
    u[:, 2] = np.cross(u[:, 0], u[:, 1])
    return u


def apply_sign_convention(u, v):
    """Flip column pairs so the largest-magnitude entry of each ``u`` column
    is nonnegative (first index wins ties)."""
    u = u.copy()
    v = v.copy()
    for k in range(3):
        i = int(np.argmax(np.abs(u[:, k])))
        if u[i, k] < 0:
            u[:, k] = -u[:, k]
            v[:, k] = -v[:, k]
    return u, v


def svd3(f, strict=False, sign_convention=True):
    """Singular value decomposition of a 3x3 matrix by one-sided (Hestenes)
    Jacobi rotations, which implicitly diagonalise ``f.T @ f``.

    Parameters
    ----------
    f : array_like, shape (3, 3)
    strict : bool
        Raise :class:`NonConvergence` instead of returning the best iterate
        with ``converged=False`` when the sweep cap is hit.
    sign_convention : bool
        Apply :func:`apply_sign_convention` to the factors.

    Returns
    -------
    Svd3Result
        ``u @ diag(sigma) @ v.T == f`` with ``sigma`` sorted descending.
    """
    a = np.array(f, dtype=float)
    if a.shape != (3, 3):
        raise ValueError(f"svd3 expects a 3x3 matrix, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("svd3 input has non-finite entries")
    v = np.eye(3)
    eps = 1e-15
    converged = False
    sweeps = 0
    for sweeps in range(1, SVD_MAX_SWEEPS + 1):
        rotated = False
        for p, q in _PAIRS:
            ap = a[:, p]
            aq = a[:, q]
            alpha = ap @ ap
            beta = aq @ aq
            gamma = ap @ aq
            if gamma == 0.0 or abs(gamma) <= eps * math.sqrt(alpha * beta):
                continue
            rotated = True
            zeta = (beta - alpha) / (2.0 * gamma)
            if abs(zeta) > 1e150:
                tan = 0.5 / zeta
            else:
                tan = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
            c = 1.0 / math.sqrt(1.0 + tan * tan)
            s = c * tan
            new_p = c * ap - s * aq
            new_q = s * ap + c * aq
            a[:, p] = new_p
            a[:, q] = new_q
            vp = v[:, p].copy()
            v[:, p] = c * vp - s * v[:, q]
            v[:, q] = s * vp + c * v[:, q]
        if not rotated:
            converged = True
            break
    if not converged and strict:
        raise NonConvergence(f"svd3 did not converge in {SVD_MAX_SWEEPS} sweeps")

    sigma = np.linalg.norm(a, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    a = a[:, order]
    v = v[:, order]
    smax = sigma[0]
    rank = int(np.sum(sigma > max(smax * 1e-13, 1e-300)))
    u = np.zeros((3, 3))
    for k in range(rank):
        u[:, k] = a[:, k] / sigma[k]
    if rank < 3:
        u = _complete_basis(u, rank)
    if sign_convention:
        u, v = apply_sign_convention(u, v)
    return Svd3Result(u, sigma, v, converged, sweeps)


def project_to_rotation(m):
    """Nearest rotation in Frobenius norm (polar factor with det guard)."""
    res = svd3(m)
    d = np.ones(3)
    d[2] = np.sign(np.linalg.det(res.u @ res.v.T)) or 1.0
    return (res.u * d) @ res.v.T


def weighted_procrustes(p, q, weights=None, return_diagnostics=False):
    """Rigid transform minimising ``sum_i w_i * ||R p_i + T - q_i||^2``.

    Parameters
    ----------
    p, q : array_like, shape (N, 3)
        Paired points; the result maps ``p`` onto ``q``.
    weights : array_like, shape (N,), optional
        Nonnegative weights (uniform when omitted).

    Raises
    ------
    DegenerateConfiguration
        Fewer than three positively weighted pairs, or a weighted
        cross-covariance of rank < 2 (collinear or coincident points).
    """
    p = np.asarray(p, dtype=float).reshape(-1, 3)
    q = np.asarray(q, dtype=float).reshape(-1, 3)
    if p.shape != q.shape:
        raise ValueError(f"paired point arrays differ in shape: {p.shape} vs {q.shape}")
    w = np.ones(len(p)) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    if len(w) != len(p):
        raise ValueError("one weight per pair is required")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    if np.count_nonzero(w > 0) < 3:
        raise DegenerateConfiguration("need at least three positively weighted pairs")
    wsum = w.sum()
    pc = (w @ p) / wsum
    qc = (w @ q) / wsum
    pd = p - pc
    qd = q - qc
    h = (qd * w[:, None]).T @ pd
    res = svd3(h)
    s = res.sigma
    if s[0] <= 1e-300 or s[1] <= 1e-10 * s[0]:
        raise DegenerateConfiguration("weighted cross-covariance has rank < 2")
    d = np.ones(3)
    det = np.linalg.det(res.u @ res.v.T)
    if det < 0:
        d[2] = -1.0
    r = (res.u * d) @ res.v.T
    out = RigidTransform(r, qc - r @ pc)
    if return_diagnostics:
        return out, {"reflection_guard": bool(det < 0), "sigma": s}
    return out
