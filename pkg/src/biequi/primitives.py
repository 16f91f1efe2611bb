"""Bi-equivariant building blocks.

Under independent rotations ``(R1, R2)`` of two vector-feature sets:

* :func:`channel_tensor_product` is output bi-equivariant:
  ``b(R1 x, R2 y) = R1 b(x, y) R2^T`` per channel;
* :func:`phi_norm` is input/output bi-equivariant;
* :func:`svd_bieq` is input bi-equivariant: ``F -> R1 F R2^T`` sends its
  outputs to ``(R1 first, R2 second)``, up to the sign of each singular
  vector pair, which no function of ``F`` can fix equivariantly;
* :func:`align` rotates with its first argument only.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateSpectrum, ShapeMismatch
from .geometry import svd3

EPS = 1e-12
LN_EPS = 1e-5


def channel_tensor_product(vx, vy):
    """Per-channel outer products: ``(..., 3, C) x (..., 3, C) -> (..., 3, 3, C)``."""
    vx = np.asarray(vx, dtype=float)
    vy = np.asarray(vy, dtype=float)
    if vx.shape != vy.shape or vx.shape[-2] != 3:
        raise ShapeMismatch(f"channel_tensor_product: {vx.shape} vs {vy.shape}")
    return np.einsum("...ac,...bc->...abc", vx, vy)


def layer_norm(x, gamma, beta, axis=-1):
    mu = x.mean(axis=axis, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=axis, keepdims=True)
    return gamma * (x - mu) / np.sqrt(var + LN_EPS) + beta


def phi_norm(b, gamma, beta):
    """Keep each channel's direction ``F / ||F||`` and replace its Frobenius
    norm by the layer-normalised vector of norms across channels.

    Zero channels map to zero.
    """
    b = np.asarray(b, dtype=float)
    norms = np.sqrt(np.sum(b * b, axis=(-3, -2)))
    scale = layer_norm(norms, gamma, beta)
    return b * (scale / np.maximum(norms, EPS))[..., None, None, :]


def svd_bieq(f, sigma_fn=None, sigma_fn2=None, gap_tol=1e-6, check_gaps=True):
    """``F -> (U sigma_fn(S), V sigma_fn2(S))`` for ``F = U S V^T``.

    The nonlinearities act elementwise on the singular values (identity by
    default).

    Raises
    ------
    DegenerateSpectrum
        When two singular values are closer than ``gap_tol`` and
        ``check_gaps`` is set; the singular vectors are not unique then.
    """
    res = svd3(f)
    s = res.sigma
    if check_gaps and (s[0] - s[1] <= gap_tol or s[1] - s[2] <= gap_tol):
        raise DegenerateSpectrum(f"singular values {s} have a gap below {gap_tol}")
    s1 = s if sigma_fn is None else np.asarray(sigma_fn(s), dtype=float)
    s2 = s if sigma_fn2 is None else np.asarray(sigma_fn2(s), dtype=float)
    return res.u * s1, res.v * s2


def align(vx, vy, gamma, beta):
    """Rotate ``vy`` channel-wise into the frame of ``vx``:
    ``out_c = phi(vx_c vy_c^T) vy_c``."""
    b = phi_norm(channel_tensor_product(vx, vy), gamma, beta)
    return np.einsum("...abc,...bc->...ac", b, np.asarray(vy, dtype=float))


def fused_map(vx, vy, gammas, betas, mix=None, sigma_fn=None, sigma_fn2=None):
    """Tensor product, ``len(gammas)`` rounds of :func:`phi_norm`, an optional
    channel mixing ``mix`` of shape ``(C, C_out)``, then :func:`svd_bieq` per
    channel.

    Single-channel tensor products have rank one; mixing channels first
    gives full-rank matrices whose three singular pairs all carry signal.

    Returns arrays ``(C, 3, 3)``: the left factors move with ``vx`` and the
    right factors with ``vy``, so the composite fuses both inputs while
    staying equivariant.
    """
    b = channel_tensor_product(vx, vy)
    for gamma, beta in zip(gammas, betas):
        b = phi_norm(b, gamma, beta)
    if mix is not None:
        b = b @ np.asarray(mix, dtype=float)
    firsts, seconds = [], []
    for c in range(b.shape[-1]):
        first, second = svd_bieq(b[..., c], sigma_fn, sigma_fn2, check_gaps=False)
        firsts.append(first)
        seconds.append(second)
    return np.stack(firsts), np.stack(seconds)
