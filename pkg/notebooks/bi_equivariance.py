"""
Independent motions of the two scans
====================================

Moving the reference by ``g1`` and the source by ``g2`` changes the
estimate ``T`` to ``g1 T g2^-1`` up to rounding, for any weights.
"""

import numpy as np

import biequi as bq

rng = np.random.default_rng(0)
params = bq.init_params(seed=0)
pair = bq.gen_synthetic_pair(seed=1, n_points=1500, overlap_target=0.6)
base = bq.register_pair(params, pair.ref, pair.src).transform

for _ in range(3):
    g1, g2 = bq.random_transform(rng), bq.random_transform(rng)
    moved = bq.register_pair(params, bq.apply_transform(g1, pair.ref), bq.apply_transform(g2, pair.src))
    expect = bq.compose(g1, bq.compose(base, bq.invert(g2)))
    print("rotation gap %.1e rad  translation gap %.1e m" % (
        bq.rotation_geodesic_angle(moved.transform.r, expect.r), np.linalg.norm(moved.transform.t - expect.t)))

###############################################################################
# Shuffling the points of either scan leaves the estimate unchanged.

perm = rng.permutation(len(pair.src))
shuffled = bq.register_pair(params, pair.ref, pair.src[perm]).transform
print("permutation gap %.1e" % np.abs(shuffled.as_matrix() - base.as_matrix()).max())

###############################################################################
# The SVD block is equivariant only up to a joint sign flip of each column
# pair ``(u_k, v_k)``. Rotating by ``R1 = U D U^T`` and ``R2 = V D V^T`` with
# ``D = diag(1, -1, -1)`` fixes ``F`` yet flips two singular vector pairs, so
# no deterministic sign rule can do better.

f = rng.normal(size=(3, 3))
u, v = bq.svd_bieq(f)
basis = bq.svd3(f)
d = np.diag([1.0, -1.0, -1.0])
r1, r2 = basis.u @ d @ basis.u.T, basis.v @ d @ basis.v.T
print("F unchanged:", np.allclose(r1 @ f @ r2.T, f))
u2, v2 = bq.svd_bieq(r1 @ f @ r2.T)
print("literal gap %.2f, gap up to pair signs %.1e" % (
    np.abs(u2 - r1 @ u).max(), bq.sign_aligned_err(u2, v2, r1 @ u, r2 @ v)))

###############################################################################
# The bundled self-test covers every layer.

for result in bq.run_selftest("attention", params=params):
    print(result.line())
