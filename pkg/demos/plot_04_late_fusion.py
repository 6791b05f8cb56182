"""
Why averaging predictions helps
===============================

Late fusion averages the pose vectors predicted by several models.  For
translation, the distance from the average to the truth can never exceed
the average distance of the members (the norm is convex), so the fused
error is bounded by the mean member error on every single sample.
"""

import numpy as np

from posefuse.fusion import FusionOp, late_fuse

rng = np.random.default_rng(1)
n, m = 1000, 5
gt = np.zeros((n, 3))
members = np.concatenate([rng.normal(size=(m, n, 3)) * 3.0,
                          rng.normal(size=(m, n, 4))], axis=2)
members[..., 3:] /= np.linalg.norm(members[..., 3:], axis=2, keepdims=True)

fused = late_fuse(members, FusionOp.AVERAGE)
member_err = np.linalg.norm(members[..., :3], axis=2)
fused_err = np.linalg.norm(fused[:, :3], axis=1)
print(f"mean member error {member_err.mean():.3f}, fused error {fused_err.mean():.3f}")
print("fused <= mean member on every sample:", bool(np.all(fused_err <= member_err.mean(axis=0) + 1e-12)))

# Quaternions q and -q are the same rotation; members are sign-aligned
# before averaging so that flipping one member's sign changes nothing.
flipped = members.copy()
flipped[2, :, 3:] *= -1
print("sign flip invariant:", np.allclose(late_fuse(flipped)[:, 3:], fused[:, 3:]))

# Multiplicative fusion takes the elementwise product instead.
print("product of (2, 3):", late_fuse(np.array([[[2.0, 1, 1, 1, 0, 0, 0]], [[3.0, 1, 1, 1, 0, 0, 0]]]),
                                      FusionOp.MULTIPLY)[0, :3])
