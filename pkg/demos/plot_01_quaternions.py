"""
Euler angles to quaternions
===========================

Two conversions live side by side in ``posefuse.geometry``.  The half-angle
substitution takes roll, pitch and yaw straight to a quaternion through a
square root; the standard conversion composes three axis rotations.  They
agree at the identity and drift apart elsewhere, and this script shows by
how much.
"""

import math

import numpy as np

from posefuse import geometry as geo
from posefuse.geometry import EulerAngles

# The identity: both conversions give exactly (1, 0, 0, 0).
zero = EulerAngles(0.0, 0.0, 0.0)
print("half-angle:", geo.euler_to_quaternion_paper(zero).as_array())
print("standard:  ", geo.euler_to_quaternion_standard(zero).as_array())

# A quarter turn of roll.  The half-angle form lands on (cos pi/8, 0, sin pi/8, 0),
# while the standard conversion gives a rotation about x.
quarter = EulerAngles(math.pi / 2, 0.0, 0.0)
print("half-angle:", np.round(geo.euler_to_quaternion_paper(quarter).as_array(), 6))
print("standard:  ", np.round(geo.euler_to_quaternion_standard(quarter).as_array(), 6))

# How far apart are they, as a rotation angle, over random attitudes?
rng = np.random.default_rng(0)
gaps = []
for _ in range(2000):
    e = EulerAngles(*rng.uniform(-math.pi / 2, math.pi / 2, size=3))
    try:
        a = geo.euler_to_quaternion_paper(e)
    except geo.GeometryError:
        continue
    gaps.append(geo.rotation_error_deg(a, geo.euler_to_quaternion_standard(e)))
gaps = np.array(gaps)
print(f"median gap {np.median(gaps):.2f} deg, max {gaps.max():.2f} deg over {gaps.size} attitudes")

# The half-angle form divides by 4*w, so (pi, pi, pi) has no answer.
try:
    geo.euler_to_quaternion_paper(EulerAngles(math.pi, math.pi, math.pi))
except geo.SingularConversion as exc:
    print("singular:", exc)

# The standard conversion round-trips, and q and -q are the same rotation.
e = EulerAngles(0.3, -0.2, 1.1)
q = geo.euler_to_quaternion_standard(e)
print("round trip:", geo.quaternion_to_euler(q).as_array(), "vs", e.as_array())
print("e_r(q, -q) =", geo.rotation_error_deg(q, -q))

# At pitch = 90 deg roll and yaw are no longer separable; the conversion
# flags it instead of failing.
_, locked = geo.quaternion_to_euler(geo.euler_to_quaternion_standard(EulerAngles(0.1, math.pi / 2, 0.4)),
                                    return_gimbal_flag=True)
print("gimbal lock flagged:", locked)
