"""Rotation and translation representations, conversions and pose error metrics.

Quaternions are stored scalar-first, ``(w, x, y, z)``.  Two Euler conventions
are supported by the standard conversion:

``"zyx"``
    intrinsic Z-Y'-X'' (yaw, then pitch, then roll): ``R = Rz(yaw) Ry(pitch) Rx(roll)``
``"xyz"``
    intrinsic X-Y'-Z'' (roll, then pitch, then yaw): ``R = Rx(roll) Ry(pitch) Rz(yaw)``

``euler_to_quaternion_paper`` is a separate, literal half-angle formula that
does not correspond to either convention; it is kept for comparison and can be
selected in the data pipeline with ``rotation_formula="paper"``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

CONVENTIONS = ("zyx", "xyz")

SINGULAR_SCALAR = 1e-6
GIMBAL_TOLERANCE = 1e-7


class GeometryError(ValidationError):
    pass


class SingularConversion(GeometryError):
    """Scalar part of the quaternion is too small to divide by."""


class NegativeRadicand(GeometryError):
    """The square-root argument of the scalar part is negative."""


def wrap_angle(a):
    """Map angles to the half-open interval (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w <= -np.pi, w + 2.0 * np.pi, w)
    return w if w.ndim else float(w)


@dataclass(frozen=True)
class EulerAngles:
    roll: float
    pitch: float
    yaw: float

    def __post_init__(self):
        for k in ("roll", "pitch", "yaw"):
            object.__setattr__(self, k, float(getattr(self, k)))
        if not all(math.isfinite(v) for v in (self.roll, self.pitch, self.yaw)):
            raise GeometryError(f"non-finite Euler angles {self}")

    def canonical(self) -> "EulerAngles":
        return EulerAngles(wrap_angle(self.roll), wrap_angle(self.pitch), wrap_angle(self.yaw))

    def as_array(self) -> np.ndarray:
        return np.array([self.roll, self.pitch, self.yaw])


@dataclass(frozen=True)
class Quaternion:
    w: float
    x: float
    y: float
    z: float

    @classmethod
    def from_array(cls, a) -> "Quaternion":
        w, x, y, z = (float(v) for v in np.asarray(a, dtype=float).reshape(4))
        return cls(w, x, y, z)

    @classmethod
    def identity(cls) -> "Quaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_array()))

    def normalized(self) -> "Quaternion":
        return Quaternion.from_array(normalize(self.as_array()))

    def __neg__(self) -> "Quaternion":
        return Quaternion(-self.w, -self.x, -self.y, -self.z)


@dataclass(frozen=True)
class Translation:
    x1: float
    x2: float
    x3: float

    def __post_init__(self):
        for k in ("x1", "x2", "x3"):
            object.__setattr__(self, k, float(getattr(self, k)))
        if not all(math.isfinite(v) for v in (self.x1, self.x2, self.x3)):
            raise GeometryError(f"non-finite translation {self}")

    @classmethod
    def from_array(cls, a) -> "Translation":
        x1, x2, x3 = (float(v) for v in np.asarray(a, dtype=float).reshape(3))
        return cls(x1, x2, x3)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.x2, self.x3])


@dataclass(frozen=True)
class Pose:
    """Translation plus unit quaternion, flattened as 7 coordinates."""

    t: Translation
    q: Quaternion

    def __post_init__(self):
        if abs(self.q.norm() - 1.0) > 1e-6:
            raise GeometryError(f"pose quaternion is not unit-norm: {self.q}")

    @classmethod
    def from_array(cls, a) -> "Pose":
        a = np.asarray(a, dtype=float).reshape(7)
        return cls(Translation.from_array(a[:3]), Quaternion.from_array(a[3:]))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.t.as_array(), self.q.as_array()])


def _quat_array(q) -> np.ndarray:
    if isinstance(q, Quaternion):
        return q.as_array()
    return np.asarray(q, dtype=float)


def _trans_array(t) -> np.ndarray:
    if isinstance(t, Translation):
        return t.as_array()
    return np.asarray(t, dtype=float)


def normalize(q) -> np.ndarray:
    """Scale quaternion(s) along the last axis to unit length."""
    q = _quat_array(q)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise GeometryError("cannot normalize a zero quaternion")
    return q / n


def quaternion_multiply(a, b) -> np.ndarray:
    """Hamilton product ``a * b`` (broadcasts over leading axes)."""
    a, b = _quat_array(a), _quat_array(b)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def euler_to_quaternion_paper(e: EulerAngles) -> Quaternion:
    """Half-angle formula taken literally, then normalized.

    ``c1, c2, c3`` are cosines of half roll, half yaw and half pitch; ``s1..s3``
    the matching sines.  Raises ``SingularConversion`` when the scalar part
    falls below 1e-6 and ``NegativeRadicand`` when the square root argument is
    negative.
    """
    c1, s1 = math.cos(e.roll / 2.0), math.sin(e.roll / 2.0)
    c2, s2 = math.cos(e.yaw / 2.0), math.sin(e.yaw / 2.0)
    c3, s3 = math.cos(e.pitch / 2.0), math.sin(e.pitch / 2.0)

    radicand = 1.0 + c1 * c2 + c1 * c3 - s1 * s2 * s3 + c2 * c3
    if radicand < 0.0:
        raise NegativeRadicand(f"radicand {radicand:.3e} < 0 at {e}")
    x0 = math.sqrt(radicand) / 2.0
    if x0 < SINGULAR_SCALAR:
        raise SingularConversion(f"scalar part {x0:.3e} < {SINGULAR_SCALAR} at {e}")

    y1 = (c2 * s3 + c1 * s3 + s1 * s2 * c3) / (4.0 * x0)
    y2 = (s1 * c2 + s1 * c3 + c1 * s2 * s3) / (4.0 * x0)
    y3 = (-s1 * s3 + c1 * s2 * c3 + s2) / (4.0 * x0)
    return Quaternion.from_array(normalize(np.array([x0, y1, y2, y3])))


def _axis_quaternions(roll, pitch, yaw):
    roll, pitch, yaw = (np.asarray(v, dtype=float) for v in (roll, pitch, yaw))
    z = np.zeros(np.broadcast(roll, pitch, yaw).shape)
    qx = np.stack([np.cos(roll / 2) + z, np.sin(roll / 2) + z, z, z], axis=-1)
    qy = np.stack([np.cos(pitch / 2) + z, z, np.sin(pitch / 2) + z, z], axis=-1)
    qz = np.stack([np.cos(yaw / 2) + z, z, z, np.sin(yaw / 2) + z], axis=-1)
    return qx, qy, qz


def _check_convention(convention: str) -> None:
    if convention not in CONVENTIONS:
        raise GeometryError(f"unknown Euler convention {convention!r}; expected one of {CONVENTIONS}")


def euler_array_to_quaternion(angles, convention: str = "zyx") -> np.ndarray:
    """Vectorized standard conversion; ``angles[..., :]`` is (roll, pitch, yaw)."""
    _check_convention(convention)
    angles = np.asarray(angles, dtype=float)
    qx, qy, qz = _axis_quaternions(angles[..., 0], angles[..., 1], angles[..., 2])
    if convention == "zyx":
        q = quaternion_multiply(quaternion_multiply(qz, qy), qx)
    else:
        q = quaternion_multiply(quaternion_multiply(qx, qy), qz)
    return q


def euler_to_quaternion_standard(e: EulerAngles, convention: str = "zyx") -> Quaternion:
    q = euler_array_to_quaternion(e.as_array(), convention)
    return Quaternion.from_array(q)


def _rx(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_matrix_from_euler(e: EulerAngles, convention: str = "zyx") -> np.ndarray:
    _check_convention(convention)
    if convention == "zyx":
        return _rz(e.yaw) @ _ry(e.pitch) @ _rx(e.roll)
    return _rx(e.roll) @ _ry(e.pitch) @ _rz(e.yaw)


def rotation_matrix_from_quaternion(q) -> np.ndarray:
    w, x, y, z = normalize(_quat_array(q))
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quaternion_to_euler(q, convention: str = "zyx", return_gimbal_flag: bool = False):
    """Recover (roll, pitch, yaw) from a unit quaternion.

    At gimbal lock (``|pitch|`` within 1e-7 of pi/2) the split between the two
    outer angles is arbitrary; roll is set to zero and the flag is raised.
    """
    _check_convention(convention)
    w, x, y, z = normalize(_quat_array(q))
    if convention == "zyx":
        sp = 2.0 * (w * y - x * z)
    else:
        sp = 2.0 * (w * y + x * z)
    sp = min(1.0, max(-1.0, sp))
    pitch = math.asin(sp)
    locked = abs(abs(pitch) - math.pi / 2) <= GIMBAL_TOLERANCE

    if locked:
        # only one combination of roll and yaw is observable; put it all in yaw
        roll = 0.0
        if convention == "zyx":
            yaw = math.atan2(-2.0 * (x * y - w * z), 1.0 - 2.0 * (x * x + z * z))
        else:
            yaw = math.atan2(2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z))
    elif convention == "zyx":
        roll = math.atan2(2.0 * (w * x + y * z), 1.0 - 2.0 * (x * x + y * y))
        yaw = math.atan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))
    else:
        roll = math.atan2(2.0 * (w * x - y * z), 1.0 - 2.0 * (x * x + y * y))
        yaw = math.atan2(2.0 * (w * z - x * y), 1.0 - 2.0 * (y * y + z * z))

    e = EulerAngles(wrap_angle(roll), wrap_angle(pitch), wrap_angle(yaw))
    if return_gimbal_flag:
        return e, locked
    return e


def sign_align(reference, q):
    """Return ``q`` or ``-q``, whichever has non-negative dot product with ``reference``."""
    as_obj = isinstance(q, Quaternion)
    r, qa = _quat_array(reference), _quat_array(q)
    d = np.sum(r * qa, axis=-1, keepdims=True)
    out = np.where(d < 0, -qa, qa)
    return Quaternion.from_array(out) if as_obj else out


def translation_error_m(pred, gt):
    """Euclidean distance between translations (broadcasts over leading axes)."""
    d = np.linalg.norm(_trans_array(pred) - _trans_array(gt), axis=-1)
    return float(d) if np.ndim(d) == 0 else d


def rotation_error_deg(pred, gt):
    """Geodesic angle between the rotations of two quaternions, in degrees.

    Equal to ``2 * arccos(|<pred, gt>|)``, evaluated through ``atan2`` of the
    chord lengths so that nearly identical rotations keep full precision.
    """
    p, g = normalize(_quat_array(pred)), normalize(_quat_array(gt))
    g = sign_align(p, g)
    chord = np.linalg.norm(p - g, axis=-1)
    span = np.linalg.norm(p + g, axis=-1)
    ang = np.degrees(4.0 * np.arctan2(chord, span))
    return float(ang) if np.ndim(ang) == 0 else ang
