"""Quaternion and pose math shared by ingestion, the loss, and the metrics.

Conventions
-----------
- Quaternions are length-4 numpy arrays in scalar-first order ``[w, x, y, z]``.
- Canonical form lives on one hemisphere: ``w >= 0``, and when ``w == 0`` the
  first nonzero component is positive (so canonicalization is total and
  idempotent despite the q/-q double cover).
- Poses are camera-to-world: ``Pose.p`` is the camera center in world
  coordinates and ``Pose.q`` rotates camera-frame vectors into the world
  frame. Ingestion converts external files to this convention.
- The quaternion logarithm is the axis-scaled half-angle 3-vector; for a
  canonical unit quaternion its norm is at most pi/2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GeometryError(ValueError):
    """Invalid rotation/pose input (non-unit quaternion, reflection, ...)."""


IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])

_DEGENERATE_NORM = 1e-12
_SMALL_ANGLE = 1e-8
_UNIT_TOL = 1e-8


def normalize(q) -> tuple[np.ndarray, bool]:
    """Scale a raw 4-vector to unit norm.

    Returns ``(unit_q, degenerate)``; inputs with norm below 1e-12 fall back
    to the identity quaternion with the degeneracy flag set.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise GeometryError(f"quaternion must be a 4-vector, got shape {q.shape}")
    n = float(np.linalg.norm(q))
    if n < _DEGENERATE_NORM:
        return IDENTITY_QUAT.copy(), True
    return q / n, False


def _check_unit(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise GeometryError(f"quaternion must be a 4-vector, got shape {q.shape}")
    n = float(np.linalg.norm(q))
    if abs(n - 1.0) > _UNIT_TOL:
        raise GeometryError(f"quaternion is not unit norm (|q| = {n})")
    return q


def canonical_sign(q) -> float:
    """Sign that maps ``q`` onto the canonical hemisphere (+1 or -1)."""
    q = np.asarray(q, dtype=np.float64)
    for c in q:
        if c != 0.0:
            return 1.0 if c > 0.0 else -1.0
    raise GeometryError("cannot canonicalize the zero quaternion")


def canonicalize_hemisphere(q) -> np.ndarray:
    """Flip sign onto the w >= 0 hemisphere; w == 0 ties break on the first
    nonzero component. Idempotent."""
    q = _check_unit(q)
    return q * canonical_sign(q)


def quat_log(q) -> np.ndarray:
    """Logarithm of a unit quaternion: axis times half-angle.

    (w, v) with s = |v| maps to (v/s) * atan2(s, w); below the small-angle
    threshold 1e-8 the first-order limit v is returned, which keeps the map
    continuous across the branch.
    """
    q = _check_unit(q)
    w, v = q[0], q[1:]
    s = float(np.linalg.norm(v))
    if s <= _SMALL_ANGLE:
        return v.copy()
    return (v / s) * np.arctan2(s, w)


def quat_exp(u) -> np.ndarray:
    """Inverse of :func:`quat_log`: (cos|u|, sin|u| * u/|u|)."""
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (3,):
        raise GeometryError(f"log-quaternion must be a 3-vector, got shape {u.shape}")
    n = float(np.linalg.norm(u))
    if n <= _SMALL_ANGLE:
        return np.concatenate(([np.cos(n)], u))
    return np.concatenate(([np.cos(n)], u * (np.sin(n) / n)))


def quat_to_matrix(q) -> np.ndarray:
    """3x3 rotation matrix of a unit quaternion."""
    w, x, y, z = _check_unit(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotation_matrix_to_quat(R) -> np.ndarray:
    """Branch-stable (Shepperd) quaternion extraction from a rotation matrix.

    Requires orthonormality within 1e-6 and determinant +1; reflections are
    rejected. The result is unit-norm and hemisphere-canonical.
    """
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise GeometryError(f"rotation matrix must be 3x3, got shape {R.shape}")
    if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-6:
        raise GeometryError("matrix is not orthonormal within 1e-6")
    if np.linalg.det(R) < 0.0:
        raise GeometryError("matrix is a reflection (det < 0), not a rotation")

    # pick the largest of (trace, R00, R11, R22) to avoid catastrophic
    # cancellation near 180-degree rotations
    t = float(np.trace(R))
    if t > R[0, 0] and t > R[1, 1] and t > R[2, 2]:
        r = np.sqrt(1.0 + t)
        s = 0.5 / r
        q = np.array(
            [0.5 * r, (R[2, 1] - R[1, 2]) * s, (R[0, 2] - R[2, 0]) * s, (R[1, 0] - R[0, 1]) * s]
        )
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        r = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        s = 0.5 / r
        q = np.array(
            [(R[2, 1] - R[1, 2]) * s, 0.5 * r, (R[0, 1] + R[1, 0]) * s, (R[0, 2] + R[2, 0]) * s]
        )
    elif R[1, 1] >= R[2, 2]:
        r = np.sqrt(1.0 - R[0, 0] + R[1, 1] - R[2, 2])
        s = 0.5 / r
        q = np.array(
            [(R[0, 2] - R[2, 0]) * s, (R[0, 1] + R[1, 0]) * s, 0.5 * r, (R[1, 2] + R[2, 1]) * s]
        )
    else:
        r = np.sqrt(1.0 - R[0, 0] - R[1, 1] + R[2, 2])
        s = 0.5 / r
        q = np.array(
            [(R[1, 0] - R[0, 1]) * s, (R[0, 2] + R[2, 0]) * s, (R[1, 2] + R[2, 1]) * s, 0.5 * r]
        )
    q, _ = normalize(q)
    return canonicalize_hemisphere(q)


def quat_conjugate(q) -> np.ndarray:
    q = _check_unit(q)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def rotation_error_deg(q1, q2) -> float:
    """Geodesic rotation distance in degrees: 2*arccos(|<q1, q2>|).

    Symmetric and invariant under independent sign flips of either argument,
    so antipodal quaternions are the same rotation.
    """
    q1, q2 = _check_unit(q1), _check_unit(q2)
    # identical rotations must measure exactly zero; the float dot of a unit
    # quaternion with itself lands just below 1, so catch sign-equality first
    if np.array_equal(q1, q2) or np.array_equal(q1, -q2):
        return 0.0
    dot = min(1.0, float(np.abs(np.dot(q1, q2))))
    return float(2.0 * np.arccos(dot) * 180.0 / np.pi)


def position_error_m(p1, p2) -> float:
    """Euclidean distance between two positions."""
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    return float(np.linalg.norm(p1 - p2))


def median(values) -> float:
    """Middle element of the sorted values; mean of the middle pair for even
    counts."""
    vs = sorted(float(v) for v in values)
    if not vs:
        raise GeometryError("median of an empty list")
    n = len(vs)
    mid = n // 2
    if n % 2:
        return vs[mid]
    return 0.5 * (vs[mid - 1] + vs[mid])


@dataclass
class Pose:
    """Camera-to-world pose: position in meters plus canonical unit quaternion."""

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        if self.p.shape != (3,):
            raise GeometryError(f"position must be a 3-vector, got shape {self.p.shape}")
        q = _check_unit(self.q)
        if canonical_sign(q) < 0:
            raise GeometryError("pose quaternion must be hemisphere-canonical")
        self.q = q

    def to_matrix(self) -> np.ndarray:
        """Homogeneous 4x4 camera-to-world matrix."""
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.q)
        m[:3, 3] = self.p
        return m

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise GeometryError(f"pose matrix must be 4x4, got shape {m.shape}")
        if np.max(np.abs(m[3] - np.array([0.0, 0.0, 0.0, 1.0]))) > 1e-6:
            raise GeometryError(f"pose matrix bottom row must be (0,0,0,1), got {m[3]}")
        return cls(p=m[:3, 3], q=rotation_matrix_to_quat(m[:3, :3]))


def random_unit_quaternion(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation: normalized 4-D Gaussian, canonicalized."""
    q = rng.standard_normal(4)
    q, degenerate = normalize(q)
    if degenerate:  # pragma: no cover - probability zero draw
        return IDENTITY_QUAT.copy()
    return canonicalize_hemisphere(q)
