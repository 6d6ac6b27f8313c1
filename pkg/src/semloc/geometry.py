"""Camera model, rotation parameterization, and point/line residual kernels.

Conventions used everywhere in the package:

* camera frame is right-handed with x right, y down, z forward (optical axis);
* a bearing is a unit vector in the camera frame with z > 0 at construction;
* the map frame is right-handed with z up;
* a ``Pose`` maps map coordinates into the camera frame, ``x_cam = R x_map + t``;
* rotations are stored as angle-axis vectors, the matrix is derived on demand.

All types are immutable after construction and all operations are pure
functions, so everything here is safe for unrestricted parallel use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometryError, DomainError

# Below this rotation angle the Rodrigues coefficients switch to their Taylor
# series to avoid 0/0.
_SMALL_ANGLE = 1e-6


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics (no distortion model)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise DomainError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise DomainError("principal point must lie strictly inside the image")

    def contains(self, u: float, v: float) -> bool:
        """Closed-boundary bounds test in pixel coordinates."""
        return 0.0 <= u <= self.width and 0.0 <= v <= self.height

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Bearing:
    """Unit view ray in the camera frame; z > 0 (in front of the camera)."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        n = math.sqrt(self.x * self.x + self.y * self.y + self.z * self.z)
        if abs(n - 1.0) > 1e-9:
            raise DomainError(f"bearing must have unit norm, got {n}")
        if self.z <= 0.0:
            raise DomainError("bearing must point in front of the camera (z > 0)")

    @property
    def vec(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @staticmethod
    def from_vec(v) -> "Bearing":
        v = np.asarray(v, dtype=float).reshape(3)
        n = float(np.linalg.norm(v))
        if n < 1e-12:
            raise DomainError("cannot normalize a (near-)zero vector into a bearing")
        return Bearing(float(v[0] / n), float(v[1] / n), float(v[2] / n))


def skew(v) -> np.ndarray:
    """Skew-symmetric matrix [v]_x such that [v]_x w = v x w."""
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_exp(r) -> np.ndarray:
    """Angle-axis to rotation matrix (Rodrigues closed form).

    Continuous at ``||r|| -> 0`` via the series expansion of the two
    Rodrigues coefficients.
    """
    r = np.asarray(r, dtype=float).reshape(3)
    theta2 = float(r @ r)
    K = skew(r)
    if theta2 < _SMALL_ANGLE**2:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        theta = math.sqrt(theta2)
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / theta2
    return np.eye(3) + a * K + b * (K @ K)


def rotation_log(R) -> np.ndarray:
    """Rotation matrix to angle-axis with angle in [0, pi].

    Inverse of :func:`rotation_exp`; raises for inputs that are not
    orthonormal with determinant +1 (tolerance 1e-6).
    """
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise DomainError("rotation_log expects a 3x3 matrix")
    if np.abs(R @ R.T - np.eye(3)).max() > 1e-6 or np.linalg.det(R) < 0.0:
        raise DomainError("rotation_log expects an orthonormal matrix with det +1")
    cos = (float(np.trace(R)) - 1.0) / 2.0
    cos = min(1.0, max(-1.0, cos))
    theta = math.acos(cos)
    # w = 2 sin(theta) * axis
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = float(np.linalg.norm(w))
    if theta < _SMALL_ANGLE:
        # r ~ w / 2 to first order
        return 0.5 * w
    if theta > math.pi - 1e-4:
        # Near pi the skew part vanishes; recover the axis from the symmetric
        # part, R ~ 2 a a^T - I.
        M = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diagonal(M)))
        axis = M[:, k] / math.sqrt(max(M[k, k], 1e-18))
        axis = axis / np.linalg.norm(axis)
        if s > 1e-12 and float(axis @ w) < 0.0:
            axis = -axis
        return theta * axis
    return (theta / s) * w


def so3_right_jacobian(r) -> np.ndarray:
    """Right Jacobian J_r of SO(3): R(r + d) ~ R(r) rotation_exp(J_r d).

    Used by the analytic pose gradients: d(R(r) p)/dr = -R [p]_x J_r(r).
    """
    r = np.asarray(r, dtype=float).reshape(3)
    theta2 = float(r @ r)
    K = skew(r)
    if theta2 < _SMALL_ANGLE**2:
        return np.eye(3) - 0.5 * K + (K @ K) / 6.0
    theta = math.sqrt(theta2)
    a = (1.0 - math.cos(theta)) / theta2
    b = (theta - math.sin(theta)) / (theta2 * theta)
    return np.eye(3) - a * K + b * (K @ K)


@dataclass(frozen=True)
class Pose:
    """Rigid map-to-camera transform, x_cam = R x_map + t.

    ``r`` is the angle-axis rotation (radians times unit axis) and ``t`` the
    translation in meters. The rotation matrix is derived on demand.
    """

    r: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.r, dtype=float).reshape(3)
        t = np.asarray(self.t, dtype=float).reshape(3)
        if not (np.isfinite(r).all() and np.isfinite(t).all()):
            raise DomainError("pose parameters must be finite")
        object.__setattr__(self, "r", _frozen(r))
        object.__setattr__(self, "t", _frozen(t))

    @property
    def R(self) -> np.ndarray:
        return rotation_exp(self.r)

    @property
    def params(self) -> np.ndarray:
        """(r, t) stacked as the 6-vector used by the optimizers."""
        return np.concatenate([self.r, self.t])

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply to a (3,) point or an (n, 3) stack of points."""
        return np.asarray(points, dtype=float) @ self.R.T + self.t

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=float) @ self.R.T

    def inverse(self) -> "Pose":
        R = self.R
        return Pose(rotation_log(R.T), -R.T @ self.t)

    def compose(self, other: "Pose") -> "Pose":
        """self o other: apply ``other`` first, then ``self``."""
        R = self.R @ other.R
        return Pose(rotation_log(R), self.R @ other.t + self.t)

    @property
    def camera_center(self) -> np.ndarray:
        """Camera center expressed in the map frame."""
        return -self.R.T @ self.t

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.zeros(3), np.zeros(3))

    @staticmethod
    def from_params(x) -> "Pose":
        x = np.asarray(x, dtype=float).reshape(6)
        return Pose(x[:3], x[3:])

    @staticmethod
    def from_matrix(R, t) -> "Pose":
        return Pose(rotation_log(R), np.asarray(t, dtype=float))


def pixel_to_bearing(u: float, v: float, K: CameraIntrinsics) -> Bearing:
    """Lift a pixel to its unit bearing, proportional to K^-1 [u, v, 1]^T."""
    if not K.contains(u, v):
        raise DomainError(f"pixel ({u}, {v}) outside image bounds {K.width}x{K.height}")
    return Bearing.from_vec([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])


def _as_vec(f) -> np.ndarray:
    return f.vec if isinstance(f, Bearing) else np.asarray(f, dtype=float).reshape(3)


def angular_error(f, p, pose: Pose) -> float:
    """Angle in radians between bearing ``f`` and the transformed point ``p``.

    The cosine is clamped to [-1, 1] before arccos so exact incidence cannot
    round to NaN. Raises if the transformed point sits at the camera center.
    """
    fv = _as_vec(f)
    q = pose.R @ np.asarray(p, dtype=float).reshape(3) + pose.t
    n = float(np.linalg.norm(q))
    if n <= 1e-12:
        raise DegenerateGeometryError("transformed point coincides with the camera center")
    c = min(1.0, max(-1.0, float(fv @ q) / n))
    return math.acos(c)


def point_residual(f, p, pose: Pose) -> float:
    """Collinearity residual 1 - f . (Rp + t)/||Rp + t||, in [0, 2].

    Zero exactly when the transformed point lies on the ray spanned by ``f``
    (same direction); 2 when it points the opposite way.
    """
    fv = _as_vec(f)
    q = pose.R @ np.asarray(p, dtype=float).reshape(3) + pose.t
    n = float(np.linalg.norm(q))
    if n <= 1e-12:
        raise DegenerateGeometryError("transformed point coincides with the camera center")
    c = min(1.0, max(-1.0, float(fv @ q) / n))
    return 1.0 - c


def line_plane_normal(f, v2d) -> np.ndarray:
    """Unit normal of the plane back-projected from an image line.

    The image line through the point with bearing ``f`` and direction ``v2d``
    corresponds to the plane through the camera center spanned by ``f`` and
    ``v2d``; its normal is the normalized cross product.
    """
    fv = _as_vec(f)
    v2 = np.asarray(v2d, dtype=float).reshape(3)
    c = np.cross(fv, v2)
    n = float(np.linalg.norm(c))
    if n <= 1e-9:
        raise DegenerateGeometryError("image line direction is parallel to its bearing")
    return c / n


def line_residual(f, v2d, p, v3d, pose: Pose) -> float:
    """Plane-incidence residual 1 - ||n x d||, in [0, 1].

    ``n`` is the back-projected plane normal of the image line and ``d`` the
    unit direction of the transformed offset point R(p + v3d) + t. Zero exactly
    when d is perpendicular to n, i.e. lies in the plane.
    """
    n = line_plane_normal(f, v2d)
    q = pose.R @ (np.asarray(p, dtype=float).reshape(3) + np.asarray(v3d, dtype=float).reshape(3)) + pose.t
    qn = float(np.linalg.norm(q))
    if qn <= 1e-12:
        raise DegenerateGeometryError("transformed line point coincides with the camera center")
    d = q / qn
    return 1.0 - float(np.linalg.norm(np.cross(n, d)))


def geodesic_angle(Ra, Rb) -> float:
    """Geodesic distance between two rotations, arccos((trace(Ra^T Rb) - 1)/2).

    Evaluated through ||Ra - Rb||_F = 2 sqrt(2) sin(theta/2) for small and
    moderate angles: the arccos form loses ~sqrt(eps) of precision near zero,
    which would floor the reported error of an exact estimate at ~1e-8 rad.
    """
    Ra = np.asarray(Ra, dtype=float)
    Rb = np.asarray(Rb, dtype=float)
    s = float(np.linalg.norm(Ra - Rb)) / (2.0 * math.sqrt(2.0))
    if s < 0.7:
        return 2.0 * math.asin(min(1.0, s))
    c = (float(np.trace(Ra.T @ Rb)) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, c)))
