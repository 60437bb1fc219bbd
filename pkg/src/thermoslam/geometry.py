"""Rigid-body transforms and the pinhole camera model.

Conventions used across the package:

- Quaternions are stored (w, x, y, z) and renormalized after every compose.
- ``Pose`` is a frame-to-frame transform: ``T_a_b`` maps points expressed in
  frame ``b`` into frame ``a`` via ``p_a = R @ p_b + t``.
- Camera frame is the usual computer-vision one: x right, y down, z forward;
  only points with ``z > 0`` are projectable.
- Pixel coordinates are continuous, origin at the top-left pixel center.

All functions are pure and all types are treated as immutable values.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

Vec3 = np.ndarray  # shape (3,)
Quat = np.ndarray  # shape (4,), (w, x, y, z)


# --------------------------------------------------------------------------- #
# SO(3) helpers
# --------------------------------------------------------------------------- #

def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rodrigues formula; series expansion below 1e-8 rad."""
    angle = float(np.linalg.norm(phi))
    K = skew(phi)
    if angle < 1e-8:
        return np.eye(3) + K + 0.5 * (K @ K)
    s, c = np.sin(angle), np.cos(angle)
    return np.eye(3) + (s / angle) * K + ((1.0 - c) / angle**2) * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of ``R``; handles both the small-angle and pi cases."""
    cos_angle = float(np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0))
    angle = float(np.arccos(cos_angle))
    if angle < 1e-8:
        return 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if np.pi - angle < 1e-6:
        # near pi the sin-based formula degenerates; recover axis from R + I
        A = 0.5 * (R + np.eye(3))
        axis = np.sqrt(np.maximum(np.diag(A), 0.0))
        k = int(np.argmax(axis))
        if axis[k] > 0:
            axis = A[:, k] / axis[k]
            axis /= np.linalg.norm(axis)
        return angle * axis
    scale = angle / (2.0 * np.sin(angle))
    return scale * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])


def so3_right_jacobian(phi: np.ndarray) -> np.ndarray:
    """Jr such that Exp(phi + d) ~ Exp(phi) Exp(Jr d) for small d."""
    angle = float(np.linalg.norm(phi))
    K = skew(phi)
    if angle < 1e-6:
        return np.eye(3) - 0.5 * K + (1.0 / 6.0) * (K @ K)
    a2 = angle * angle
    return (
        np.eye(3)
        - ((1.0 - np.cos(angle)) / a2) * K
        + ((angle - np.sin(angle)) / (a2 * angle)) * (K @ K)
    )


# --------------------------------------------------------------------------- #
# Quaternions (w, x, y, z)
# --------------------------------------------------------------------------- #

def quat_identity() -> Quat:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q: np.ndarray) -> Quat:
    q = np.asarray(q, dtype=float)
    n = float(np.linalg.norm(q))
    if n == 0.0:
        raise ValueError("zero quaternion")
    return q / n


def quat_mul(a: np.ndarray, b: np.ndarray) -> Quat:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conj(q: np.ndarray) -> Quat:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> Quat:
    """Shepperd's method, numerically stable for all rotations."""
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        return quat_normalize(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    i = int(np.argmax(np.diag(R)))
    if i == 0:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif i == 1:
        s = np.sqrt(1.0 - R[0, 0] + R[1, 1] - R[2, 2]) * 2.0
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = np.sqrt(1.0 - R[0, 0] - R[1, 1] + R[2, 2]) * 2.0
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize(q)


def quat_from_rotvec(phi: np.ndarray) -> Quat:
    phi = np.asarray(phi, dtype=float)
    angle = float(np.linalg.norm(phi))
    if angle < 1e-12:
        q = np.concatenate(([1.0], 0.5 * phi))
        return quat_normalize(q)
    axis = phi / angle
    half = 0.5 * angle
    return np.concatenate(([np.cos(half)], np.sin(half) * axis))


def rotvec_from_quat(q: np.ndarray) -> np.ndarray:
    q = quat_normalize(q)
    if q[0] < 0:
        q = -q
    w = float(np.clip(q[0], -1.0, 1.0))
    vec = q[1:]
    n = float(np.linalg.norm(vec))
    if n < 1e-12:
        return 2.0 * vec
    angle = 2.0 * np.arctan2(n, w)
    return (angle / n) * vec


def quat_rotate(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Rotate point(s) ``p`` (shape (3,) or (N,3)) by quaternion ``q``."""
    R = quat_to_matrix(q)
    p = np.asarray(p, dtype=float)
    if p.ndim == 1:
        return R @ p
    return p @ R.T


# --------------------------------------------------------------------------- #
# SE(3)
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class Pose:
    """Rigid transform T_a_b: p_a = R(q) @ p_b + t. Treat as immutable."""

    q: Quat = field(default_factory=quat_identity)
    t: Vec3 = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "q", quat_normalize(np.asarray(self.q, dtype=float)))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3).copy())

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def from_matrix(T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=float)
        return Pose(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @staticmethod
    def from_rotvec(phi: np.ndarray, t: np.ndarray | None = None) -> "Pose":
        return Pose(quat_from_rotvec(phi), np.zeros(3) if t is None else t)

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.t
        return T

    def compose(self, other: "Pose") -> "Pose":
        return Pose(quat_mul(self.q, other.q), quat_rotate(self.q, other.t) + self.t)

    def inverse(self) -> "Pose":
        qc = quat_conj(self.q)
        return Pose(qc, -quat_rotate(qc, self.t))

    def transform(self, p: np.ndarray) -> np.ndarray:
        """Apply to one point (3,) or a batch (N,3)."""
        p = np.asarray(p, dtype=float)
        if p.ndim == 1:
            return quat_rotate(self.q, p) + self.t
        return quat_rotate(self.q, p) + self.t[None, :]

    def rotvec(self) -> np.ndarray:
        return rotvec_from_quat(self.q)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def inverse(a: Pose) -> Pose:
    return a.inverse()


def transform_point(a: Pose, p: np.ndarray) -> np.ndarray:
    return a.transform(p)


def pose_distance(a: Pose, b: Pose) -> tuple[float, float]:
    """(rotation angle [rad], translation norm [m]) of the relative transform."""
    rel = a.inverse().compose(b)
    return float(np.linalg.norm(rel.rotvec())), float(np.linalg.norm(rel.t))


# --------------------------------------------------------------------------- #
# Pinhole camera
# --------------------------------------------------------------------------- #

class Visibility(enum.Enum):
    IN_VIEW = "in_view"
    OUT_OF_VIEW = "out_of_view"
    BEHIND = "behind"


class BehindCameraError(ValueError):
    """Raised when an operation requires positive depth."""


@dataclass(frozen=True)
class PinholeIntrinsics:
    """Pinhole model with 4-parameter radial-tangential distortion (k1,k2,p1,p2)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    distortion: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        object.__setattr__(self, "distortion", tuple(float(d) for d in self.distortion))
        if len(self.distortion) != 4:
            raise ValueError("distortion must be (k1, k2, p1, p2)")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def has_distortion(self) -> bool:
        return any(d != 0.0 for d in self.distortion)


def distort_normalized(intr: PinholeIntrinsics, xy: np.ndarray) -> np.ndarray:
    """Radial-tangential distortion on normalized coordinates (N,2) or (2,)."""
    k1, k2, p1, p2 = intr.distortion
    xy = np.asarray(xy, dtype=float)
    single = xy.ndim == 1
    xy = np.atleast_2d(xy)
    x, y = xy[:, 0], xy[:, 1]
    r2 = x * x + y * y
    radial = 1.0 + k1 * r2 + k2 * r2 * r2
    xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
    out = np.stack([xd, yd], axis=1)
    return out[0] if single else out


def undistort_normalized(intr: PinholeIntrinsics, xy_d: np.ndarray, iterations: int = 10) -> np.ndarray:
    """Invert the distortion by fixed-point iteration (exact when coeffs are 0)."""
    if not intr.has_distortion():
        return np.asarray(xy_d, dtype=float)
    xy_d = np.asarray(xy_d, dtype=float)
    xy = xy_d.copy()
    for _ in range(iterations):
        # fixed point of xy = xy_d - (distort(xy) - xy)
        xy = xy_d - (distort_normalized(intr, xy) - xy)
    return xy


def project(intr: PinholeIntrinsics, p: np.ndarray) -> tuple[np.ndarray, Visibility]:
    """Project one camera-frame point; returns (uv, visibility).

    uv is valid (finite) whenever the point is in front of the camera; for
    points behind it the pixel is meaningless and visibility is BEHIND.
    """
    p = np.asarray(p, dtype=float)
    if p[2] <= 0.0:
        return np.full(2, np.nan), Visibility.BEHIND
    xy = p[:2] / p[2]
    xd = distort_normalized(intr, xy)
    uv = np.array([intr.fx * xd[0] + intr.cx, intr.fy * xd[1] + intr.cy])
    if 0.0 <= uv[0] < intr.width and 0.0 <= uv[1] < intr.height:
        return uv, Visibility.IN_VIEW
    return uv, Visibility.OUT_OF_VIEW


def project_points(intr: PinholeIntrinsics, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of (N,3) camera-frame points.

    Returns (uv (N,2), vis (N,) of Visibility values as object array codes):
    vis uses the integer codes 0=IN_VIEW, 1=OUT_OF_VIEW, 2=BEHIND.
    """
    pts = np.asarray(pts, dtype=float)
    n = pts.shape[0]
    uv = np.full((n, 2), np.nan)
    vis = np.full(n, 2, dtype=np.int8)
    front = pts[:, 2] > 0.0
    if np.any(front):
        xy = pts[front, :2] / pts[front, 2:3]
        xd = distort_normalized(intr, xy)
        u = intr.fx * xd[:, 0] + intr.cx
        v = intr.fy * xd[:, 1] + intr.cy
        uv[front, 0] = u
        uv[front, 1] = v
        inside = (u >= 0.0) & (u < intr.width) & (v >= 0.0) & (v < intr.height)
        sub = np.where(front)[0]
        vis[sub[inside]] = 0
        vis[sub[~inside]] = 1
    return uv, vis


def unproject(intr: PinholeIntrinsics, uv: np.ndarray, depth: float) -> np.ndarray:
    """Back-project a pixel at the given depth (camera frame)."""
    if depth <= 0.0:
        raise BehindCameraError("depth must be positive")
    uv = np.asarray(uv, dtype=float)
    if not np.all(np.isfinite(uv)):
        raise ValueError("pixel coordinates must be finite")
    xy_d = np.array([(uv[0] - intr.cx) / intr.fx, (uv[1] - intr.cy) / intr.fy])
    xy = undistort_normalized(intr, xy_d)
    return np.array([xy[0] * depth, xy[1] * depth, depth])


def unproject_grid(intr: PinholeIntrinsics) -> np.ndarray:
    """Unit-depth ray directions for every pixel center, shape (H, W, 3)."""
    us = np.arange(intr.width, dtype=float)
    vs = np.arange(intr.height, dtype=float)
    uu, vv = np.meshgrid(us, vs)
    xy_d = np.stack([(uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy], axis=-1)
    xy = undistort_normalized(intr, xy_d.reshape(-1, 2)).reshape(intr.height, intr.width, 2)
    return np.concatenate([xy, np.ones((intr.height, intr.width, 1))], axis=-1)


def projection_jacobians(intr: PinholeIntrinsics, pts: np.ndarray) -> np.ndarray:
    """Batched d(uv)/d(camera point) for (N,3) points in front; shape (N,2,3)."""
    pts = np.asarray(pts, dtype=float)
    X, Y, Z = pts[:, 0], pts[:, 1], pts[:, 2]
    Zs = np.where(Z > 0, Z, np.nan)
    x, y = X / Zs, Y / Zs
    k1, k2, p1, p2 = intr.distortion
    r2 = x * x + y * y
    radial = 1.0 + k1 * r2 + k2 * r2 * r2
    dr = k1 + 2.0 * k2 * r2
    J_dist = np.empty((len(pts), 2, 2))
    J_dist[:, 0, 0] = radial + 2.0 * x * x * dr + 2.0 * p1 * y + 6.0 * p2 * x
    J_dist[:, 0, 1] = 2.0 * x * y * dr + 2.0 * p1 * x + 2.0 * p2 * y
    J_dist[:, 1, 0] = 2.0 * x * y * dr + 2.0 * p2 * y + 2.0 * p1 * x
    J_dist[:, 1, 1] = radial + 2.0 * y * y * dr + 6.0 * p1 * y + 2.0 * p2 * x
    J_norm = np.zeros((len(pts), 2, 3))
    J_norm[:, 0, 0] = 1.0 / Zs
    J_norm[:, 0, 2] = -X / Zs**2
    J_norm[:, 1, 1] = 1.0 / Zs
    J_norm[:, 1, 2] = -Y / Zs**2
    F = np.array([[intr.fx, 0.0], [0.0, intr.fy]])
    return np.einsum("ab,nbc,ncd->nad", F, J_dist, J_norm)


def projection_jacobian(intr: PinholeIntrinsics, p: np.ndarray) -> np.ndarray:
    """d(uv)/d(camera point), 2x3, including the distortion chain."""
    p = np.asarray(p, dtype=float)
    X, Y, Z = p
    if Z <= 0.0:
        raise BehindCameraError("Jacobian undefined for non-positive depth")
    x, y = X / Z, Y / Z
    # d(normalized)/d(point)
    J_norm = np.array([[1.0 / Z, 0.0, -X / Z**2], [0.0, 1.0 / Z, -Y / Z**2]])
    k1, k2, p1, p2 = intr.distortion
    r2 = x * x + y * y
    radial = 1.0 + k1 * r2 + k2 * r2 * r2
    dradial = k1 + 2.0 * k2 * r2  # d(radial)/d(r2)
    # d(distorted)/d(normalized)
    J_dist = np.array(
        [
            [
                radial + x * dradial * 2.0 * x + 2.0 * p1 * y + 6.0 * p2 * x,
                x * dradial * 2.0 * y + 2.0 * p1 * x + 2.0 * p2 * y,
            ],
            [
                y * dradial * 2.0 * x + 2.0 * p2 * y + 2.0 * p1 * x,
                radial + y * dradial * 2.0 * y + 6.0 * p1 * y + 2.0 * p2 * x,
            ],
        ]
    )
    J_pix = np.array([[intr.fx, 0.0], [0.0, intr.fy]])
    return J_pix @ J_dist @ J_norm
