"""Rigid transforms, quaternion algebra and pinhole projection.

Conventions used throughout the package:

- Quaternions are scalar-first ``(w, x, y, z)`` Hamilton quaternions, kept
  unit norm, canonicalized to a non-negative scalar part.  Products compose
  rotation matrices in the same order: ``R(a * b) = R(a) R(b)``.
- ``Pose`` is the camera pose expressed in the world frame
  (world-from-camera): a world point ``p`` maps into the camera frame as
  ``R(q)^T (p - t)``.
- The world frame is z-up and right handed.  Image coordinates ``(u, v)``
  run along columns and rows respectively, with the origin at the centre of
  the top-left pixel; a pixel is in view iff ``-0.5 <= u < width - 0.5``
  (same for v).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Camera-frame depth below which a point counts as behind the camera.
EPS_DEPTH = 1e-6


# ---------------------------------------------------------------------------
# quaternion algebra (all functions broadcast over leading axes)
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Unit quaternion with non-negative scalar part."""
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if not np.all(np.isfinite(n)) or np.any(n == 0.0):
        raise ValueError("cannot normalize a zero or non-finite quaternion")
    q = q / n
    sign = np.where(q[..., :1] < 0.0, -1.0, 1.0)
    return q * sign


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, av = a[..., 0], a[..., 1:]
    bw, bv = b[..., 0], b[..., 1:]
    w = aw * bw - np.sum(av * bv, axis=-1)
    v = (aw[..., None] * bv + bw[..., None] * av + np.cross(av, bv))
    return np.concatenate([w[..., None], v], axis=-1)


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    """Conjugate; equals the inverse for unit quaternions."""
    q = np.asarray(q, dtype=float)
    return np.concatenate([q[..., :1], -q[..., 1:]], axis=-1)


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Apply the rotation R(q) to 3-vectors v."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    w, u = q[..., 0:1], q[..., 1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of shape (..., 3, 3)."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    m = np.empty(q.shape[:-1] + (3, 3), dtype=float)
    m[..., 0, 0] = 1.0 - 2.0 * (yy + zz)
    m[..., 0, 1] = 2.0 * (xy - wz)
    m[..., 0, 2] = 2.0 * (xz + wy)
    m[..., 1, 0] = 2.0 * (xy + wz)
    m[..., 1, 1] = 1.0 - 2.0 * (xx + zz)
    m[..., 1, 2] = 2.0 * (yz - wx)
    m[..., 2, 0] = 2.0 * (xz - wy)
    m[..., 2, 1] = 2.0 * (yz + wx)
    m[..., 2, 2] = 1.0 - 2.0 * (xx + yy)
    return m


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    """Unit quaternion for a single 3x3 rotation matrix (Shepperd's method)."""
    m = np.asarray(m, dtype=float)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0.0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] >= m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    return quat_normalize(q)


def quat_from_rotvec(v: np.ndarray) -> np.ndarray:
    """Quaternion for an axis-angle vector (angle = |v|, axis = v / |v|)."""
    v = np.asarray(v, dtype=float)
    angle = np.linalg.norm(v, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sinc form is exact at angle = 0 and smooth for small angles
    small = angle < 1e-12
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(small, 0.5, np.sin(half) / np.where(small, 1.0, angle))
    w = np.cos(half)
    return np.concatenate([w, k * v], axis=-1)


def quat_angle(q: np.ndarray) -> np.ndarray:
    """Rotation angle in [0, pi] represented by q (sign-insensitive)."""
    q = np.asarray(q, dtype=float)
    return 2.0 * np.arctan2(np.linalg.norm(q[..., 1:], axis=-1), np.abs(q[..., 0]))


def geodesic_angle(qa: np.ndarray, qb: np.ndarray) -> np.ndarray:
    """Angle of the rotation taking qa to qb."""
    return quat_angle(quat_multiply(quat_conjugate(qa), qb))


def quaternion_boxplus(q: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Apply a local (body-frame) axis-angle increment: q * exp(delta)."""
    return quat_normalize(quat_multiply(q, quat_from_rotvec(delta)))


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrices of shape (..., 3, 3)."""
    v = np.asarray(v, dtype=float)
    m = np.zeros(v.shape[:-1] + (3, 3), dtype=float)
    m[..., 0, 1] = -v[..., 2]
    m[..., 0, 2] = v[..., 1]
    m[..., 1, 0] = v[..., 2]
    m[..., 1, 2] = -v[..., 0]
    m[..., 2, 0] = -v[..., 1]
    m[..., 2, 1] = v[..., 0]
    return m


# ---------------------------------------------------------------------------
# rigid transforms
# ---------------------------------------------------------------------------

def _frozen_vector(v, size: int) -> np.ndarray:
    a = np.asarray(v, dtype=float).reshape(size).copy()
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite vector")
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Pose:
    """World-from-camera rigid transform: position t and orientation q."""

    t: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        t = _frozen_vector(self.t, 3)
        q = quat_normalize(np.asarray(self.q, dtype=float).reshape(4))
        q.flags.writeable = False
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "q", q)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map camera-frame points into the world frame."""
        return quat_rotate(self.q, points) + self.t

    def inverse(self) -> "Pose":
        q_inv = quat_conjugate(self.q)
        return Pose(-quat_rotate(q_inv, self.t), q_inv)

    def to_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.t
        return m

    def __repr__(self):
        return f"Pose(t={np.array2string(self.t, precision=4)}, q={np.array2string(self.q, precision=4)})"


@dataclass(frozen=True, eq=False)
class RelativePose:
    """Offset between consecutive poses: the previous pose in the current frame."""

    t_rel: np.ndarray
    q_rel: np.ndarray

    def __post_init__(self):
        t = _frozen_vector(self.t_rel, 3)
        q = quat_normalize(np.asarray(self.q_rel, dtype=float).reshape(4))
        q.flags.writeable = False
        object.__setattr__(self, "t_rel", t)
        object.__setattr__(self, "q_rel", q)

    @staticmethod
    def identity() -> "RelativePose":
        return RelativePose(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    def as_pose(self) -> Pose:
        return Pose(self.t_rel, self.q_rel)


def compose(a: Pose, b: Pose) -> Pose:
    """Transform applying b then a (matrix product T_a T_b)."""
    return Pose(a.t + quat_rotate(a.q, b.t), quat_multiply(a.q, b.q))


def relative_pose(current: Pose, previous: Pose) -> RelativePose:
    """Offset of the previous pose expressed in the current pose's frame.

    Equivalent to the homogeneous product inverse(current) * previous:
    translation R_c^T (t_p - t_c), rotation q_c^-1 * q_p.
    """
    q_inv = quat_conjugate(current.q)
    return RelativePose(
        quat_rotate(q_inv, previous.t - current.t),
        quat_multiply(q_inv, previous.q),
    )


def apply_relative(current: Pose, rel: RelativePose) -> Pose:
    """Reconstruct the previous pose from the current one and their offset."""
    return compose(current, rel.as_pose())


def pose_residual(
    estimated: RelativePose,
    measured: RelativePose,
    weights: np.ndarray | None = None,
) -> np.ndarray:
    """Weighted 6-vector residual between two relative poses.

    Translation part is the plain difference; rotation part is twice the
    vector part of q_est * q_meas^-1, with the product flipped to the
    positive-scalar hemisphere so small differences give small residuals.
    """
    dt = estimated.t_rel - measured.t_rel
    qe = quat_multiply(estimated.q_rel, quat_conjugate(measured.q_rel))
    if qe[0] < 0.0:
        qe = -qe
    r = np.concatenate([dt, 2.0 * qe[1:]])
    if weights is not None:
        w = np.asarray(weights, dtype=float).reshape(6)
        if np.any(w < 0.0):
            raise ValueError("residual weights must be non-negative")
        r = w * r
    return r


# ---------------------------------------------------------------------------
# pinhole camera
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0.0 <= self.cx < self.width) or not (0.0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


def world_to_camera(pose: Pose, points: np.ndarray) -> np.ndarray:
    """World points into the camera frame: R^T (p - t)."""
    return quat_rotate(quat_conjugate(pose.q), np.asarray(points, dtype=float) - pose.t)


def pinhole(k: CameraIntrinsics, points_cam: np.ndarray) -> np.ndarray:
    """Pinhole projection of camera-frame points (no visibility checks)."""
    p = np.asarray(points_cam, dtype=float)
    z = p[..., 2]
    u = k.fx * p[..., 0] / z + k.cx
    v = k.fy * p[..., 1] / z + k.cy
    return np.stack([u, v], axis=-1)


def in_view(k: CameraIntrinsics, uv: np.ndarray) -> np.ndarray:
    """Whether pixel coordinates fall on the image raster."""
    uv = np.asarray(uv, dtype=float)
    u, v = uv[..., 0], uv[..., 1]
    return (u >= -0.5) & (u < k.width - 0.5) & (v >= -0.5) & (v < k.height - 0.5)


def project(pose: Pose, k: CameraIntrinsics, point: np.ndarray) -> np.ndarray | None:
    """Project a world point; None when behind the camera or off the image."""
    pc = world_to_camera(pose, np.asarray(point, dtype=float).reshape(3))
    if pc[2] <= EPS_DEPTH:
        return None
    uv = pinhole(k, pc)
    if not in_view(k, uv):
        return None
    return uv


def clip_segment_to_front(pa: np.ndarray, pb: np.ndarray) -> tuple[np.ndarray, np.ndarray] | None:
    """Clip a camera-frame segment to depth > EPS_DEPTH; None if fully behind."""
    pa = np.asarray(pa, dtype=float)
    pb = np.asarray(pb, dtype=float)
    za, zb = pa[2], pb[2]
    if za <= EPS_DEPTH and zb <= EPS_DEPTH:
        return None
    if za > EPS_DEPTH and zb > EPS_DEPTH:
        return pa, pb
    # one endpoint behind: move it onto the near plane, strictly in front
    t = (EPS_DEPTH - za) / (zb - za)
    crossing = pa + t * (pb - pa)
    crossing[2] = EPS_DEPTH * (1.0 + 1e-6)
    if za <= EPS_DEPTH:
        return crossing, pb
    return pa, crossing


def look_at_pose(eye: np.ndarray, target: np.ndarray) -> Pose:
    """Camera at `eye` with the optical axis through `target`, image up = world up.

    Degenerates for a vertical view direction (undefined roll).
    """
    eye = np.asarray(eye, dtype=float).reshape(3)
    target = np.asarray(target, dtype=float).reshape(3)
    forward = target - eye
    n = np.linalg.norm(forward)
    if n < 1e-12:
        raise ValueError("eye and target coincide")
    z_c = forward / n
    x_c = np.cross(z_c, np.array([0.0, 0.0, 1.0]))
    nx = np.linalg.norm(x_c)
    if nx < 1e-12:
        raise ValueError("view direction is vertical; camera roll undefined")
    x_c /= nx
    y_c = np.cross(z_c, x_c)
    return Pose(eye, quat_from_matrix(np.column_stack([x_c, y_c, z_c])))
