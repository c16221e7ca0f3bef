"""Rigid transforms, pinhole projection and point cloud primitives.

Conventions used across the package:

* quaternions are stored (w, x, y, z) and kept at unit norm
* a Pose maps camera-frame coordinates into the world frame:
  p_world = R @ p_cam + t, so the camera center expressed in the world
  frame is exactly t
* pixels are continuous image coordinates, u along width, v along height
* the pinhole model is u = fx * x / z + cx, v = fy * y / z + cy with
  (x, y, z) in the camera frame and z > 0 in front of the camera
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import (
    BehindCameraError,
    EmptyCloudError,
    MissingPoseError,
    NonPositiveDepthError,
)


class Frame(Enum):
    WORLD = "world"
    CAMERA = "camera"


class Pixel(NamedTuple):
    u: float
    v: float


# ----------------------------------------------------------------------
# quaternion helpers, (w, x, y, z) order
# ----------------------------------------------------------------------

def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
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


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    n = math.sqrt(float(np.dot(q, q)))
    if n == 0.0 or not math.isfinite(n):
        raise ValueError("cannot normalize zero or non-finite quaternion")
    return q / n


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_matrix(r: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) from a rotation matrix.

    Branches on the largest diagonal combination for numerical safety
    near 180 degree rotations.
    """
    r = np.asarray(r, dtype=float)
    t = np.trace(r)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s,
             (r[1, 0] - r[0, 1]) / s]
        )
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        q = np.array(
            [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s,
             (r[0, 2] + r[2, 0]) / s]
        )
    elif r[1, 1] > r[2, 2]:
        s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
        q = np.array(
            [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s,
             (r[1, 2] + r[2, 1]) / s]
        )
    else:
        s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
        q = np.array(
            [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s,
             (r[1, 2] + r[2, 1]) / s, 0.25 * s]
        )
    return quat_normalize(q)


def quat_from_rotvec(rv: np.ndarray) -> np.ndarray:
    rv = np.asarray(rv, dtype=float)
    angle = math.sqrt(float(np.dot(rv, rv)))
    if angle < 1e-12:
        # second order series of sin(a/2)/a keeps this smooth through zero
        half = 0.5 - angle * angle / 48.0
        return quat_normalize(np.array([1.0, *(half * rv)]))
    axis = rv / angle
    s = math.sin(angle / 2.0)
    return np.array([math.cos(angle / 2.0), *(s * axis)])


def rotvec_from_quat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    if w < 0.0:  # keep the angle in [0, pi]
        w, x, y, z = -w, -x, -y, -z
    sin_half = math.sqrt(x * x + y * y + z * z)
    if sin_half < 1e-12:
        return 2.0 * np.array([x, y, z])
    angle = 2.0 * math.atan2(sin_half, w)
    return (angle / sin_half) * np.array([x, y, z])


def quat_slerp(qa: np.ndarray, qb: np.ndarray, alpha: float) -> np.ndarray:
    qa = np.asarray(qa, dtype=float)
    qb = np.asarray(qb, dtype=float)
    dot = float(np.dot(qa, qb))
    if dot < 0.0:
        qb = -qb
        dot = -dot
    if dot > 1.0 - 1e-10:
        return quat_normalize(qa + alpha * (qb - qa))
    theta = math.acos(min(dot, 1.0))
    s = math.sin(theta)
    return (math.sin((1.0 - alpha) * theta) / s) * qa + (math.sin(alpha * theta) / s) * qb


# ----------------------------------------------------------------------
# pose
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class Pose:
    """Rigid transform taking camera-frame points to the world frame.

    The tangent parameterization used by `exp`/`log`/`retract` is the
    composite (translation, rotation-vector) pair: exp([rho, phi]) is the
    pose with rotation exp(phi^) and translation rho. Retraction is a
    right multiplication, pose * exp(delta).
    """

    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    translation: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=float).reshape(4)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise ValueError("pose fields must be finite")
        q = quat_normalize(q)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @staticmethod
    def exp(xi: np.ndarray) -> "Pose":
        xi = np.asarray(xi, dtype=float).reshape(6)
        return Pose(quat_from_rotvec(xi[3:]), xi[:3].copy())

    def log(self) -> np.ndarray:
        return np.concatenate([self.translation, rotvec_from_quat(self.rotation)])

    def compose(self, other: "Pose") -> "Pose":
        q = quat_normalize(quat_mul(self.rotation, other.rotation))
        t = self.translation + quat_to_matrix(self.rotation) @ other.translation
        return Pose(q, t)

    def inverse(self) -> "Pose":
        qc = quat_conjugate(self.rotation)
        return Pose(qc, -(quat_to_matrix(qc) @ self.translation))

    def retract(self, delta: np.ndarray) -> "Pose":
        return self.compose(Pose.exp(delta))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply to camera-frame points; accepts shape (3,) or (N, 3)."""
        pts = np.asarray(points, dtype=float)
        r = quat_to_matrix(self.rotation)
        if pts.ndim == 1:
            return r @ pts + self.translation
        return pts @ r.T + self.translation

    def difference(self, other: "Pose") -> tuple[float, float]:
        """(rotation angle rad, translation distance m) between two poses."""
        rel = self.inverse().compose(other)
        angle = float(np.linalg.norm(rotvec_from_quat(rel.rotation)))
        return angle, float(np.linalg.norm(self.translation - other.translation))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


# ----------------------------------------------------------------------
# point clouds
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray  # (N, 3) float64
    frame: Frame

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError("cloud points must have shape (N, 3)")
        if not np.all(np.isfinite(pts)):
            raise ValueError("cloud points must be finite")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def extent(self) -> np.ndarray:
        """Per-axis span of the axis-aligned bounding box."""
        if len(self) == 0:
            raise EmptyCloudError("extent of empty cloud")
        return self.points.max(axis=0) - self.points.min(axis=0)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self) == 0:
            raise EmptyCloudError("bounds of empty cloud")
        return self.points.min(axis=0), self.points.max(axis=0)


def centroid(cloud: PointCloud) -> np.ndarray:
    """Arithmetic mean of cloud points (exact mean, no weighting)."""
    if len(cloud) == 0:
        raise EmptyCloudError("centroid of empty cloud")
    return cloud.points.mean(axis=0)


def merge_clouds(clouds: Sequence[PointCloud]) -> PointCloud:
    frames = {c.frame for c in clouds}
    assert len(frames) <= 1, "cannot merge clouds from different frames"
    if not clouds:
        raise EmptyCloudError("merge of zero clouds")
    return PointCloud(np.vstack([c.points for c in clouds]), clouds[0].frame)


# ----------------------------------------------------------------------
# projection
# ----------------------------------------------------------------------

def project(point_world: np.ndarray, pose: Pose, k: CameraIntrinsics) -> Pixel:
    """Project a world point through a camera at `pose`.

    Raises BehindCameraError when the camera-frame depth is <= 0. The
    result may fall outside the image bounds; callers clip if they care.
    """
    p = np.asarray(point_world, dtype=float).reshape(3)
    p_cam = pose.inverse().transform(p)
    z = p_cam[2]
    if z <= 0.0:
        raise BehindCameraError(f"depth {z:.6f} <= 0")
    return Pixel(k.fx * p_cam[0] / z + k.cx, k.fy * p_cam[1] / z + k.cy)


def backproject(pixel: Pixel | Sequence[float], depth: float, pose: Pose,
                k: CameraIntrinsics) -> np.ndarray:
    """Lift a pixel at a known camera-frame depth back into the world."""
    if depth <= 0.0:
        raise NonPositiveDepthError(f"depth {depth} <= 0")
    u, v = float(pixel[0]), float(pixel[1])
    p_cam = np.array([(u - k.cx) * depth / k.fx, (v - k.cy) * depth / k.fy, depth])
    return pose.transform(p_cam)


def backproject_pixels(uv: np.ndarray, depths: np.ndarray, pose: Pose,
                       k: CameraIntrinsics) -> np.ndarray:
    """Vectorized backproject: uv (N, 2), depths (N,) -> world points (N, 3)."""
    uv = np.asarray(uv, dtype=float)
    depths = np.asarray(depths, dtype=float)
    if np.any(depths <= 0.0):
        raise NonPositiveDepthError("all depths must be positive")
    x = (uv[:, 0] - k.cx) * depths / k.fx
    y = (uv[:, 1] - k.cy) * depths / k.fy
    return pose.transform(np.column_stack([x, y, depths]))


# ----------------------------------------------------------------------
# timestamped trajectory
# ----------------------------------------------------------------------

class Trajectory:
    """Sequence of (timestamp, Pose), strictly increasing timestamps.

    pose_at() interpolates between the bracketing poses, linear on the
    translation and slerp on the rotation.
    """

    def __init__(self, stamps: Sequence[float], poses: Sequence[Pose]):
        stamps = np.asarray(stamps, dtype=float)
        if stamps.ndim != 1 or len(stamps) != len(poses):
            raise ValueError("stamps and poses must have equal length")
        if len(stamps) > 1 and not np.all(np.diff(stamps) > 0):
            raise ValueError("timestamps must be strictly increasing")
        self.stamps = stamps
        self.poses = list(poses)

    @staticmethod
    def from_pairs(pairs: Sequence[tuple[float, Pose]]) -> "Trajectory":
        return Trajectory([p[0] for p in pairs], [p[1] for p in pairs])

    def __len__(self) -> int:
        return len(self.poses)

    def __iter__(self) -> Iterator[tuple[float, Pose]]:
        return iter(zip(self.stamps.tolist(), self.poses))

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    def pose_at(self, t: float, tol: float = 1e-9) -> Pose:
        if len(self) == 0:
            raise MissingPoseError("empty trajectory")
        if t < self.stamps[0] - tol or t > self.stamps[-1] + tol:
            raise MissingPoseError(
                f"t={t:.6f} outside [{self.stamps[0]:.6f}, {self.stamps[-1]:.6f}]"
            )
        idx = int(np.searchsorted(self.stamps, t))
        if idx < len(self) and abs(self.stamps[idx] - t) <= tol:
            return self.poses[idx]
        if idx > 0 and abs(self.stamps[idx - 1] - t) <= tol:
            return self.poses[idx - 1]
        lo, hi = idx - 1, idx
        t0, t1 = self.stamps[lo], self.stamps[hi]
        alpha = (t - t0) / (t1 - t0)
        pa, pb = self.poses[lo], self.poses[hi]
        q = quat_slerp(pa.rotation, pb.rotation, alpha)
        tr = (1.0 - alpha) * pa.translation + alpha * pb.translation
        return Pose(q, tr)
