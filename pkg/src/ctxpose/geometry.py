"""Rigid poses, quaternions and pinhole camera projection.

Conventions used across the package:

* quaternions are Hamilton, scalar-first ``(w, x, y, z)`` and canonicalized
  to ``w >= 0``;
* lengths are meters;
* pixel ``(u, v)`` addresses column ``u`` and row ``v`` and the integer
  coordinate is the pixel *center*, so the top-left pixel center is (0, 0).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch

PointCloud = np.ndarray  # (n, 3) float64, meters
DepthMap = np.ndarray  # (H, W) float, meters; 0 marks a missing reading

UNIT_TOL = 1e-6


class NormalizationRequiredError(ValueError):
    """A quaternion was used as a rotation without being normalized."""


class BehindCameraError(ValueError):
    """Projection of a point with non-positive depth."""


@dataclass(frozen=True)
class UnitQuaternion:
    w: float
    x: float
    y: float
    z: float

    @classmethod
    def identity(cls) -> UnitQuaternion:
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_vector(cls, v: Sequence[float]) -> UnitQuaternion:
        """Normalize an arbitrary nonzero 4-vector and flip it to ``w >= 0``."""
        a = np.asarray(v, dtype=np.float64)
        n = np.linalg.norm(a)
        if not np.isfinite(n) or n == 0.0:
            raise NormalizationRequiredError(f"cannot normalize quaternion {a}")
        a = a / n
        if a[0] < 0:
            a = -a
        return cls(*(float(c) for c in a))

    @classmethod
    def from_axis_angle(cls, axis: Sequence[float], angle: float) -> UnitQuaternion:
        ax = np.asarray(axis, dtype=np.float64)
        ax = ax / np.linalg.norm(ax)
        s = np.sin(angle / 2.0)
        return cls.from_vector([np.cos(angle / 2.0), *(ax * s)])

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_array()))

    def canonical(self) -> UnitQuaternion:
        if self.w < 0:
            return UnitQuaternion(-self.w, -self.x, -self.y, -self.z)
        return self


def quat_multiply(a: UnitQuaternion, b: UnitQuaternion) -> UnitQuaternion:
    """Hamilton product ``a * b`` (rotation ``b`` first, then ``a``)."""
    w = a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z
    x = a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y
    y = a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x
    z = a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w
    return UnitQuaternion(w, x, y, z).canonical()


def quat_to_matrix(q: UnitQuaternion) -> np.ndarray:
    """3x3 rotation matrix of a unit quaternion.

    Raises:
        NormalizationRequiredError: if ``|q|`` differs from 1 by more than 1e-6.
    """
    if abs(q.norm() - 1.0) > UNIT_TOL:
        raise NormalizationRequiredError(f"quaternion norm {q.norm():.3g} is not 1")
    w, x, y, z = q.w, q.x, q.y, q.z
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


def matrix_to_quat(R: np.ndarray) -> UnitQuaternion:
    """Inverse of :func:`quat_to_matrix` (Shepperd's method)."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        v = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        v = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        v = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        v = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return UnitQuaternion.from_vector(v)


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``x -> R x + t`` from object frame to camera frame."""

    rotation: UnitQuaternion
    translation: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "translation", tuple(float(c) for c in self.translation))
        if len(self.translation) != 3:
            raise ValueError("translation must have 3 components")

    @classmethod
    def identity(cls) -> Pose:
        return cls(UnitQuaternion.identity(), (0.0, 0.0, 0.0))

    @classmethod
    def from_matrix(cls, R: np.ndarray, t: Sequence[float]) -> Pose:
        return cls(matrix_to_quat(R), tuple(np.asarray(t, dtype=np.float64)))

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    @property
    def t(self) -> np.ndarray:
        return np.array(self.translation, dtype=np.float64)

    def homogeneous(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T


def apply(p: Pose, pts: PointCloud) -> PointCloud:
    """Transform points: each row ``x`` becomes ``R x + t``."""
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ p.R.T + p.t


def compose(a: Pose, b: Pose) -> Pose:
    """Pose equivalent to applying ``b`` then ``a``."""
    q = quat_multiply(a.rotation, b.rotation)
    t = a.R @ b.t + a.t
    return Pose(q, tuple(t))


def invert(p: Pose) -> Pose:
    q = p.rotation
    q_inv = UnitQuaternion(q.w, -q.x, -q.y, -q.z).canonical()
    t = -(quat_to_matrix(q_inv) @ p.t)
    return Pose(q_inv, tuple(t))


def rotation_angle(a: Pose | UnitQuaternion, b: Pose | UnitQuaternion | None = None) -> float:
    """Geodesic angle in radians of ``a`` (or of ``a^-1 b``)."""
    qa = a.rotation if isinstance(a, Pose) else a
    if b is None:
        w = abs(qa.w)
    else:
        qb = b.rotation if isinstance(b, Pose) else b
        w = abs(float(np.dot(qa.as_array(), qb.as_array())))
    return 2.0 * float(np.arccos(min(1.0, w)))


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
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("fx", "fy", "cx", "cy", "width", "height")}

    @classmethod
    def from_dict(cls, d: dict) -> CameraIntrinsics:
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


DESK_CAMERA = CameraIntrinsics(fx=150.0, fy=150.0, cx=79.5, cy=59.5, width=160, height=120)


class Deprojection(NamedTuple):
    points: PointCloud  # (n, 3)
    pixels: np.ndarray  # (n, 2) int, columns (v, u) = (row, col)
    skipped: int  # masked pixels without a valid depth reading


def deproject(depth: DepthMap, k: CameraIntrinsics, mask: np.ndarray) -> Deprojection:
    """Back-project masked pixels to camera-frame points.

    Pixels are visited in row-major order; masked pixels whose depth is zero or
    not finite are dropped and counted in ``skipped``.
    """
    depth = np.asarray(depth, dtype=np.float64)
    rows, cols = np.nonzero(mask)
    z = depth[rows, cols]
    ok = np.isfinite(z) & (z > 0)
    rows, cols, z = rows[ok], cols[ok], z[ok]
    x = (cols - k.cx) * z / k.fx
    y = (rows - k.cy) * z / k.fy
    pts = np.stack([x, y, z], axis=1)
    return Deprojection(pts, np.stack([rows, cols], axis=1), int((~ok).sum()))


def project(pt: Sequence[float], k: CameraIntrinsics) -> tuple[float, float]:
    x, y, z = (float(c) for c in pt)
    if z <= 0:
        raise BehindCameraError(f"point {pt} has z <= 0")
    return k.fx * x / z + k.cx, k.fy * y / z + k.cy


def project_points(pts: PointCloud, k: CameraIntrinsics) -> np.ndarray:
    """Vectorized :func:`project`; returns ``(n, 2)`` array of ``(u, v)``."""
    pts = np.asarray(pts, dtype=np.float64)
    if np.any(pts[:, 2] <= 0):
        raise BehindCameraError("point with z <= 0")
    u = k.fx * pts[:, 0] / pts[:, 2] + k.cx
    v = k.fy * pts[:, 1] / pts[:, 2] + k.cy
    return np.stack([u, v], axis=1)


def random_rotation(rng: np.random.Generator) -> UnitQuaternion:
    """Uniform rotation: a normalized isotropic Gaussian 4-vector is uniform on S^3."""
    while True:
        v = rng.standard_normal(4)
        if np.linalg.norm(v) > 1e-8:
            return UnitQuaternion.from_vector(v)


def random_pose(
    rng: np.random.Generator,
    bounds: Sequence[tuple[float, float]],
    camera: CameraIntrinsics | None = None,
    margin_px: float = 0.0,
    max_tries: int = 1000,
) -> Pose:
    """Uniform rotation and a translation drawn uniformly inside ``bounds``.

    With ``camera`` given, translations whose projection lands outside the image
    shrunk by ``margin_px`` are rejected and redrawn.
    """
    lo = np.array([b[0] for b in bounds], dtype=np.float64)
    hi = np.array([b[1] for b in bounds], dtype=np.float64)
    if lo[2] <= 0:
        raise ValueError("translation bounds must lie in front of the camera")
    q = random_rotation(rng)
    for _ in range(max_tries):
        t = lo + (hi - lo) * rng.random(3)
        if camera is None:
            return Pose(q, tuple(t))
        u, v = project(t, camera)
        if margin_px <= u <= camera.width - 1 - margin_px and margin_px <= v <= camera.height - 1 - margin_px:
            return Pose(q, tuple(t))
    raise ValueError("no translation inside bounds projects into the camera frustum")


# -- batched torch versions used by the networks ---------------------------------


def quat_to_matrix_torch(q: torch.Tensor) -> torch.Tensor:
    """``(..., 4)`` unit quaternions to ``(..., 3, 3)`` rotation matrices."""
    w, x, y, z = q.unbind(-1)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return torch.stack(rows, dim=-1).reshape(*q.shape[:-1], 3, 3)


def normalize_quat_torch(raw: torch.Tensor) -> torch.Tensor:
    """Normalize raw 4-vectors and flip to ``w >= 0``; the flip leaves the matrix unchanged."""
    q = raw / raw.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    sign = torch.where(q[..., :1] < 0, -1.0, 1.0).to(q.dtype)
    return q * sign


def quat_multiply_torch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )
