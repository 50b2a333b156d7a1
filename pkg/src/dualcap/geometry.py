"""Geometric primitives shared by every stage.

Camera convention: a :class:`Pose` maps world points into the camera frame,
``x_cam = R @ x_world + T``.  The world frame is Z-up, gravity aligned and
metric.  Pixels follow the usual pinhole model without distortion.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import BehindCamera, NonPositiveDepth, SizeMismatch, SpecInvalid

MIN_DEPTH = 1e-9
ORTHO_TOL = 1e-9


def _as_vec3(v) -> np.ndarray:
    v = np.asarray(v, dtype=float).reshape(3)
    return v


def check_rotation(R, tol: float = ORTHO_TOL) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise SpecInvalid(f"rotation must be 3x3, got {R.shape}")
    if not np.all(np.isfinite(R)):
        raise SpecInvalid("rotation has non-finite entries")
    if np.linalg.norm(R.T @ R - np.eye(3)) > tol or np.linalg.det(R) <= 0:
        raise SpecInvalid("rotation is not a proper orthonormal matrix")
    return R


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise SpecInvalid("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise SpecInvalid("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class Pose:
    """World-to-camera rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = check_rotation(self.rotation)
        T = _as_vec3(self.translation)
        if not np.all(np.isfinite(T)):
            raise SpecInvalid("translation has non-finite entries")
        R = R.copy()
        T = T.copy()
        R.flags.writeable = False
        T.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", T)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_center(cls, rotation, center) -> "Pose":
        """Build a pose from its world-to-camera rotation and camera center."""
        R = np.asarray(rotation, dtype=float)
        return cls(R, -R @ _as_vec3(center))

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def transform(self, p_world) -> np.ndarray:
        return np.asarray(p_world, dtype=float) @ self.rotation.T + self.translation

    def inverse_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation.T
        M[:3, 3] = self.center
        return M

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M


@dataclass(frozen=True)
class SimilarityTransform:
    """Maps a point ``p`` to ``scale * rotation @ p + translation``."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise SpecInvalid("similarity scale must be positive")
        R = check_rotation(self.rotation).copy()
        T = _as_vec3(self.translation).copy()
        R.flags.writeable = False
        T.flags.writeable = False
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", T)

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        P = np.asarray(points, dtype=float)
        return self.scale * (P @ self.rotation.T) + self.translation

    def inverse(self) -> "SimilarityTransform":
        Rt = self.rotation.T
        s = 1.0 / self.scale
        return SimilarityTransform(s, Rt, -s * (Rt @ self.translation))

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """``self ∘ other``: apply ``other`` first."""
        return SimilarityTransform(
            self.scale * other.scale,
            self.rotation @ other.rotation,
            self.scale * (self.rotation @ other.translation) + self.translation,
        )

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.scale * self.rotation
        M[:3, 3] = self.translation
        return M

    @property
    def yaw(self) -> float:
        """Heading angle of the rotation about +z (exact for pure z-rotations)."""
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))


@dataclass(frozen=True)
class Trajectory:
    """Per-frame world-to-camera poses of one device plus its intrinsics.

    Poses are stored as stacked arrays; ``traj[i]`` returns a :class:`Pose`.
    """

    view_id: str
    timestamps: np.ndarray
    rotations: np.ndarray
    translations: np.ndarray
    intrinsics: Intrinsics

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float).reshape(-1)
        Rs = np.asarray(self.rotations, dtype=float).reshape(-1, 3, 3)
        Ts = np.asarray(self.translations, dtype=float).reshape(-1, 3)
        if len(ts) < 1:
            raise SpecInvalid("trajectory needs at least one frame")
        if not (len(ts) == len(Rs) == len(Ts)):
            raise SizeMismatch("timestamps, rotations and translations differ in length")
        if np.any(np.diff(ts) <= 0):
            raise SpecInvalid("timestamps must be strictly increasing")
        err = np.linalg.norm(np.einsum("nji,njk->nik", Rs, Rs) - np.eye(3), axis=(1, 2))
        if np.any(err > ORTHO_TOL) or np.any(np.linalg.det(Rs) <= 0):
            raise SpecInvalid("trajectory contains a non-rotation matrix")
        if not np.all(np.isfinite(Ts)):
            raise SpecInvalid("trajectory translations must be finite")
        for a in (ts, Rs, Ts):
            a.flags.writeable = False
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "rotations", Rs)
        object.__setattr__(self, "translations", Ts)

    @classmethod
    def from_poses(cls, view_id, timestamps, poses: Sequence[Pose], intrinsics) -> "Trajectory":
        return cls(
            view_id,
            timestamps,
            np.stack([p.rotation for p in poses]),
            np.stack([p.translation for p in poses]),
            intrinsics,
        )

    def __len__(self) -> int:
        return len(self.timestamps)

    def __getitem__(self, i) -> Pose:
        return Pose(self.rotations[i], self.translations[i])

    @property
    def poses(self) -> list:
        return [self[i] for i in range(len(self))]

    @property
    def centers(self) -> np.ndarray:
        return -np.einsum("nji,nj->ni", self.rotations, self.translations)

    def slice(self, start: int, stop: Optional[int] = None) -> "Trajectory":
        return Trajectory(self.view_id, self.timestamps[start:stop], self.rotations[start:stop],
                          self.translations[start:stop], self.intrinsics)


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    confidence: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        P = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(P)):
            raise SpecInvalid("point cloud coordinates must be finite")
        P.flags.writeable = False
        object.__setattr__(self, "points", P)
        if self.confidence is not None:
            c = np.asarray(self.confidence, dtype=float).reshape(-1)
            if len(c) != len(P):
                raise SizeMismatch("confidence length differs from point count")
            if np.any((c < 0) | (c > 1)):
                raise SpecInvalid("confidence must lie in [0, 1]")
            c.flags.writeable = False
            object.__setattr__(self, "confidence", c)

    def __len__(self) -> int:
        return len(self.points)


def project(p_world, pose: Pose, k: Intrinsics) -> np.ndarray:
    """Pinhole projection of one world point to pixel coordinates."""
    pc = pose.rotation @ _as_vec3(p_world) + pose.translation
    if pc[2] <= MIN_DEPTH:
        raise BehindCamera(f"point has camera depth {pc[2]:.3g}")
    return np.array([k.fx * pc[0] / pc[2] + k.cx, k.fy * pc[1] / pc[2] + k.cy])


def project_points(P_world, R, T, k: Intrinsics):
    """Vectorized projection; returns ``(pixels, depth)`` without raising.

    Points with non-positive depth get NaN pixels so callers can mask them.
    """
    pc = np.asarray(P_world, dtype=float) @ np.asarray(R).T + np.asarray(T)
    z = pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * pc[..., 0] / z + k.cx
        v = k.fy * pc[..., 1] / z + k.cy
    uv = np.stack([u, v], axis=-1)
    uv[z <= MIN_DEPTH] = np.nan
    return uv, z


def pixel_rays(q, k: Intrinsics) -> np.ndarray:
    """Camera-frame rays with unit z, ``K^-1 [q; 1]``."""
    q = np.asarray(q, dtype=float)
    x = (q[..., 0] - k.cx) / k.fx
    y = (q[..., 1] - k.cy) / k.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def backproject(q, depth: float, pose: Pose, k: Intrinsics) -> np.ndarray:
    """Inverse of :func:`project` for a pixel with known camera depth."""
    if not depth > 0:
        raise NonPositiveDepth(f"depth must be positive, got {depth}")
    pc = depth * pixel_rays(np.asarray(q, dtype=float).reshape(2), k)
    return pose.rotation.T @ (pc - pose.translation)


def backproject_points(q, depth, R, T, k: Intrinsics) -> np.ndarray:
    """Vectorized back-projection, ``R^T (d K^-1 [q;1] - T)``; no validation."""
    pc = np.asarray(depth, dtype=float)[..., None] * pixel_rays(q, k)
    return (pc - np.asarray(T)) @ np.asarray(R)


def yaw_rotation(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def yaw_rotation_derivative(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


def apply_similarity(t: SimilarityTransform, p) -> np.ndarray:
    return t.apply(p)


def quat_xyzw_to_matrix(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if np.linalg.norm(q) == 0:
        raise SpecInvalid("zero quaternion")
    return Rotation.from_quat(q / np.linalg.norm(q)).as_matrix()


def matrix_to_quat_xyzw(R) -> np.ndarray:
    q = Rotation.from_matrix(np.asarray(R, dtype=float)).as_quat()
    # canonical sign keeps files stable across runs
    if q[3] < 0 or (q[3] == 0 and q[np.nonzero(q)[0][0]] < 0):
        q = -q
    return q


def skew(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_exp(w) -> np.ndarray:
    """Rodrigues formula, batched over leading axes."""
    w = np.asarray(w, dtype=float)
    a2 = np.sum(w * w, axis=-1)[..., None, None]
    a = np.sqrt(a2)
    small = a2 < 1e-12
    safe = np.where(small, 1.0, a)
    A = np.where(small, 1.0 - a2 / 6.0, np.sin(safe) / safe)
    B = np.where(small, 0.5 - a2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    W = skew(w)
    return np.eye(3) + A * W + B * (W @ W)


def so3_right_jacobian(w) -> np.ndarray:
    """``exp(w + dw) ≈ exp(w) exp(Jr(w) dw)``, batched."""
    w = np.asarray(w, dtype=float)
    a2 = np.sum(w * w, axis=-1)[..., None, None]
    a = np.sqrt(a2)
    small = a2 < 1e-10
    safe = np.where(small, 1.0, a)
    B = np.where(small, 0.5 - a2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    C = np.where(small, 1.0 / 6.0 - a2 / 120.0, (safe - np.sin(safe)) / (safe * safe * safe))
    W = skew(w)
    return np.eye(3) - B * W + C * (W @ W)


def so3_log(R) -> np.ndarray:
    return Rotation.from_matrix(np.asarray(R, dtype=float)).as_rotvec()
