"""Confidence-weighted multi-view DLT triangulation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateRays, FrameMisalignment, SizeMismatch, SpecInvalid, TooFewConfidentViews
from .geometry import Intrinsics, Pose, Trajectory, pixel_rays

CONF_GATE = 0.3
MIN_ANGLE_DEG = 2.0
REWEIGHT_PASSES = 3

VALID = 0
TOO_FEW_VIEWS = 1
DEGENERATE_RAYS = 2
REASONS = {VALID: "ok", TOO_FEW_VIEWS: "TooFewConfidentViews", DEGENERATE_RAYS: "DegenerateRays"}


@dataclass(frozen=True)
class Keypoints2D:
    """2D joints of one view: ``pixels`` is ``(frames, joints, 2)`` and
    ``conf`` is ``(frames, joints)`` in [0, 1]."""

    view_id: str
    pixels: np.ndarray
    conf: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=float)
        c = np.asarray(self.conf, dtype=float)
        if px.ndim != 3 or px.shape[2] != 2 or c.shape != px.shape[:2]:
            raise SizeMismatch("keypoints must be (frames, joints, 2) with (frames, joints) confidences")
        if np.any((c < 0) | (c > 1)):
            raise SpecInvalid("confidences must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "conf", c)

    @property
    def n_frames(self) -> int:
        return self.pixels.shape[0]

    @property
    def n_joints(self) -> int:
        return self.pixels.shape[1]

    def slice(self, start, stop=None) -> "Keypoints2D":
        return Keypoints2D(self.view_id, self.pixels[start:stop], self.conf[start:stop])


@dataclass(frozen=True)
class Keypoints3D:
    """Triangulated joints: ``points`` ``(frames, joints, 3)``, ``valid``,
    RMS weighted reprojection ``residual`` in pixels and a ``reason`` code."""

    points: np.ndarray
    valid: np.ndarray
    residual: np.ndarray
    reason: np.ndarray

    @property
    def n_frames(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class TriangulatedJoint:
    point: np.ndarray
    residual: float


def _projection(pose: Pose, k: Intrinsics) -> np.ndarray:
    return k.K @ np.hstack([pose.rotation, pose.translation[:, None]])


def _solve(P, q, c, passes=REWEIGHT_PASSES):
    """Batched weighted DLT.

    ``P`` is ``(N, V, 3, 4)``, ``q`` ``(N, V, 2)``, ``c`` ``(N, V)``.  Each view
    adds rows ``sqrt(c) * (x P3 - P1, y P3 - P2)``; later passes divide the
    rows by the previous solution's depth so the algebraic residual tracks the
    pixel residual.
    """
    rows_x = q[..., 0:1] * P[..., 2, :] - P[..., 0, :]
    rows_y = q[..., 1:2] * P[..., 2, :] - P[..., 1, :]
    sw = np.sqrt(c)[..., None]
    scale = np.ones(c.shape + (1,))
    X = None
    for _ in range(passes + 1):
        A = np.concatenate([sw * rows_x / scale, sw * rows_y / scale], axis=1)
        _, _, Vt = np.linalg.svd(A)
        h = Vt[:, -1, :]
        X = h[:, :3] / h[:, 3:4]
        z = np.einsum("nvk,nk->nv", P[..., 2, :3], X) + P[..., 2, 3]
        scale = np.where(np.abs(z) > 1e-9, np.abs(z), 1.0)[..., None]
    return X


def _residual(P, q, c, X):
    Xh = np.concatenate([X, np.ones((len(X), 1))], axis=1)
    proj = np.einsum("nvij,nj->nvi", P, Xh)
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = proj[..., :2] / proj[..., 2:3]
    e2 = np.sum((uv - q) ** 2, axis=-1)
    return np.sqrt(np.sum(c * e2, axis=1) / np.sum(c, axis=1))


def _max_ray_angle(rays):
    """Largest pairwise angle (radians) between unit world rays ``(N, V, 3)``."""
    cos = np.einsum("nvi,nwi->nvw", rays, rays)
    return np.arccos(np.clip(cos.min(axis=(1, 2)), -1.0, 1.0))


def triangulate_joint(obs: Sequence, conf_gate: float = CONF_GATE,
                      min_angle_deg: float = MIN_ANGLE_DEG) -> TriangulatedJoint:
    """Triangulate one joint from ``(pixel, confidence, Pose, Intrinsics)``
    tuples, one per view."""
    used = [o for o in obs if o[1] >= conf_gate and o[1] > 0]
    if len(used) < 2:
        raise TooFewConfidentViews(f"{len(used)} views pass the confidence gate")
    P = np.stack([_projection(o[2], o[3]) for o in used])[None]
    q = np.stack([np.asarray(o[0], dtype=float) for o in used])[None]
    c = np.array([float(o[1]) for o in used])[None]
    rays = np.stack([o[2].rotation.T @ pixel_rays(np.asarray(o[0], dtype=float), o[3]) for o in used])
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    if _max_ray_angle(rays[None])[0] < np.deg2rad(min_angle_deg):
        raise DegenerateRays("rays are nearly parallel")
    X = _solve(P, q, c)
    return TriangulatedJoint(X[0], float(_residual(P, q, c, X)[0]))


def triangulate_sequence(keypoints: Sequence[Keypoints2D], trajs: Sequence[Trajectory],
                         conf_gate: float = CONF_GATE,
                         min_angle_deg: float = MIN_ANGLE_DEG) -> Keypoints3D:
    """Triangulate every joint of every frame; invalid joints get NaN points."""
    if len(keypoints) != len(trajs) or len(keypoints) < 2:
        raise SizeMismatch("need matching keypoint streams and trajectories for >= 2 views")
    T = keypoints[0].n_frames
    J = keypoints[0].n_joints
    for kp, tr in zip(keypoints, trajs):
        if kp.n_frames != T or kp.n_joints != J:
            raise FrameMisalignment("keypoint streams disagree on frame or joint count")
        if len(tr) < T:
            raise FrameMisalignment(f"trajectory {tr.view_id} is shorter than its keypoints")
    V = len(keypoints)
    Ps = np.stack([
        np.einsum("ij,tjk->tik", tr.intrinsics.K,
                  np.concatenate([tr.rotations[:T], tr.translations[:T, :, None]], axis=2))
        for tr in trajs], axis=1)  # (T, V, 3, 4)
    q = np.stack([kp.pixels for kp in keypoints], axis=2)  # (T, J, V, 2)
    c = np.stack([kp.conf for kp in keypoints], axis=2)  # (T, J, V)
    gated = np.where((c >= conf_gate) & (c > 0), c, 0.0)

    points = np.full((T, J, 3), np.nan)
    residual = np.full((T, J), np.nan)
    reason = np.full((T, J), TOO_FEW_VIEWS, dtype=np.int64)

    n_ok = np.count_nonzero(gated > 0, axis=2)
    rays = np.stack([
        np.einsum("tji,tkj->tki", tr.rotations[:T], pixel_rays(kp.pixels, tr.intrinsics))
        for kp, tr in zip(keypoints, trajs)], axis=2)  # (T, J, V, 3)
    rays /= np.linalg.norm(rays, axis=-1, keepdims=True)
    # views below the gate must not count towards the triangulation angle
    cos = np.einsum("tjvi,tjwi->tjvw", rays, rays)
    both = (gated[..., :, None] > 0) & (gated[..., None, :] > 0)
    cos = np.where(both, cos, 1.0)
    angle = np.arccos(np.clip(cos.min(axis=(2, 3)), -1.0, 1.0))
    enough = n_ok >= 2
    wide = angle >= np.deg2rad(min_angle_deg)
    reason[enough & ~wide] = DEGENERATE_RAYS
    sel = enough & wide
    if np.any(sel):
        ti, ji = np.nonzero(sel)
        P = Ps[ti]  # (N, V, 3, 4)
        qq = q[ti, ji]
        cc = gated[ti, ji]
        X = _solve(P, qq, cc)
        points[ti, ji] = X
        residual[ti, ji] = _residual(P, qq, cc, X)
        reason[ti, ji] = VALID
    del V
    return Keypoints3D(points, reason == VALID, residual, reason)


def ray_midpoint(c1, d1, c2, d2) -> np.ndarray:
    """Midpoint of the shortest segment between two rays."""
    d1 = d1 / np.linalg.norm(d1)
    d2 = d2 / np.linalg.norm(d2)
    w = c1 - c2
    b = d1 @ d2
    denom = 1 - b * b
    s = (b * (d2 @ w) - (d1 @ w)) / denom
    t = ((d2 @ w) - b * (d1 @ w)) / denom
    return 0.5 * (c1 + s * d1 + c2 + t * d2)
