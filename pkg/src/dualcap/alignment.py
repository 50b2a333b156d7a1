"""Closed-form alignment of paired point sets and trajectories."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DegenerateConfiguration,
    EmptyInput,
    InsufficientOverlap,
    NonPositiveDepth,
    ScaleNotUnity,
    SizeMismatch,
    SpecInvalid,
)
from .geometry import PointCloud, SimilarityTransform, Trajectory, yaw_rotation

RANK_TOL = 1e-10


@dataclass(frozen=True)
class CorrespondenceSet:
    source: np.ndarray
    target: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        src = np.asarray(self.source, dtype=float).reshape(-1, 3)
        tgt = np.asarray(self.target, dtype=float).reshape(-1, 3)
        if len(src) != len(tgt):
            raise SizeMismatch(f"{len(src)} source points vs {len(tgt)} target points")
        if self.weights is None:
            w = np.ones(len(src))
        else:
            w = np.asarray(self.weights, dtype=float).reshape(-1)
            if len(w) != len(src):
                raise SizeMismatch("weights length differs from point count")
            if np.any((w < 0) | (w > 1)):
                raise SpecInvalid("weights must lie in [0, 1]")
        if len(src) and not w.sum() > 0:
            raise SpecInvalid("weights must not all be zero")
        object.__setattr__(self, "source", src)
        object.__setattr__(self, "target", tgt)
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return len(self.source)


def _centered(c: CorrespondenceSet):
    w = c.weights
    wsum = w.sum()
    mu_x = w @ c.source / wsum
    mu_y = w @ c.target / wsum
    return w, mu_x, mu_y, c.source - mu_x, c.target - mu_y


def procrustes_similarity(c: CorrespondenceSet, with_scale: bool = True) -> SimilarityTransform:
    """Weighted Umeyama fit minimizing ``sum w ||y - (s R x + T)||^2``."""
    if len(c) < 3:
        raise DegenerateConfiguration("full similarity needs at least 3 correspondences")
    w, mu_x, mu_y, xc, yc = _centered(c)
    sx = np.linalg.svd(np.sqrt(w)[:, None] * xc, compute_uv=False)
    if sx[0] <= RANK_TOL or sx[1] <= RANK_TOL * max(1.0, sx[0]):
        raise DegenerateConfiguration("source points are coincident or collinear")
    H = (w[:, None] * xc).T @ yc
    U, sig, Vt = np.linalg.svd(H)
    if sig[1] <= RANK_TOL * max(1.0, sig[0]):
        raise DegenerateConfiguration("cross-covariance is rank deficient")
    V = Vt.T
    S = np.diag([1.0, 1.0, np.sign(np.linalg.det(V @ U.T)) or 1.0])
    R = V @ S @ U.T
    if with_scale:
        s = float(np.sum(sig * np.diag(S)) / np.sum(w * np.sum(xc * xc, axis=1)))
    else:
        s = 1.0
    T = mu_y - s * R @ mu_x
    return SimilarityTransform(s, R, T)


def procrustes_yaw(c: CorrespondenceSet, with_scale: bool = False) -> SimilarityTransform:
    """Similarity restricted to rotations about +z, solved in closed form.

    With ``R = Rz(phi)`` the weighted cross term is ``a cos(phi) + b sin(phi)``
    where ``a`` and ``b`` come from the 2x2 xy cross-covariance, so the optimum
    is ``atan2(b, a)`` for any positive scale.
    """
    if len(c) < 2:
        raise DegenerateConfiguration("yaw alignment needs at least 2 correspondences")
    w, mu_x, mu_y, xc, yc = _centered(c)
    spread = np.sqrt(np.sum(w * np.sum(xc[:, :2] ** 2, axis=1)) / w.sum())
    if spread <= 1e-9:
        raise DegenerateConfiguration("source points have no horizontal spread")
    a = np.sum(w * (xc[:, 0] * yc[:, 0] + xc[:, 1] * yc[:, 1]))
    b = np.sum(w * (xc[:, 0] * yc[:, 1] - xc[:, 1] * yc[:, 0]))
    ynorm = np.sqrt(np.sum(w * np.sum(yc[:, :2] ** 2, axis=1)))
    if np.hypot(a, b) <= RANK_TOL * max(1.0, spread * ynorm):
        raise DegenerateConfiguration("yaw is unobservable from these correspondences")
    phi = np.arctan2(b, a)
    R = yaw_rotation(phi)
    if with_scale:
        cross = a * np.cos(phi) + b * np.sin(phi) + np.sum(w * xc[:, 2] * yc[:, 2])
        s = float(cross / np.sum(w * np.sum(xc * xc, axis=1)))
        if s <= 0:
            raise DegenerateConfiguration("best-fit scale is not positive")
    else:
        s = 1.0
    T = mu_y - s * R @ mu_x
    return SimilarityTransform(s, R, T)


def alignment_residual(c: CorrespondenceSet, t: SimilarityTransform) -> float:
    """Weighted sum of squared residuals of ``t`` on ``c``."""
    r = c.target - t.apply(c.source)
    return float(np.sum(c.weights * np.sum(r * r, axis=1)))


def apply_offset_to_trajectory(traj: Trajectory, offset: SimilarityTransform,
                               tol: float = 1e-12) -> Trajectory:
    """Move a trajectory's native frame into the target frame by a rigid offset.

    The offset acts on camera positions and camera-to-world orientations
    (``c' = R_off c + T_off``, ``R_c2w' = R_off R_c2w``).  In world-to-camera
    form this is ``R' = R R_off^T`` and ``T' = T - R' T_off``, so points
    back-projected from the new trajectory equal the old back-projections
    mapped through the offset.
    """
    if abs(offset.scale - 1.0) > tol:
        raise ScaleNotUnity(f"offset scale {offset.scale} is not 1")
    Ro = offset.rotation
    R_new = traj.rotations @ Ro.T
    T_new = traj.translations - R_new @ offset.translation
    return Trajectory(traj.view_id, traj.timestamps, R_new, T_new, traj.intrinsics)


@dataclass(frozen=True)
class ChunkAlignment:
    """``per_chunk[k]`` maps chunk ``k`` into chunk ``k-1``; ``cumulative[k]``
    maps chunk ``k`` into chunk 0."""

    per_chunk: tuple
    cumulative: tuple


@dataclass(frozen=True)
class Overlap:
    """Frames ``prev_start..prev_start+length`` of the previous chunk show the
    same instants as ``cur_start..cur_start+length`` of the current one."""

    prev_start: int
    cur_start: int
    length: int


def _chunk_points(traj: Trajectory, cloud: Optional[PointCloud], start: int, length: int):
    pts = [traj.centers[start:start + length]]
    if cloud is not None:
        n = len(traj)
        if len(cloud) % n:
            raise SizeMismatch("chunk cloud must hold the same number of points per frame")
        per = len(cloud) // n
        pts.append(cloud.points.reshape(n, per, 3)[start:start + length].reshape(-1, 3))
    return np.concatenate(pts)


def stitch_chunks(chunks: Sequence, overlaps: Sequence[Overlap], with_scale: bool = True,
                  min_overlap: int = 3) -> ChunkAlignment:
    """Chain per-pair Procrustes fits over overlapping chunks.

    ``chunks`` holds ``(Trajectory, PointCloud or None)`` pairs.  A chunk cloud,
    when given, is a frame-major per-frame point map so overlapping frames
    provide pixel-aligned correspondences in addition to camera centers.
    """
    if len(overlaps) != len(chunks) - 1:
        raise SizeMismatch("need one overlap per adjacent chunk pair")
    per = [SimilarityTransform.identity()]
    cum = [SimilarityTransform.identity()]
    for k in range(1, len(chunks)):
        ov = overlaps[k - 1]
        prev_traj, prev_cloud = chunks[k - 1]
        cur_traj, cur_cloud = chunks[k]
        if ov.length < min_overlap:
            raise InsufficientOverlap(f"chunks {k - 1}/{k} overlap by {ov.length} frames")
        if ov.prev_start + ov.length > len(prev_traj) or ov.cur_start + ov.length > len(cur_traj):
            raise InsufficientOverlap(f"overlap {k - 1}/{k} exceeds the chunk length")
        use_clouds = prev_cloud is not None and cur_cloud is not None
        src = _chunk_points(cur_traj, cur_cloud if use_clouds else None, ov.cur_start, ov.length)
        tgt = _chunk_points(prev_traj, prev_cloud if use_clouds else None, ov.prev_start, ov.length)
        t = procrustes_similarity(CorrespondenceSet(src, tgt), with_scale=with_scale)
        per.append(t)
        cum.append(cum[-1].compose(t))
    return ChunkAlignment(tuple(per), tuple(cum))


def _lower_median(x: np.ndarray) -> float:
    xs = np.sort(x)
    return float(xs[(len(xs) - 1) // 2])


def _depth_pairs(a, b):
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    if len(a) == 0 or len(b) == 0:
        raise EmptyInput("no depth samples")
    if len(a) != len(b):
        raise SizeMismatch("depth arrays differ in length")
    if np.any(a <= 0) or np.any(b <= 0):
        raise NonPositiveDepth("depth samples must be positive")
    return a, b


def metric_scale(depth_reference, depth_relative) -> float:
    """Factor turning relative depths into metric ones: lower median of
    ``z_ref / z_rel``.

    The reciprocal direction (relative units per meter) is
    :func:`relative_scale`; for odd sample counts the two are exact
    reciprocals.
    """
    ref, rel = _depth_pairs(depth_reference, depth_relative)
    return _lower_median(ref / rel)


def relative_scale(depth_reference, depth_relative) -> float:
    """Lower median of ``z_rel / z_ref``."""
    ref, rel = _depth_pairs(depth_reference, depth_relative)
    return _lower_median(rel / ref)
