"""Calibration loss terms and their gradients.

Every view carries a rigid offset ``(yaw, t)`` that moves its native
trajectory into the scene frame (see
:func:`dualcap.alignment.apply_offset_to_trajectory`).  Under that offset a
point ``P`` back-projected in the native frame lands at ``Rz(yaw) P + t``,
which keeps all three terms cheap to differentiate.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .errors import EmptyCloud, EmptyCorrespondences, SizeMismatch, SpecInvalid
from .geometry import (
    MIN_DEPTH,
    PointCloud,
    SimilarityTransform,
    Trajectory,
    backproject_points,
    wrap_angle,
    yaw_rotation,
    yaw_rotation_derivative,
)

log = logging.getLogger(__name__)


@dataclass
class OffsetParams:
    """Per-view yaw (radians) and translation (meters)."""

    yaw: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.yaw = np.atleast_1d(np.asarray(self.yaw, dtype=float)).copy()
        self.translation = np.asarray(self.translation, dtype=float).reshape(-1, 3).copy()
        if len(self.yaw) != len(self.translation):
            raise SizeMismatch("one yaw and one translation per view")
        if not (np.all(np.isfinite(self.yaw)) and np.all(np.isfinite(self.translation))):
            raise SpecInvalid("offsets must be finite")

    @classmethod
    def zeros(cls, n_views: int) -> "OffsetParams":
        return cls(np.zeros(n_views), np.zeros((n_views, 3)))

    @classmethod
    def from_transforms(cls, transforms: Sequence[SimilarityTransform]) -> "OffsetParams":
        return cls([t.yaw for t in transforms], [t.translation for t in transforms])

    @classmethod
    def from_vector(cls, x) -> "OffsetParams":
        x = np.asarray(x, dtype=float).reshape(-1, 4)
        return cls(x[:, 0], x[:, 1:])

    def __len__(self):
        return len(self.yaw)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.yaw[:, None], self.translation], axis=1).reshape(-1)

    def wrapped(self) -> "OffsetParams":
        return OffsetParams(wrap_angle(self.yaw), self.translation)

    def transform(self, v: int) -> SimilarityTransform:
        return SimilarityTransform(1.0, yaw_rotation(self.yaw[v]), self.translation[v])

    def copy(self) -> "OffsetParams":
        return OffsetParams(self.yaw, self.translation)


@dataclass(frozen=True)
class TrackedCorrespondences:
    """Dense pixel tracks seen by view 0 and view 1, stored column-wise.

    Row ``i`` holds frame ``frames[i]``, the pixel/depth/confidence in both
    views; the pair weight is ``min(conf0, conf1)``.
    """

    frames: np.ndarray
    pixels0: np.ndarray
    depth0: np.ndarray
    conf0: np.ndarray
    pixels1: np.ndarray
    depth1: np.ndarray
    conf1: np.ndarray

    def __post_init__(self):
        n = len(np.asarray(self.frames).reshape(-1))
        cols = {
            "frames": np.asarray(self.frames, dtype=np.int64).reshape(-1),
            "pixels0": np.asarray(self.pixels0, dtype=float).reshape(-1, 2),
            "depth0": np.asarray(self.depth0, dtype=float).reshape(-1),
            "conf0": np.asarray(self.conf0, dtype=float).reshape(-1),
            "pixels1": np.asarray(self.pixels1, dtype=float).reshape(-1, 2),
            "depth1": np.asarray(self.depth1, dtype=float).reshape(-1),
            "conf1": np.asarray(self.conf1, dtype=float).reshape(-1),
        }
        for k, v in cols.items():
            if len(v) != n:
                raise SizeMismatch(f"track column {k} has {len(v)} rows, expected {n}")
            object.__setattr__(self, k, v)
        if np.any(cols["depth0"] <= 0) or np.any(cols["depth1"] <= 0):
            raise SpecInvalid("track depths must be positive")
        for c in (cols["conf0"], cols["conf1"]):
            if np.any((c < 0) | (c > 1)):
                raise SpecInvalid("track confidences must lie in [0, 1]")

    def __len__(self):
        return len(self.frames)

    @property
    def weight(self) -> np.ndarray:
        return np.minimum(self.conf0, self.conf1)

    def take(self, idx) -> "TrackedCorrespondences":
        return TrackedCorrespondences(self.frames[idx], self.pixels0[idx], self.depth0[idx],
                                      self.conf0[idx], self.pixels1[idx], self.depth1[idx],
                                      self.conf1[idx])


@dataclass(frozen=True)
class LandmarkObservations:
    """Pixels of fixed scene landmarks observed by one view."""

    frames: np.ndarray
    landmark_ids: np.ndarray
    pixels: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.int64).reshape(-1)
        ids = np.asarray(self.landmark_ids, dtype=np.int64).reshape(-1)
        px = np.asarray(self.pixels, dtype=float).reshape(-1, 2)
        if not (len(f) == len(ids) == len(px)):
            raise SizeMismatch("landmark observation columns differ in length")
        object.__setattr__(self, "frames", f)
        object.__setattr__(self, "landmark_ids", ids)
        object.__setattr__(self, "pixels", px)

    def __len__(self):
        return len(self.frames)


@dataclass(frozen=True)
class LossWeights:
    track: float = 1.0
    chamfer: float = 0.1
    ba: float = 0.01

    def __post_init__(self):
        vals = (self.track, self.chamfer, self.ba)
        if any(not np.isfinite(v) or v < 0 for v in vals):
            raise SpecInvalid("loss weights must be finite and non-negative")
        if all(v == 0 for v in vals):
            raise SpecInvalid("at least one loss weight must be positive")


def _native_points(pixels, depth, frames, traj: Trajectory) -> np.ndarray:
    if len(frames) and (frames.min() < 0 or frames.max() >= len(traj)):
        raise SizeMismatch("frame index outside the trajectory")
    R = traj.rotations[frames]
    T = traj.translations[frames]
    pc = depth[:, None] * np.stack(
        [(pixels[:, 0] - traj.intrinsics.cx) / traj.intrinsics.fx,
         (pixels[:, 1] - traj.intrinsics.cy) / traj.intrinsics.fy,
         np.ones(len(depth))], axis=1)
    return np.einsum("nji,nj->ni", R, pc - T)


def track_points(tracks: TrackedCorrespondences, trajs: Sequence[Trajectory]):
    """Native-frame back-projections of both track endpoints."""
    p0 = _native_points(tracks.pixels0, tracks.depth0, tracks.frames, trajs[0])
    p1 = _native_points(tracks.pixels1, tracks.depth1, tracks.frames, trajs[1])
    return p0, p1


def _track_eval(p0, p1, w, offsets: OffsetParams, grad: bool):
    n = len(w)
    R0, R1 = yaw_rotation(offsets.yaw[0]), yaw_rotation(offsets.yaw[1])
    q0 = p0 @ R0.T + offsets.translation[0]
    q1 = p1 @ R1.T + offsets.translation[1]
    r = q0 - q1
    value = float(np.sum(w * np.sum(r * r, axis=1)) / n)
    if not grad:
        return value, None
    g = np.zeros((len(offsets), 4))
    wr = (2.0 / n) * w[:, None] * r
    g[0, 1:] = wr.sum(axis=0)
    g[1, 1:] = -g[0, 1:]
    g[0, 0] = np.sum(wr * (p0 @ yaw_rotation_derivative(offsets.yaw[0]).T))
    g[1, 0] = -np.sum(wr * (p1 @ yaw_rotation_derivative(offsets.yaw[1]).T))
    return value, g


def track_loss(tracks: TrackedCorrespondences, offsets: OffsetParams,
               trajs: Sequence[Trajectory]) -> float:
    """Weighted mean squared distance between the two views' back-projections.

    Normalized by the number of correspondences.
    """
    if len(tracks) == 0:
        raise EmptyCorrespondences("no tracked correspondences")
    p0, p1 = track_points(tracks, trajs)
    return _track_eval(p0, p1, tracks.weight, offsets, grad=False)[0]


def _as_points(c) -> np.ndarray:
    return c.points if isinstance(c, PointCloud) else np.asarray(c, dtype=float).reshape(-1, 3)


def chamfer(a, b, tree_b: Optional[kernels.KDTree] = None) -> float:
    """Symmetric Chamfer distance: mean squared NN distance both ways, summed."""
    A, B = _as_points(a), _as_points(b)
    if len(A) == 0 or len(B) == 0:
        raise EmptyCloud("Chamfer distance needs two non-empty clouds")
    d_ab, _ = (tree_b or kernels.KDTree(B)).query(A)
    d_ba, _ = kernels.KDTree(A).query(B)
    return float(np.mean(d_ab) + np.mean(d_ba))


def chamfer_brute(a, b) -> float:
    """O(nm) reference evaluation of :func:`chamfer`."""
    A, B = _as_points(a), _as_points(b)
    if len(A) == 0 or len(B) == 0:
        raise EmptyCloud("Chamfer distance needs two non-empty clouds")
    return float(np.mean(kernels.brute_nearest(A, B)[0]) + np.mean(kernels.brute_nearest(B, A)[0]))


def _chamfer_eval(local, glob, tree_g, yaw, t, grad: bool):
    R = yaw_rotation(yaw)
    A = local @ R.T + t
    d_ag, i_ag = tree_g.query(A)
    d_ga, i_ga = kernels.KDTree(A).query(glob)
    value = float(np.mean(d_ag) + np.mean(d_ga))
    if not grad:
        return value, None
    gA = (2.0 / len(A)) * (A - glob[i_ag])
    # each global point pulls on its nearest transformed local point
    np.add.at(gA, i_ga, (2.0 / len(glob)) * (A[i_ga] - glob))
    g = np.empty(4)
    g[1:] = gA.sum(axis=0)
    g[0] = np.sum(gA * (local @ yaw_rotation_derivative(yaw).T))
    return value, g


def _ba_eval(obs: LandmarkObservations, landmarks, traj: Trajectory, yaw, t, grad: bool):
    X = landmarks[obs.landmark_ids]
    R = traj.rotations[obs.frames]
    T = traj.translations[obs.frames]
    Rz = yaw_rotation(yaw)
    Y = (X - t) @ Rz  # Rz^T (X - t), row-wise
    xc = np.einsum("nij,nj->ni", R, Y) + T
    z = xc[:, 2]
    keep = z > MIN_DEPTH
    dropped = int(np.count_nonzero(~keep))
    if dropped:
        log.info("ba loss: dropped %d observations behind the camera", dropped)
    m = int(np.count_nonzero(keep))
    if m == 0:
        return 0.0, (np.zeros(4) if grad else None), dropped
    k = traj.intrinsics
    xc, z, R, Y, X, px = xc[keep], z[keep], R[keep], Y[keep], X[keep], obs.pixels[keep]
    proj = np.stack([k.fx * xc[:, 0] / z + k.cx, k.fy * xc[:, 1] / z + k.cy], axis=1)
    e = px - proj
    value = float(np.sum(e * e) / m)
    if not grad:
        return value, None, dropped
    gp = (-2.0 / m) * e
    gx = np.stack([gp[:, 0] * k.fx / z, gp[:, 1] * k.fy / z,
                   -(gp[:, 0] * k.fx * xc[:, 0] + gp[:, 1] * k.fy * xc[:, 1]) / (z * z)], axis=1)
    gY = np.einsum("nij,ni->nj", R, gx)
    g = np.empty(4)
    g[1:] = -(gY.sum(axis=0) @ Rz.T)
    dRz = yaw_rotation_derivative(yaw)
    g[0] = np.sum(gY * ((X - t) @ dRz))
    return value, g, dropped


def ba_loss(obs: LandmarkObservations, landmarks, offsets: OffsetParams, trajs: Sequence[Trajectory],
            view: int = 0) -> float:
    """Mean squared reprojection error (px^2) of fixed landmarks in one view.

    Observations that fall behind the offset-adjusted camera are excluded from
    both the sum and the count.
    """
    landmarks = np.asarray(landmarks, dtype=float).reshape(-1, 3)
    if len(obs) and (obs.landmark_ids.min() < 0 or obs.landmark_ids.max() >= len(landmarks)):
        raise SizeMismatch("landmark id outside the landmark table")
    return _ba_eval(obs, landmarks, trajs[view], offsets.yaw[view], offsets.translation[view],
                    grad=False)[0]


@dataclass
class LossBreakdown:
    total: float
    track: float
    chamfer: tuple
    ba: tuple
    weights: LossWeights = field(default_factory=LossWeights)

    def as_dict(self) -> dict:
        return {"total": self.total, "track": self.track, "chamfer": list(self.chamfer),
                "ba": list(self.ba)}


class CalibrationProblem:
    """All calibration inputs with native-frame quantities precomputed.

    ``clouds[v]`` is view ``v``'s human-free local cloud in its native frame,
    ``global_cloud`` the scene reconstruction (one cloud, or one per view);
    ``landmark_obs[v]`` are view ``v``'s observations of rows of ``landmarks``.  Any of them may be
    ``None`` for a view, which removes that term.
    """

    def __init__(self, trajs: Sequence[Trajectory], tracks: Optional[TrackedCorrespondences] = None,
                 clouds: Optional[Sequence] = None, global_cloud=None,
                 landmark_obs: Optional[Sequence] = None, landmarks=None):
        self.trajs = list(trajs)
        n = len(self.trajs)
        self.tracks = tracks if tracks is not None and len(tracks) else None
        if self.tracks is not None and n < 2:
            raise SizeMismatch("tracks need two views")
        self.clouds = [None if c is None else _as_points(c) for c in (clouds or [None] * n)]
        # one scene cloud shared by all views, or one (cropped) cloud per view
        if isinstance(global_cloud, (list, tuple)):
            if len(global_cloud) != n:
                raise SizeMismatch("need one global cloud per view")
            self.global_clouds = [None if g is None else _as_points(g) for g in global_cloud]
        else:
            g = None if global_cloud is None else _as_points(global_cloud)
            self.global_clouds = [g] * n
        self.landmark_obs = list(landmark_obs or [None] * n)
        self.landmarks = None if landmarks is None else np.asarray(landmarks, dtype=float).reshape(-1, 3)
        if len(self.clouds) != n or len(self.landmark_obs) != n:
            raise SizeMismatch("per-view inputs must match the number of trajectories")
        for c in self.clouds:
            if c is not None and len(c) == 0:
                raise EmptyCloud("empty local cloud")
        for g in self.global_clouds:
            if g is not None and len(g) == 0:
                raise EmptyCloud("empty global cloud")
        for o in self.landmark_obs:
            if o is not None and len(o):
                if self.landmarks is None:
                    raise SizeMismatch("landmark observations without a landmark table")
                if o.landmark_ids.min() < 0 or o.landmark_ids.max() >= len(self.landmarks):
                    raise SizeMismatch("landmark id outside the landmark table")
        self._track_pts = track_points(self.tracks, self.trajs) if self.tracks is not None else None
        trees = {}
        self._trees = []
        for g in self.global_clouds:
            if g is None:
                self._trees.append(None)
                continue
            if id(g) not in trees:
                trees[id(g)] = kernels.KDTree(g)
            self._trees.append(trees[id(g)])

    @property
    def global_cloud(self):
        return self.global_clouds[0] if self.global_clouds else None

    @property
    def n_views(self) -> int:
        return len(self.trajs)

    def subproblem(self, v: int) -> "CalibrationProblem":
        """Single-view problem for view ``v`` (no track term)."""
        return CalibrationProblem([self.trajs[v]], None, [self.clouds[v]], [self.global_clouds[v]],
                                  [self.landmark_obs[v]], self.landmarks)

    def has_track(self) -> bool:
        return self.tracks is not None

    def cropped(self, offsets: "OffsetParams", margin: float) -> "CalibrationProblem":
        """Copy whose per-view scene clouds keep only points within ``margin``
        of the view's local cloud placed by ``offsets``."""
        out = []
        for v in range(self.n_views):
            g, c = self.global_clouds[v], self.clouds[v]
            if g is None or c is None:
                out.append(g)
                continue
            A = c @ yaw_rotation(offsets.yaw[v]).T + offsets.translation[v]
            d, _ = kernels.KDTree(A).query(g)
            keep = d <= margin * margin
            if not np.any(keep):
                raise EmptyCloud(f"no scene points within {margin} m of view {v}'s cloud")
            out.append(g[keep])
        p = CalibrationProblem.__new__(CalibrationProblem)
        p.__dict__.update(self.__dict__)
        p.global_clouds = out
        p._trees = [None if g is None else kernels.KDTree(g) for g in out]
        return p

    def evaluate(self, offsets: OffsetParams, weights: LossWeights, grad: bool = False):
        """Return ``(LossBreakdown, gradient or None)``; gradient is ``(V, 4)``
        ordered ``(yaw, tx, ty, tz)``."""
        V = self.n_views
        if len(offsets) != V:
            raise SizeMismatch(f"{len(offsets)} offsets for {V} views")
        g = np.zeros((V, 4)) if grad else None
        track = 0.0
        if self._track_pts is not None and weights.track > 0:
            track, gt = _track_eval(*self._track_pts, self.tracks.weight, offsets, grad)
            if grad:
                g += weights.track * gt
        chs, bas = [], []
        for v in range(V):
            ch = 0.0
            if self.clouds[v] is not None and self._trees[v] is not None and weights.chamfer > 0:
                ch, gc = _chamfer_eval(self.clouds[v], self.global_clouds[v], self._trees[v],
                                       offsets.yaw[v], offsets.translation[v], grad)
                if grad:
                    g[v] += weights.chamfer * gc
            ba = 0.0
            obs = self.landmark_obs[v]
            if obs is not None and len(obs) and weights.ba > 0:
                ba, gb, _ = _ba_eval(obs, self.landmarks, self.trajs[v], offsets.yaw[v],
                                     offsets.translation[v], grad)
                if grad:
                    g[v] += weights.ba * gb
            chs.append(ch)
            bas.append(ba)
        total = weights.track * track
        for v in range(V):
            total += weights.chamfer * chs[v]
        for v in range(V):
            total += weights.ba * bas[v]
        return LossBreakdown(float(total), float(track), tuple(chs), tuple(bas), weights), g


def composite_loss(weights: LossWeights, problem: CalibrationProblem,
                   offsets: OffsetParams) -> LossBreakdown:
    """Weighted sum of the track term, per-view Chamfer and per-view BA terms."""
    return problem.evaluate(offsets, weights, grad=False)[0]
