"""Synthetic worlds with exact ground truth.

A bundle holds a primitive scene, a procedural walk of the kinematic
skeleton, two handheld cameras that follow the performer, and every
observation the pipeline consumes: 2D keypoints, cross-view point tracks,
landmark observations, per-view local clouds, a global scene cloud, sparse
registered poses, scan depth frames and contact markers.  Each view's
trajectory is delivered in its own native frame; the true offsets that map
native to world are stored alongside.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np

from .alignment import Overlap, apply_offset_to_trajectory
from .errors import SpecInvalid
from .fusion import DEPTH_LIMITS, DepthFrame
from .geometry import (
    Intrinsics,
    PointCloud,
    Pose,
    SimilarityTransform,
    Trajectory,
    project_points,
    so3_exp,
    yaw_rotation,
)
from .losses import LandmarkObservations, TrackedCorrespondences
from .motion_fit import ContactAnnotation
from .skeleton import N_JOINTS, N_SHAPE, PARENTS, SkeletonModel, SkeletonParams, forward_kinematics
from .triangulation import Keypoints2D

EPS = 1e-9


# --------------------------------------------------------------------------- scene


@dataclass(frozen=True)
class Box:
    center: tuple
    half: tuple
    yaw: float = 0.0


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float


@dataclass(frozen=True)
class SyntheticScene:
    boxes: tuple
    spheres: tuple
    scene_class: str = "indoor"
    seed: int = 0

    def raycast(self, origins, dirs) -> np.ndarray:
        """Ray parameter of the first hit along ``origins + t * dirs`` (inf on miss).

        ``dirs`` need not be unit length.
        """
        o = np.asarray(origins, dtype=float).reshape(-1, 3)
        d = np.asarray(dirs, dtype=float).reshape(-1, 3)
        o = np.broadcast_to(o, d.shape)
        best = np.full(len(d), np.inf)
        for b in self.boxes:
            best = np.minimum(best, _ray_box(o, d, b))
        for s in self.spheres:
            best = np.minimum(best, _ray_sphere(o, d, s))
        return best

    def sample_surface(self, spacing: float, bounds=None) -> np.ndarray:
        """Points on every primitive surface on a regular grid of ``spacing``.

        ``bounds`` (``(lo, hi)`` 3-vectors) crops the result.
        """
        pts = [_box_surface(b, spacing) for b in self.boxes]
        pts += [_sphere_surface(s, spacing) for s in self.spheres]
        P = np.concatenate(pts, axis=0)
        if bounds is not None:
            lo, hi = (np.asarray(x, dtype=float) for x in bounds)
            P = P[np.all((P >= lo) & (P <= hi), axis=1)]
        # drop points buried inside another primitive
        inside = np.zeros(len(P), dtype=bool)
        for b in self.boxes:
            inside |= _inside_box(P, b, -1e-6)
        for s in self.spheres:
            inside |= np.linalg.norm(P - np.asarray(s.center), axis=1) < s.radius - 1e-6
        return P[~inside]


def _box_frame(b: Box):
    return np.asarray(b.center, dtype=float), np.asarray(b.half, dtype=float), yaw_rotation(b.yaw)


def _ray_box(o, d, b: Box) -> np.ndarray:
    c, h, R = _box_frame(b)
    ol = (o - c) @ R
    dl = d @ R
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-h - ol) / dl
        t2 = (h - ol) / dl
    par = dl == 0
    inside_slab = np.abs(ol) <= h
    t1 = np.where(par, np.where(inside_slab, -np.inf, np.inf), t1)
    t2 = np.where(par, np.where(inside_slab, np.inf, -np.inf), t2)
    tmin = np.max(np.minimum(t1, t2), axis=1)
    tmax = np.min(np.maximum(t1, t2), axis=1)
    hit = (tmax >= tmin) & (tmax > EPS)
    t = np.where(tmin > EPS, tmin, tmax)
    return np.where(hit, t, np.inf)


def _ray_sphere(o, d, s: Sphere) -> np.ndarray:
    oc = o - np.asarray(s.center, dtype=float)
    a = np.sum(d * d, axis=1)
    b = np.sum(oc * d, axis=1)
    c = np.sum(oc * oc, axis=1) - s.radius ** 2
    disc = b * b - a * c
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0 = (-b - sq) / a
    t1 = (-b + sq) / a
    t = np.where(t0 > EPS, t0, t1)
    return np.where((disc >= 0) & (t > EPS), t, np.inf)


def _inside_box(P, b: Box, margin=0.0) -> np.ndarray:
    c, h, R = _box_frame(b)
    pl = (P - c) @ R
    return np.all(np.abs(pl) < h + margin, axis=1)


def _box_surface(b: Box, spacing: float) -> np.ndarray:
    c, h, R = _box_frame(b)
    faces = []
    for ax in range(3):
        u, v = [a for a in range(3) if a != ax]
        nu = max(int(math.ceil(2 * h[u] / spacing)), 1)
        nv = max(int(math.ceil(2 * h[v] / spacing)), 1)
        gu = -h[u] + (np.arange(nu) + 0.5) * (2 * h[u] / nu)
        gv = -h[v] + (np.arange(nv) + 0.5) * (2 * h[v] / nv)
        U, V = np.meshgrid(gu, gv, indexing="ij")
        for sign in (-1.0, 1.0):
            p = np.zeros((U.size, 3))
            p[:, ax] = sign * h[ax]
            p[:, u] = U.ravel()
            p[:, v] = V.ravel()
            faces.append(p)
    return np.concatenate(faces) @ R.T + c


def _sphere_surface(s: Sphere, spacing: float) -> np.ndarray:
    n = max(int(4 * math.pi * s.radius ** 2 / spacing ** 2), 8)
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = math.pi * (1 + 5 ** 0.5) * i
    u = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
    return np.asarray(s.center, dtype=float) + s.radius * u


# --------------------------------------------------------------------------- specs


@dataclass(frozen=True)
class SceneSpec:
    """``kind`` is ``"room"`` (furnished room), ``"ambiguity"`` (open ground
    with two small beacons along each view's optical axis, so a single view
    constrains its depth direction only weakly) or ``"cube"`` (a lone unit
    cube)."""

    kind: str = "room"
    room_half: float = 5.0
    wall_height: float = 2.8
    n_boxes: int = 8
    n_spheres: int = 3
    near_distance: float = 8.0
    far_distance: float = 25.0
    beacon_half: float = 0.08

    def __post_init__(self):
        if self.kind not in ("room", "ambiguity", "cube"):
            raise SpecInvalid(f"unknown scene kind {self.kind!r}")
        if self.room_half <= 2.0 or self.n_boxes < 0 or self.n_spheres < 0:
            raise SpecInvalid("invalid scene dimensions")

    @property
    def scene_class(self) -> str:
        return "outdoor" if self.kind == "ambiguity" else "indoor"


@dataclass(frozen=True)
class MotionSpec:
    n_frames: int = 100
    fps: float = 30.0
    speed: float = 0.8
    stand_frames: int = 12
    shape_std: float = 1.0
    path_radius: float = 1.2

    def __post_init__(self):
        if self.n_frames < 2 or self.fps <= 0 or self.speed < 0:
            raise SpecInvalid("invalid motion spec")
        if 2 * self.stand_frames >= self.n_frames:
            raise SpecInvalid("standing segments leave no walking frames")


@dataclass(frozen=True)
class CameraSpec:
    baseline_deg: float = 90.0
    distance: float = 3.0
    height: float = 1.4
    width: int = 640
    height_px: int = 480
    focal: float = 500.0
    wobble_m: float = 0.03
    wobble_rad: float = 0.01

    def __post_init__(self):
        if not 0 < self.baseline_deg < 180:
            raise SpecInvalid("baseline angle must be in (0, 180) degrees")
        if self.distance <= 0.5 or self.focal <= 0 or self.width < 16 or self.height_px < 16:
            raise SpecInvalid("invalid camera spec")

    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.focal, self.focal, self.width / 2, self.height_px / 2, self.width,
                          self.height_px)


@dataclass(frozen=True)
class ObservationSpec:
    track_stride: int = 5
    tracks_per_frame: int = 30
    n_landmarks: int = 150
    ba_stride: int = 5
    cloud_stride: int = 10
    cloud_grid: tuple = (40, 30)
    cloud_voxel: float = 0.05
    global_spacing: float = 0.03
    global_margin: float = 0.3
    registration_stride: int = 10
    max_offset_yaw: float = math.pi
    max_offset_t: float = 2.0
    scan_grid: tuple = (80, 60)

    def __post_init__(self):
        for k in ("track_stride", "ba_stride", "cloud_stride", "registration_stride"):
            if getattr(self, k) < 1:
                raise SpecInvalid(f"{k} must be at least 1")


@dataclass(frozen=True)
class NoiseSpec:
    """Noise levels; all non-negative.  ``depth_rel`` is relative to depth,
    ``traj_m``/``traj_rad`` perturb native camera centers and rotations."""

    keypoint_px: float = 0.0
    track_px: float = 0.0
    landmark_px: float = 0.0
    depth_rel: float = 0.0
    cloud_m: float = 0.0
    traj_m: float = 0.0
    traj_rad: float = 0.0
    dropout: float = 0.0
    registration_m: float = 0.0
    registration_rad: float = 0.0

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not (np.isfinite(v) and v >= 0):
                raise SpecInvalid(f"noise level {k} must be finite and non-negative")
        if self.dropout > 1:
            raise SpecInvalid("dropout rate must be at most 1")


# --------------------------------------------------------------------------- bundle


@dataclass
class Bundle:
    scene: SyntheticScene
    model: SkeletonModel
    params: SkeletonParams
    joints: np.ndarray
    world_trajs: List[Trajectory]
    native_trajs: List[Trajectory]
    offsets: List[SimilarityTransform]
    keypoints: List[Keypoints2D]
    tracks: TrackedCorrespondences
    landmarks: np.ndarray
    landmark_obs: List[LandmarkObservations]
    local_clouds: List[PointCloud]
    global_cloud: PointCloud
    registrations: List[list]
    contact: ContactAnnotation
    seed: int = 0
    fps: float = 30.0
    meta: dict = field(default_factory=dict)

    @property
    def n_views(self) -> int:
        return len(self.world_trajs)

    @property
    def n_frames(self) -> int:
        return self.params.n_frames

    def view_directions(self) -> np.ndarray:
        """Mean horizontal optical-axis direction of each view, unit ``(V, 3)``."""
        out = []
        for tr in self.world_trajs:
            d = tr.rotations[:, 2, :].mean(axis=0)
            d[2] = 0.0
            out.append(d / np.linalg.norm(d))
        return np.stack(out)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream)])


# --------------------------------------------------------------------------- motion


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3 - 2 * x)


def generate_motion(model: SkeletonModel, spec: MotionSpec, seed: int,
                    center=(0.0, 0.0)) -> SkeletonParams:
    """Procedural walk: stand, walk along a gently curving path, stand."""
    rng = _rng(seed, 1)
    T = spec.n_frames
    beta = rng.normal(0.0, spec.shape_std, N_SHAPE) if spec.shape_std > 0 else np.zeros(N_SHAPE)
    t = np.arange(T)
    ramp = 10.0
    s0, s1 = spec.stand_frames, T - 1 - spec.stand_frames
    env = _smoothstep((t - s0) / ramp) * _smoothstep((s1 - t) / ramp)

    dt = 1.0 / spec.fps
    heading0 = rng.uniform(-np.pi, np.pi)
    curvature = rng.uniform(-0.6, 0.6)
    speed = spec.speed * env
    heading = heading0 + curvature * np.cumsum(speed * dt)
    step = np.stack([np.cos(heading), np.sin(heading)], axis=1) * (speed * dt)[:, None]
    xy = np.concatenate([np.zeros((1, 2)), np.cumsum(step[:-1], axis=0)])
    xy = xy - 0.5 * (xy.min(axis=0) + xy.max(axis=0))
    r = np.linalg.norm(xy, axis=1).max()
    if r > spec.path_radius:
        xy *= spec.path_radius / r
    xy += np.asarray(center, dtype=float)

    freq = 0.9  # strides per second
    phase = 2 * np.pi * freq * np.cumsum(env * dt) + rng.uniform(0, 2 * np.pi)
    s = np.sin(phase)
    pose = np.zeros((T, N_JOINTS, 3))
    pose[:, 0] = np.stack([np.zeros(T), np.zeros(T), heading - np.pi / 2], axis=1)
    amp = env
    pose[:, 1, 0] = 0.45 * amp * s  # left hip flexion (about +x swings the leg forward)
    pose[:, 2, 0] = -0.45 * amp * s
    pose[:, 4, 0] = -0.7 * amp * np.maximum(0.0, -np.cos(phase))  # knees bend backwards
    pose[:, 5, 0] = -0.7 * amp * np.maximum(0.0, np.cos(phase))
    pose[:, 7, 0] = 0.1 * amp * s
    pose[:, 8, 0] = -0.1 * amp * s
    pose[:, 3, 0] = 0.05 * amp
    pose[:, 6, 2] = 0.08 * amp * s
    # arms hang down and swing opposite to the legs
    pose[:, 16] = np.stack([-0.35 * amp * s, np.full(T, 1.25), np.zeros(T)], axis=1)
    pose[:, 17] = np.stack([0.35 * amp * s, np.full(T, -1.25), np.zeros(T)], axis=1)
    pose[:, 18, 2] = 0.3
    pose[:, 19, 2] = -0.3
    pose[:, 15, 0] = 0.05 * np.sin(0.5 * phase)

    transl = np.zeros((T, 3))
    transl[:, :2] = xy
    transl[:, 2] = 0.015 * amp * np.cos(2 * phase) - 0.015 * amp
    params = SkeletonParams(beta, pose, transl)
    # put the lowest standing foot point on the floor
    joints = forward_kinematics(model, params)
    feet = [j for pair in model.foot_joints for j in pair]
    params.transl[:, 2] -= joints[0, feet, 2].min()
    return params


def contact_from_joints(model: SkeletonModel, joints, frames) -> ContactAnnotation:
    """Markers at the centre of the two feet's lowest joints, ``c_z`` at the
    lowest foot height."""
    frames = np.asarray(frames, dtype=np.int64)
    low = []
    for pair in model.foot_joints:
        fj = joints[frames][:, list(pair)]
        k = np.argmin(fj[..., 2], axis=1)
        low.append(fj[np.arange(len(frames)), k])
    low = np.stack(low, axis=1)  # (N, 2, 3)
    markers = low.mean(axis=1)
    cz = low[..., 2].min(axis=1)
    markers[:, 2] = cz
    return ContactAnnotation(frames, markers, cz)


# --------------------------------------------------------------------------- cameras


def look_at(center, target) -> np.ndarray:
    """World-to-camera rotation with +z toward ``target`` and +y pointing down."""
    f = np.asarray(target, dtype=float) - np.asarray(center, dtype=float)
    f = f / np.linalg.norm(f)
    x = np.cross(f, [0.0, 0.0, 1.0])
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    return np.stack([x, y, f])


def generate_cameras(params: SkeletonParams, spec: CameraSpec, seed: int, fps: float,
                     azimuth: Optional[float] = None) -> List[Trajectory]:
    """Two cameras that follow the pelvis at fixed world azimuths
    ``baseline`` apart, with smooth handheld wobble."""
    rng = _rng(seed, 2)
    T = params.n_frames
    if azimuth is None:
        azimuth = rng.uniform(-np.pi, np.pi)
    half = np.deg2rad(spec.baseline_deg) / 2
    k = spec.intrinsics()
    ts = np.arange(T) / fps
    trajs = []
    pelvis = params.transl[:, :2]
    # heavy smoothing so the cameras pan gently
    track = np.stack([np.convolve(np.pad(pelvis[:, i], 15, mode="edge"), np.ones(31) / 31, "valid")
                      for i in range(2)], axis=1)
    for v, az in enumerate((azimuth - half, azimuth + half)):
        fr = rng.uniform(0.2, 0.6, 3)
        ph = rng.uniform(0, 2 * np.pi, 3)
        wob = spec.wobble_m * np.sin(2 * np.pi * fr[None] * ts[:, None] + ph[None])
        c = np.zeros((T, 3))
        c[:, :2] = track + spec.distance * np.array([np.cos(az), np.sin(az)])
        c[:, 2] = spec.height
        c += wob
        tgt = np.zeros((T, 3))
        tgt[:, :2] = pelvis
        tgt[:, 2] = 0.9
        R = np.stack([look_at(c[i], tgt[i]) for i in range(T)])
        roll = spec.wobble_rad * np.sin(2 * np.pi * 0.3 * ts + ph[0])
        R = so3_exp(np.stack([np.zeros(T), np.zeros(T), roll], axis=1)) @ R
        Tr = -np.einsum("nij,nj->ni", R, c)
        trajs.append(Trajectory(f"v{v + 1}", ts, R, Tr, k))
    return trajs


# --------------------------------------------------------------------------- scenes


def _seg_dist(p, a, b):
    """Distance from points ``p`` (N, 2) to segments ``a -> b`` (M, 2); (N, M)."""
    ab = b - a
    ap = p[:, None] - a[None]
    t = np.clip(np.sum(ap * ab[None], axis=2) / np.maximum(np.sum(ab * ab, axis=1), 1e-12), 0, 1)
    q = a[None] + t[..., None] * ab[None]
    return np.linalg.norm(p[:, None] - q, axis=2)


def generate_scene(spec: SceneSpec, seed: int, params: Optional[SkeletonParams] = None,
                   trajs: Optional[List[Trajectory]] = None) -> SyntheticScene:
    rng = _rng(seed, 3)
    if spec.kind == "cube":
        return SyntheticScene((Box((0.0, 0.0, 0.0), (0.5, 0.5, 0.5)),), (), "indoor", seed)
    if spec.kind == "ambiguity":
        boxes = [Box((0.0, 0.0, -0.05), (spec.far_distance + 10, spec.far_distance + 10, 0.05))]
        if trajs is not None:
            for tr in trajs:
                c = tr.centers.mean(axis=0)
                d = tr.rotations[:, 2, :].mean(axis=0)
                d[2] = 0
                d /= np.linalg.norm(d)
                side = np.array([-d[1], d[0], 0.0])
                # two small beacons near the optical axis: parallax between
                # them pins lateral motion, their narrow extent leaves depth weak
                near = c + spec.near_distance * d + rng.uniform(-0.3, 0.3) * side
                far = c + spec.far_distance * d + rng.choice([-1.0, 1.0]) * 1.2 * side
                for p in (near, far):
                    boxes.append(Box((p[0], p[1], c[2] + rng.uniform(-0.1, 0.1)),
                                     (spec.beacon_half,) * 3, float(rng.uniform(0, np.pi))))
        return SyntheticScene(tuple(boxes), (), "outdoor", seed)

    H, W = spec.room_half, spec.wall_height
    boxes = [
        Box((0.0, 0.0, -0.05), (H + 0.1, H + 0.1, 0.05)),
        Box((H + 0.05, 0.0, W / 2), (0.05, H + 0.1, W / 2)),
        Box((-H - 0.05, 0.0, W / 2), (0.05, H + 0.1, W / 2)),
        Box((0.0, H + 0.05, W / 2), (H + 0.1, 0.05, W / 2)),
        Box((0.0, -H - 0.05, W / 2), (H + 0.1, 0.05, W / 2)),
    ]
    spheres = []
    if params is None or trajs is None:
        path = np.zeros((1, 2))
        cams = np.zeros((1, 2))
        segs_a = segs_b = np.zeros((1, 2))
    else:
        path = params.transl[:, :2]
        cams = np.concatenate([tr.centers[:, :2] for tr in trajs])
        segs_a = cams[::5]
        segs_b = np.concatenate([path[::5]] * len(trajs))
    center = path.mean(axis=0)
    placed = []
    n_target = spec.n_boxes + spec.n_spheres
    for _ in range(4000):
        if len(placed) >= n_target:
            break
        ang = rng.uniform(-np.pi, np.pi)
        rad = rng.uniform(1.0, 4.0)
        p = center + rad * np.array([np.cos(ang), np.sin(ang)])
        is_box = len(placed) < spec.n_boxes
        size = rng.uniform(0.2, 0.5) if is_box else rng.uniform(0.18, 0.35)
        reach = size * (math.sqrt(2) if is_box else 1.0)
        if np.any(np.abs(p) + reach > H - 0.1):
            continue
        if np.min(np.linalg.norm(path - p, axis=1)) < reach + 0.6:
            continue
        if np.min(np.linalg.norm(cams - p, axis=1)) < reach + 0.5:
            continue
        if np.min(_seg_dist(p[None], segs_a, segs_b)) < reach + 0.25:
            continue
        if any(np.linalg.norm(p - q) < reach + r + 0.1 for q, r in placed):
            continue
        placed.append((p, reach))
        if is_box:
            hz = rng.uniform(0.25, 0.6)
            hy = rng.uniform(0.2, 0.5)
            boxes.append(Box((p[0], p[1], hz), (size, min(hy, size), hz), float(rng.uniform(0, np.pi))))
        else:
            spheres.append(Sphere((p[0], p[1], size), size))
    return SyntheticScene(tuple(boxes), tuple(spheres), spec.scene_class, seed)


# --------------------------------------------------------------------------- rendering


def render_depth(scene: SyntheticScene, pose: Pose, k: Intrinsics, grid=None, max_depth=np.inf):
    """Z-depth at pixel centers (or at the ``grid`` ``(nu, nv)`` subsample).

    Returns ``(pixels (N, 2), depth (N,))``; misses and far hits get depth 0.
    """
    if grid is None:
        us = np.arange(k.width, dtype=float)
        vs = np.arange(k.height, dtype=float)
    else:
        us = (np.arange(grid[0]) + 0.5) * (k.width / grid[0])
        vs = (np.arange(grid[1]) + 0.5) * (k.height / grid[1])
    U, V = np.meshgrid(us, vs)
    q = np.stack([U.ravel(), V.ravel()], axis=1)
    rays_c = np.stack([(q[:, 0] - k.cx) / k.fx, (q[:, 1] - k.cy) / k.fy, np.ones(len(q))], axis=1)
    dirs = rays_c @ pose.rotation
    t = scene.raycast(pose.center[None], dirs)
    depth = np.where(np.isfinite(t) & (t <= max_depth), t, 0.0)
    return q, depth


def depth_image(scene: SyntheticScene, pose: Pose, k: Intrinsics, max_depth=np.inf) -> np.ndarray:
    _, d = render_depth(scene, pose, k, None, max_depth)
    return d.reshape(k.height, k.width)


def voxel_downsample(P: np.ndarray, voxel: float) -> np.ndarray:
    """Keep the first point falling in each voxel (deterministic)."""
    if len(P) == 0:
        return P
    key = np.floor(P / voxel).astype(np.int64)
    _, first = np.unique(key, axis=0, return_index=True)
    return P[np.sort(first)]


def scan_poses(center, n_yaw: int = 8, radii=(0.5, 2.0), height: float = 1.5,
               pitch: float = -0.5) -> List[Pose]:
    """Poses of a room scan: at each ring position look outward and inward."""
    poses = []
    cx, cy = float(center[0]), float(center[1])
    for r in radii:
        for i in range(n_yaw):
            a = 2 * np.pi * i / n_yaw
            c = np.array([cx + r * np.cos(a), cy + r * np.sin(a), height])
            for sgn in (1.0, -1.0):
                d = np.array([sgn * np.cos(a) * np.cos(pitch), sgn * np.sin(a) * np.cos(pitch),
                              np.sin(pitch)])
                poses.append(Pose.from_center(look_at(c, c + d), c))
    return poses


def scan_frames(scene: SyntheticScene, center, k: Intrinsics) -> List[DepthFrame]:
    return [DepthFrame(depth_image(scene, p, k), p, k, scene.scene_class)
            for p in scan_poses(center)]


# --------------------------------------------------------------------------- observations


BONE_RADII = np.array([0.0, 0.09, 0.09, 0.1, 0.07, 0.07, 0.12, 0.05, 0.05, 0.12, 0.04, 0.04,
                       0.06, 0.06, 0.06, 0.09, 0.05, 0.05, 0.045, 0.045, 0.04, 0.04, 0.03, 0.03])


def project_sequence(points, tr: Trajectory):
    """Project per-frame points ``(T, N, 3)`` with the matching poses of ``tr``."""
    T = len(points)
    xc = np.einsum("tab,tnb->tna", tr.rotations[:T], points) + tr.translations[:T, None]
    k = tr.intrinsics
    z = xc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([k.fx * xc[..., 0] / z + k.cx, k.fy * xc[..., 1] / z + k.cy], axis=-1)
    uv[z <= 1e-9] = np.nan
    return uv, z


def _in_image(uv, k: Intrinsics, margin=1.0):
    return ((uv[:, 0] >= margin) & (uv[:, 0] <= k.width - 1 - margin)
            & (uv[:, 1] >= margin) & (uv[:, 1] <= k.height - 1 - margin))


def sample_tracks(joints, trajs: List[Trajectory], spec: ObservationSpec, seed: int
                  ) -> TrackedCorrespondences:
    """Body-surface points seen by both views on keyframes."""
    rng = _rng(seed, 4)
    cols = {k: [] for k in ("frames", "p0", "d0", "p1", "d1")}
    bones = np.arange(1, N_JOINTS)
    for t in range(0, len(joints), spec.track_stride):
        n_need = spec.tracks_per_frame
        got = 0
        for _ in range(20):
            m = 4 * n_need
            j = rng.choice(bones, m)
            u = rng.uniform(0, 1, m)
            a = joints[t, PARENTS[j]]
            b = joints[t, j]
            axis = b - a
            axis /= np.maximum(np.linalg.norm(axis, axis=1, keepdims=True), 1e-12)
            r = rng.normal(size=(m, 3))
            r -= np.sum(r * axis, axis=1, keepdims=True) * axis
            r /= np.maximum(np.linalg.norm(r, axis=1, keepdims=True), 1e-12)
            p = a + u[:, None] * (b - a) + BONE_RADII[j][:, None] * r
            ok = np.ones(m, dtype=bool)
            obs = []
            for tr in trajs:
                c = tr.centers[t]
                to_cam = c - p
                ok &= np.sum(r * to_cam, axis=1) > 0.2 * np.linalg.norm(to_cam, axis=1)
                uv, z = project_points(p, tr.rotations[t], tr.translations[t], tr.intrinsics)
                ok &= (z > 0.1) & _in_image(np.nan_to_num(uv, nan=-1.0), tr.intrinsics)
                obs.append((uv, z))
            idx = np.nonzero(ok)[0][: n_need - got]
            cols["frames"].append(np.full(len(idx), t))
            cols["p0"].append(obs[0][0][idx])
            cols["d0"].append(obs[0][1][idx])
            cols["p1"].append(obs[1][0][idx])
            cols["d1"].append(obs[1][1][idx])
            got += len(idx)
            if got >= n_need:
                break
    cat = {k: np.concatenate(v) for k, v in cols.items()}
    n = len(cat["frames"])
    return TrackedCorrespondences(cat["frames"], cat["p0"], cat["d0"], np.ones(n), cat["p1"],
                                  cat["d1"], np.ones(n))


def sample_landmarks(scene: SyntheticScene, trajs: List[Trajectory], spec: ObservationSpec,
                     seed: int, min_height: float = -np.inf) -> np.ndarray:
    """Scene points hit by random pixels of random keyframes of every view.

    Points lower than ``min_height`` are rejected (used to keep landmarks off
    the ground).
    """
    rng = _rng(seed, 5)
    per_view = int(math.ceil(spec.n_landmarks / len(trajs)))
    out = []
    for tr in trajs:
        k = tr.intrinsics
        pts = []
        for _ in range(100000):
            if sum(len(p) for p in pts) >= per_view:
                break
            t = int(rng.integers(len(tr)))
            q = np.stack([rng.uniform(0, k.width, 256), rng.uniform(0, k.height, 256)], axis=1)
            rays = np.stack([(q[:, 0] - k.cx) / k.fx, (q[:, 1] - k.cy) / k.fy, np.ones(256)], axis=1)
            pose = tr[t]
            dirs = rays @ pose.rotation
            hit = scene.raycast(pose.center[None], dirs)
            ok = np.isfinite(hit)
            p = pose.center + hit[ok, None] * dirs[ok]
            pts.append(p[p[:, 2] >= min_height])
        else:
            raise SpecInvalid("could not place enough landmarks")
        out.append(np.concatenate(pts)[:per_view])
    return np.concatenate(out)[: spec.n_landmarks]


def observe_landmarks(scene: SyntheticScene, landmarks, tr: Trajectory, stride: int
                      ) -> LandmarkObservations:
    """Unoccluded in-image projections of ``landmarks`` every ``stride`` frames."""
    frames, ids, px = [], [], []
    L = len(landmarks)
    for t in range(0, len(tr), stride):
        uv, z = project_points(landmarks, tr.rotations[t], tr.translations[t], tr.intrinsics)
        ok = (z > 0.1) & _in_image(np.nan_to_num(uv, nan=-1.0), tr.intrinsics)
        c = tr.centers[t]
        hit = scene.raycast(c[None], landmarks - c)
        ok &= hit >= 1.0 - 1e-6
        idx = np.nonzero(ok)[0]
        frames.append(np.full(len(idx), t))
        ids.append(idx)
        px.append(uv[idx])
    del L
    return LandmarkObservations(np.concatenate(frames), np.concatenate(ids), np.concatenate(px))


def local_cloud(scene: SyntheticScene, tr: Trajectory, spec: ObservationSpec) -> np.ndarray:
    """World points from the view's truncated depth renders, voxel-downsampled."""
    limit = DEPTH_LIMITS[scene.scene_class]
    pts = []
    for t in range(0, len(tr), spec.cloud_stride):
        pose = tr[t]
        q, d = render_depth(scene, pose, tr.intrinsics, spec.cloud_grid, limit)
        ok = d > 0
        k = tr.intrinsics
        pc = d[ok, None] * np.stack([(q[ok, 0] - k.cx) / k.fx, (q[ok, 1] - k.cy) / k.fy,
                                     np.ones(ok.sum())], axis=1)
        pts.append((pc - pose.translation) @ pose.rotation)
    return voxel_downsample(np.concatenate(pts), spec.cloud_voxel)


def global_cloud(scene: SyntheticScene, local_world: List[np.ndarray], spacing: float,
                 margin: float = 0.3) -> np.ndarray:
    """Surface samples of the scene within ``margin`` of what the views saw."""
    allp = np.concatenate(local_world)
    lo, hi = allp.min(axis=0) - margin, allp.max(axis=0) + margin
    P = scene.sample_surface(spacing, (lo, hi))
    from scipy.spatial import cKDTree

    d, _ = cKDTree(allp).query(P)
    return P[d <= margin]


# --------------------------------------------------------------------------- generate


def random_offsets(n_views: int, spec: ObservationSpec, seed: int) -> List[SimilarityTransform]:
    rng = _rng(seed, 6)
    out = []
    for _ in range(n_views):
        yaw = rng.uniform(-spec.max_offset_yaw, spec.max_offset_yaw)
        t = rng.uniform(-spec.max_offset_t, spec.max_offset_t, 3)
        t[2] *= 0.25
        out.append(SimilarityTransform(1.0, yaw_rotation(yaw), t))
    return out


def generate(seed: int = 0, scene_spec: Optional[SceneSpec] = None,
             motion_spec: Optional[MotionSpec] = None, camera_spec: Optional[CameraSpec] = None,
             obs_spec: Optional[ObservationSpec] = None) -> Bundle:
    """Build a full noiseless bundle; pure in ``(seed, specs)``."""
    scene_spec = scene_spec or SceneSpec()
    motion_spec = motion_spec or MotionSpec()
    camera_spec = camera_spec or CameraSpec()
    obs_spec = obs_spec or ObservationSpec()
    if scene_spec.kind == "cube":
        raise SpecInvalid("the cube scene has no performer; use cube_frames()")
    model = SkeletonModel()
    params = generate_motion(model, motion_spec, seed)
    joints = forward_kinematics(model, params)
    world = generate_cameras(params, camera_spec, seed, motion_spec.fps)
    scene = generate_scene(scene_spec, seed, params, world)

    offsets = random_offsets(len(world), obs_spec, seed)
    native = [apply_offset_to_trajectory(tr, off.inverse()) for tr, off in zip(world, offsets)]

    keypoints = []
    for tr in world:
        uv, z = project_sequence(joints, tr)
        if np.any(z <= 0.1):
            raise SpecInvalid("a joint falls behind a camera; adjust the camera spec")
        conf = _in_image(uv.reshape(-1, 2), tr.intrinsics, 0.0).reshape(z.shape).astype(float)
        keypoints.append(Keypoints2D(tr.view_id, uv, conf))

    tracks = sample_tracks(joints, world, obs_spec, seed)
    landmarks = sample_landmarks(scene, world, obs_spec, seed,
                                 0.05 if scene_spec.kind == "ambiguity" else -np.inf)
    lobs = [observe_landmarks(scene, landmarks, tr, obs_spec.ba_stride) for tr in world]
    local_world = [local_cloud(scene, tr, obs_spec) for tr in world]
    # open ground: the map must extend well past every local cloud, otherwise
    # its border alone would pin the depth direction
    margin = max(obs_spec.global_margin, 1.0) if scene_spec.kind == "ambiguity" else obs_spec.global_margin
    gcloud = global_cloud(scene, local_world, obs_spec.global_spacing, margin)
    local_native = [PointCloud(off.inverse().apply(P)) for P, off in zip(local_world, offsets)]
    regs = [[(int(f), tr[int(f)]) for f in range(0, len(tr), obs_spec.registration_stride)]
            for tr in world]
    stand = np.concatenate([np.arange(0, motion_spec.stand_frames),
                            np.arange(motion_spec.n_frames - motion_spec.stand_frames,
                                      motion_spec.n_frames)])
    contact = contact_from_joints(model, joints, stand)
    meta = {"scene": scene_spec.__dict__, "motion": motion_spec.__dict__,
            "camera": camera_spec.__dict__, "observations": obs_spec.__dict__}
    return Bundle(scene, model, params, joints, world, native, offsets, keypoints, tracks,
                  landmarks, lobs, local_native, PointCloud(gcloud), regs, contact, seed,
                  motion_spec.fps, meta)


def cube_frames(n_views: int = 20, seed: int = 0, radius: float = 2.0, grid=(160, 120),
                focal: float = 140.0) -> Tuple[SyntheticScene, List[DepthFrame]]:
    """Depth frames of a lone unit cube from ``n_views`` cameras spread over a
    sphere and looking at its center."""
    scene = generate_scene(SceneSpec(kind="cube"), seed)
    k = Intrinsics(focal, focal, grid[0] / 2, grid[1] / 2, grid[0], grid[1])
    rng = _rng(seed, 7)
    frames = []
    i = np.arange(n_views) + 0.5
    phi = np.arccos(1 - 2 * i / n_views)
    theta = math.pi * (1 + 5 ** 0.5) * i + rng.uniform(0, 2 * np.pi)
    for ph, th in zip(phi, theta):
        ph = float(np.clip(ph, 0.15, np.pi - 0.15))  # keep away from the look-at singularity
        c = radius * np.array([np.cos(th) * np.sin(ph), np.sin(th) * np.sin(ph), np.cos(ph)])
        pose = Pose.from_center(look_at(c, np.zeros(3)), c)
        frames.append(DepthFrame(depth_image(scene, pose, k), pose, k, "indoor"))
    return scene, frames


# --------------------------------------------------------------------------- noise


def perturb(bundle: Bundle, noise: NoiseSpec, seed: int = 0) -> Bundle:
    """Return a copy with noisy observations; ground truth fields are shared."""
    rng = _rng(seed, 100)
    kps = []
    for kp in bundle.keypoints:
        px = kp.pixels + noise.keypoint_px * rng.normal(size=kp.pixels.shape)
        drop = rng.uniform(size=kp.conf.shape) < noise.dropout
        kps.append(Keypoints2D(kp.view_id, px, np.where(drop, 0.0, kp.conf)))
    tr = bundle.tracks
    n = len(tr)
    d0 = tr.depth0 * (1 + noise.depth_rel * rng.normal(size=n))
    d1 = tr.depth1 * (1 + noise.depth_rel * rng.normal(size=n))
    drop = rng.uniform(size=(2, n)) < noise.dropout
    tracks = TrackedCorrespondences(
        tr.frames, tr.pixels0 + noise.track_px * rng.normal(size=(n, 2)), np.maximum(d0, 1e-3),
        np.where(drop[0], 0.0, tr.conf0), tr.pixels1 + noise.track_px * rng.normal(size=(n, 2)),
        np.maximum(d1, 1e-3), np.where(drop[1], 0.0, tr.conf1))
    lobs = [LandmarkObservations(o.frames, o.landmark_ids,
                                 o.pixels + noise.landmark_px * rng.normal(size=o.pixels.shape))
            for o in bundle.landmark_obs]
    clouds = [PointCloud(c.points + noise.cloud_m * rng.normal(size=c.points.shape))
              for c in bundle.local_clouds]
    trajs = []
    for t in bundle.native_trajs:
        N = len(t)
        dR = so3_exp(noise.traj_rad * rng.normal(size=(N, 3)))
        R = dR @ t.rotations
        c = t.centers + noise.traj_m * rng.normal(size=(N, 3))
        trajs.append(Trajectory(t.view_id, t.timestamps, R, -np.einsum("nij,nj->ni", R, c),
                                t.intrinsics))
    regs = []
    for view in bundle.registrations:
        out = []
        for f, pose in view:
            R = so3_exp(noise.registration_rad * rng.normal(size=(1, 3)))[0] @ pose.rotation
            c = pose.center + noise.registration_m * rng.normal(size=3)
            out.append((f, Pose.from_center(R, c)))
        regs.append(out)
    return replace(bundle, keypoints=kps, tracks=tracks, landmark_obs=lobs, local_clouds=clouds,
                   native_trajs=trajs, registrations=regs)


# --------------------------------------------------------------------------- chunks


def make_chunks(traj: Trajectory, n_chunks: int, length: int, overlap: int, seed: int = 0,
                scale_range=(0.5, 2.0)):
    """Split ``traj`` into overlapping chunks, each expressed in its own
    random similarity frame.

    Returns ``(chunks, overlaps, truth)`` where ``truth[k]`` maps chunk ``k``'s
    frame into chunk 0's frame.
    """
    if overlap < 1 or overlap >= length:
        raise SpecInvalid("overlap must be in [1, length)")
    stepn = length - overlap
    if (n_chunks - 1) * stepn + length > len(traj):
        raise SpecInvalid("trajectory too short for the requested chunks")
    rng = _rng(seed, 8)
    frames_to_local = []
    for k in range(n_chunks):
        if k == 0:
            frames_to_local.append(SimilarityTransform.identity())
            continue
        s = float(np.exp(rng.uniform(np.log(scale_range[0]), np.log(scale_range[1]))))
        R = so3_exp(rng.normal(size=3) * 0.8)
        t = rng.uniform(-3, 3, 3)
        frames_to_local.append(SimilarityTransform(s, R, t))
    chunks, overlaps = [], []
    for k in range(n_chunks):
        a = k * stepn
        sub = traj.slice(a, a + length)
        m = frames_to_local[k]
        c = m.apply(sub.centers)
        Rw = sub.rotations @ m.rotation.T
        Tt = -np.einsum("nij,nj->ni", Rw, c)
        chunks.append((Trajectory(sub.view_id, sub.timestamps, Rw, Tt, sub.intrinsics), None))
        if k:
            overlaps.append(Overlap(stepn, 0, overlap))
    truth = [m.inverse() for m in frames_to_local]
    return chunks, overlaps, truth


# --------------------------------------------------------------------------- drift


def inject_drift(joints, seed: int = 0, trans_step: float = 0.0005, yaw_step: float = 0.0002,
                 trans_bias=(0.0005, 0.0, 0.0), yaw_bias: float = 0.0001) -> np.ndarray:
    """Accumulate a rigid world-frame drift over a joint sequence.

    Each frame adds a Gaussian increment (``trans_step`` m, ``yaw_step`` rad)
    plus a constant bias to a running yaw and translation, which is then
    applied about that frame's root joint.  Errors grow with time, so
    longer evaluation chunks see larger world-frame error.
    """
    J = np.asarray(joints, dtype=float)
    if J.ndim != 3 or J.shape[-1] != 3:
        raise SpecInvalid("joints must be (frames, joints, 3)")
    rng = _rng(seed, 9)
    T = len(J)
    dyaw = yaw_bias + yaw_step * rng.normal(size=T)
    dtr = np.asarray(trans_bias, dtype=float) + trans_step * rng.normal(size=(T, 3))
    dyaw[0] = 0.0
    dtr[0] = 0.0
    yaw = np.cumsum(dyaw)
    tr = np.cumsum(dtr, axis=0)
    out = np.empty_like(J)
    for t in range(T):
        root = J[t, 0]
        out[t] = (J[t] - root) @ yaw_rotation(yaw[t]).T + root + tr[t]
    return out
