"""Truncated depth fusion into a TSDF grid, mesh extraction and cleanup."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes

from . import kernels
from .errors import EmptySurface, SpecInvalid
from .geometry import Intrinsics, Pose

log = logging.getLogger(__name__)

# depth truncation by scene class, meters
DEPTH_LIMITS = {"indoor": 3.5, "outdoor": 5.0}
DEFAULT_VOXEL = 0.02
TRUNC_VOXELS = 4.0


@dataclass(frozen=True)
class DepthFrame:
    """A metric depth image (0 marks invalid pixels) with its camera.

    Depths beyond the scene-class limit are zeroed on construction so they
    can never reach the volume.
    """

    depth: np.ndarray
    pose: Pose
    intrinsics: Intrinsics
    scene_class: str = "indoor"

    def __post_init__(self):
        if self.scene_class not in DEPTH_LIMITS:
            raise SpecInvalid(f"unknown scene class {self.scene_class!r}")
        d = np.array(self.depth, dtype=float)
        if d.ndim != 2:
            raise SpecInvalid("depth must be a 2D image")
        if d.shape != (self.intrinsics.height, self.intrinsics.width):
            raise SpecInvalid("depth image size differs from the intrinsics")
        d[~np.isfinite(d)] = 0.0
        if np.any(d < 0):
            raise SpecInvalid("depths must be non-negative")
        d[d > self.max_depth] = 0.0
        d.flags.writeable = False
        object.__setattr__(self, "depth", d)

    @property
    def max_depth(self) -> float:
        return DEPTH_LIMITS[self.scene_class]


class TsdfVolume:
    """Voxel grid of truncated signed distances (meters) and weights.

    Voxel ``(i, j, k)`` sits at ``origin + voxel_size * (i, j, k)``.
    Unobserved voxels hold ``+trunc`` with weight 0.
    """

    def __init__(self, origin, voxel_size: float = DEFAULT_VOXEL, dims=(64, 64, 64),
                 trunc: Optional[float] = None):
        if not voxel_size > 0:
            raise SpecInvalid("voxel size must be positive")
        dims = tuple(int(d) for d in dims)
        if len(dims) != 3 or min(dims) < 2:
            raise SpecInvalid("volume needs at least 2 voxels per axis")
        self.origin = np.asarray(origin, dtype=float).reshape(3)
        self.voxel_size = float(voxel_size)
        self.trunc = float(trunc) if trunc is not None else TRUNC_VOXELS * self.voxel_size
        if not self.trunc > 0:
            raise SpecInvalid("truncation margin must be positive")
        self.sdf = np.full(dims, self.trunc)
        self.weight = np.zeros(dims)

    @classmethod
    def from_bounds(cls, lo, hi, voxel_size: float = DEFAULT_VOXEL, trunc: Optional[float] = None,
                    pad: int = 2) -> "TsdfVolume":
        lo = np.asarray(lo, dtype=float) - pad * voxel_size
        hi = np.asarray(hi, dtype=float) + pad * voxel_size
        dims = np.ceil((hi - lo) / voxel_size).astype(int) + 1
        return cls(lo, voxel_size, dims, trunc)

    @property
    def dims(self) -> tuple:
        return self.sdf.shape

    def voxel_centers(self) -> np.ndarray:
        axes = [self.origin[i] + np.arange(n) * self.voxel_size for i, n in enumerate(self.dims)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def copy(self) -> "TsdfVolume":
        v = TsdfVolume(self.origin, self.voxel_size, self.dims, self.trunc)
        v.sdf[...] = self.sdf
        v.weight[...] = self.weight
        return v


def integrate(vol: TsdfVolume, frame: DepthFrame) -> TsdfVolume:
    """Weighted running-average update of every voxel inside the truncation band.

    Voxels more than ``trunc`` behind the observed surface are left alone.
    Samples behind the surface by more than one voxel get a weight that falls
    linearly to zero at ``-trunc``; this keeps voxels just past an object's
    edge from being pulled negative by grazing rays.
    Returns ``vol`` (modified in place).
    """
    k = frame.intrinsics
    n = kernels.tsdf_integrate(vol.sdf, vol.weight, vol.origin, vol.voxel_size, frame.depth,
                               frame.pose.rotation, frame.pose.translation, k.fx, k.fy, k.cx, k.cy,
                               vol.trunc, frame.max_depth)
    log.debug("integrated frame, %d voxels updated", n)
    return vol


def integrate_all(vol: TsdfVolume, frames: Iterable[DepthFrame]) -> TsdfVolume:
    for f in frames:
        integrate(vol, f)
    return vol


@dataclass
class Mesh:
    vertices: np.ndarray  # (N, 3)
    faces: np.ndarray  # (M, 3) int64

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def face_normals(self) -> np.ndarray:
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)


def _compact(vertices, faces) -> Mesh:
    used = np.unique(faces)
    remap = np.full(len(vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return Mesh(vertices[used], remap[faces])


def extract_mesh(vol: TsdfVolume) -> Mesh:
    """Marching cubes on the zero level set, restricted to observed voxels.

    Faces with a vertex on an edge touching an unobserved voxel are dropped,
    which removes the spurious surface at the boundary of the observed band.
    """
    sdf = vol.sdf
    if not (sdf.min() < 0 < sdf.max()):
        raise EmptySurface("volume has no zero crossing")
    verts, faces, _, _ = marching_cubes(sdf, level=0.0, allow_degenerate=False)
    lo = np.floor(verts).astype(np.int64)
    hi = np.minimum(np.ceil(verts).astype(np.int64), np.array(sdf.shape) - 1)
    seen = (vol.weight[lo[:, 0], lo[:, 1], lo[:, 2]] > 0) & (vol.weight[hi[:, 0], hi[:, 1], hi[:, 2]] > 0)
    faces = faces[np.all(seen[faces], axis=1)]
    if len(faces) == 0:
        raise EmptySurface("no surface inside the observed region")
    world = vol.origin + verts * vol.voxel_size
    return _compact(world, faces.astype(np.int64))


def connected_face_components(mesh: Mesh):
    """Label each face with its connected component (sharing vertices)."""
    nf = mesh.n_faces
    nv = len(mesh.vertices)
    rows = np.repeat(np.arange(nf), 3)
    g = coo_matrix((np.ones(3 * nf), (rows, nf + mesh.faces.reshape(-1))), shape=(nf + nv, nf + nv))
    n, labels = connected_components(g, directed=False)
    face_labels = labels[:nf]
    _, face_labels = np.unique(face_labels, return_inverse=True)
    return int(face_labels.max()) + 1 if nf else 0, face_labels


def clean_mesh(mesh: Mesh, min_component_fraction: float = 0.05, k_sigma: float = 3.0,
               k_neighbors: int = 8) -> Mesh:
    """Remove small components, then statistical outlier vertices.

    A component is dropped when it holds fewer than ``min_component_fraction``
    of all faces.  A vertex is an outlier when its mean distance to its
    ``k_neighbors`` nearest vertices exceeds the population mean by more than
    ``k_sigma`` standard deviations; its incident faces go with it.
    """
    if mesh.n_faces == 0:
        return Mesh(mesh.vertices[:0], mesh.faces)
    n, labels = connected_face_components(mesh)
    sizes = np.bincount(labels, minlength=n)
    keep_f = sizes[labels] >= min_component_fraction * mesh.n_faces
    m = _compact(mesh.vertices, mesh.faces[keep_f])
    if len(m.vertices) > k_neighbors:
        d, _ = cKDTree(m.vertices).query(m.vertices, k=k_neighbors + 1)
        md = d[:, 1:].mean(axis=1)
        bad = md > md.mean() + k_sigma * md.std()
        if np.any(bad):
            m = _compact(m.vertices, m.faces[~np.any(bad[m.faces], axis=1)])
    return m


def mesh_point_distance(mesh: Mesh, points) -> np.ndarray:
    """Distance from each point to the nearest mesh vertex."""
    d, _ = cKDTree(mesh.vertices).query(np.asarray(points, dtype=float).reshape(-1, 3))
    return d
