"""Backend selection for the hot loops.

The compiled extension is used when it imports; otherwise the numpy/scipy
fallback is used.  :func:`use_backend` switches explicitly (benchmarks and
tests use it to compare both).
"""
from __future__ import annotations

import logging

import numpy as np

from . import _pykernels

log = logging.getLogger(__name__)

try:
    from . import _ckernels
except ImportError:  # pragma: no cover - depends on the build
    _ckernels = None

_backend = "cython" if _ckernels is not None else "python"


def available_backends() -> list:
    return ["cython", "python"] if _ckernels is not None else ["python"]


def backend() -> str:
    return _backend


def use_backend(name: str) -> str:
    """Select ``"cython"`` or ``"python"``; returns the previous backend."""
    global _backend
    if name not in ("cython", "python"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "cython" and _ckernels is None:
        raise RuntimeError("compiled kernels are not built")
    prev, _backend = _backend, name
    return prev


def _f64(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


class KDTree:
    """Exact nearest-neighbour index over a fixed 3D point set."""

    def __init__(self, points):
        self.points = _f64(np.asarray(points).reshape(-1, 3))
        if len(self.points) == 0:
            raise ValueError("cannot index an empty point set")
        self._backend = _backend
        if self._backend == "cython":
            self._perm, self._split = _ckernels.build_tree(self.points)
        else:
            self._tree = _pykernels.ScipyTree(self.points)

    def query(self, query):
        """Return ``(squared_distance, index)`` of the nearest point."""
        q = _f64(np.asarray(query).reshape(-1, 3))
        if len(q) == 0:
            return np.empty(0), np.empty(0, dtype=np.int64)
        if self._backend == "cython":
            return _ckernels.tree_nearest(q, self.points, self._perm, self._split)
        return self._tree.query(q)


def brute_nearest(query, ref):
    """O(nm) exact nearest neighbours, ``(squared_distance, index)``."""
    q = _f64(np.asarray(query).reshape(-1, 3))
    r = _f64(np.asarray(ref).reshape(-1, 3))
    if len(r) == 0:
        raise ValueError("empty reference set")
    if _backend == "cython":
        return _ckernels.brute_nearest(q, r)
    return _pykernels.brute_nearest(q, r)


def tsdf_integrate(sdf, weight, origin, voxel, depth, R, T, fx, fy, cx, cy, trunc, max_depth):
    """In-place TSDF band update; returns the number of voxels touched."""
    args = (_f64(origin), float(voxel), _f64(depth), _f64(R), _f64(T), float(fx), float(fy),
            float(cx), float(cy), float(trunc), float(max_depth))
    if _backend == "cython":
        return _ckernels.tsdf_integrate(sdf, weight, *args)
    return _pykernels.tsdf_integrate(sdf, weight, *args)
