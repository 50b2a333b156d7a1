# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: exact nearest-neighbour search and TSDF integration.

Squared distances are always accumulated as ``(dx*dx + dy*dy) + dz*dz`` so
that the kd-tree, the brute-force scan and the numpy fallback agree bit for
bit.  Ties resolve to the lowest reference index.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()

cdef enum:
    LEAF = 8


cdef inline double _sqdist(const double* q, const double[:, ::1] pts, Py_ssize_t j) noexcept nogil:
    cdef double dx = q[0] - pts[j, 0]
    cdef double dy = q[1] - pts[j, 1]
    cdef double dz = q[2] - pts[j, 2]
    return dx * dx + dy * dy + dz * dz


def brute_nearest(const double[:, ::1] query, const double[:, ::1] ref):
    """O(nm) scan returning ``(sqdist, index)`` for every query point."""
    cdef Py_ssize_t n = query.shape[0], m = ref.shape[0], i, j
    cdef double[::1] best = np.empty(n)
    cdef cnp.int64_t[::1] arg = np.empty(n, dtype=np.int64)
    cdef double d, b
    cdef Py_ssize_t bi
    cdef double q[3]
    with nogil:
        for i in range(n):
            q[0] = query[i, 0]
            q[1] = query[i, 1]
            q[2] = query[i, 2]
            b = _sqdist(q, ref, 0)
            bi = 0
            for j in range(1, m):
                d = _sqdist(q, ref, j)
                if d < b:
                    b = d
                    bi = j
            best[i] = b
            arg[i] = bi
    return np.asarray(best), np.asarray(arg)


cdef struct _Search:
    double best
    Py_ssize_t best_idx


cdef void _visit(const double* q, const double[:, ::1] pts, const cnp.int64_t[::1] perm,
                 const cnp.int8_t[::1] split_dim, Py_ssize_t lo, Py_ssize_t hi,
                 _Search* s) noexcept nogil:
    cdef Py_ssize_t k, j, mid
    cdef double d, diff
    cdef int dim
    if hi - lo <= LEAF:
        for k in range(lo, hi):
            j = perm[k]
            d = _sqdist(q, pts, j)
            if d < s.best or (d == s.best and j < s.best_idx):
                s.best = d
                s.best_idx = j
        return
    mid = (lo + hi) // 2
    dim = split_dim[mid]
    j = perm[mid]
    d = _sqdist(q, pts, j)
    if d < s.best or (d == s.best and j < s.best_idx):
        s.best = d
        s.best_idx = j
    diff = q[dim] - pts[j, dim]
    if diff < 0:
        _visit(q, pts, perm, split_dim, lo, mid, s)
        if diff * diff <= s.best:
            _visit(q, pts, perm, split_dim, mid + 1, hi, s)
    else:
        _visit(q, pts, perm, split_dim, mid + 1, hi, s)
        if diff * diff <= s.best:
            _visit(q, pts, perm, split_dim, lo, mid, s)


def tree_nearest(const double[:, ::1] query, const double[:, ::1] pts, const cnp.int64_t[::1] perm,
                 const cnp.int8_t[::1] split_dim):
    """Query an implicit kd-tree built by :func:`dualcap.kernels.build_tree`."""
    cdef Py_ssize_t n = query.shape[0], i
    cdef double[::1] best = np.empty(n)
    cdef cnp.int64_t[::1] arg = np.empty(n, dtype=np.int64)
    cdef _Search s
    cdef double q[3]
    cdef double inf = float("inf")
    with nogil:
        for i in range(n):
            q[0] = query[i, 0]
            q[1] = query[i, 1]
            q[2] = query[i, 2]
            s.best = inf
            s.best_idx = pts.shape[0]
            _visit(q, pts, perm, split_dim, 0, pts.shape[0], &s)
            best[i] = s.best
            arg[i] = s.best_idx
    return np.asarray(best), np.asarray(arg)


def tsdf_integrate(double[:, :, ::1] sdf, double[:, :, ::1] weight, const double[::1] origin,
                   double voxel, const double[:, ::1] depth, const double[:, ::1] R, const double[::1] T,
                   double fx, double fy, double cx, double cy, double trunc, double max_depth):
    """Weighted running-average update of every voxel inside the truncation band.

    Samples more than one voxel behind the surface get a weight falling
    linearly to zero at ``-trunc``.
    """
    cdef Py_ssize_t nx = sdf.shape[0], ny = sdf.shape[1], nz = sdf.shape[2]
    cdef Py_ssize_t h = depth.shape[0], w = depth.shape[1]
    cdef Py_ssize_t ix, iy, iz, u, v
    cdef double px, py, pz, xc, yc, zc, d, dist, wold, wn
    cdef Py_ssize_t touched = 0
    with nogil:
        for ix in range(nx):
            px = origin[0] + ix * voxel
            for iy in range(ny):
                py = origin[1] + iy * voxel
                for iz in range(nz):
                    pz = origin[2] + iz * voxel
                    zc = R[2, 0] * px + R[2, 1] * py + R[2, 2] * pz + T[2]
                    if zc <= 1e-9:
                        continue
                    xc = R[0, 0] * px + R[0, 1] * py + R[0, 2] * pz + T[0]
                    yc = R[1, 0] * px + R[1, 1] * py + R[1, 2] * pz + T[1]
                    u = <Py_ssize_t>floor(fx * xc / zc + cx + 0.5)
                    v = <Py_ssize_t>floor(fy * yc / zc + cy + 0.5)
                    if u < 0 or u >= w or v < 0 or v >= h:
                        continue
                    d = depth[v, u]
                    if d <= 0 or d > max_depth:
                        continue
                    dist = d - zc
                    if dist < -trunc:
                        continue
                    if dist > trunc:
                        dist = trunc
                    wn = 1.0
                    if dist < -voxel:
                        wn = (trunc + dist) / (trunc - voxel)
                        if wn <= 0:
                            continue
                    wold = weight[ix, iy, iz]
                    sdf[ix, iy, iz] = (wold * sdf[ix, iy, iz] + wn * dist) / (wold + wn)
                    weight[ix, iy, iz] = wold + wn
                    touched += 1
    return touched


cdef void _select(const double[:, ::1] pts, cnp.int64_t[::1] perm, Py_ssize_t lo,
                  Py_ssize_t hi, Py_ssize_t kth, int dim) noexcept nogil:
    # Hoare quickselect on perm[lo:hi] keyed by pts[perm[i], dim]
    cdef Py_ssize_t l = lo, r = hi - 1, i, j
    cdef double pivot
    cdef cnp.int64_t tmp
    while r > l:
        pivot = pts[perm[(l + r) // 2], dim]
        i = l
        j = r
        while i <= j:
            while pts[perm[i], dim] < pivot:
                i += 1
            while pts[perm[j], dim] > pivot:
                j -= 1
            if i <= j:
                tmp = perm[i]
                perm[i] = perm[j]
                perm[j] = tmp
                i += 1
                j -= 1
        if kth <= j:
            r = j
        elif kth >= i:
            l = i
        else:
            return


cdef void _build(const double[:, ::1] pts, cnp.int64_t[::1] perm, cnp.int8_t[::1] split,
                 Py_ssize_t lo, Py_ssize_t hi) noexcept nogil:
    cdef Py_ssize_t k, mid
    cdef int dim, a
    cdef double lo_c[3]
    cdef double hi_c[3]
    cdef double v, best
    if hi - lo <= LEAF:
        return
    for a in range(3):
        lo_c[a] = pts[perm[lo], a]
        hi_c[a] = lo_c[a]
    for k in range(lo + 1, hi):
        for a in range(3):
            v = pts[perm[k], a]
            if v < lo_c[a]:
                lo_c[a] = v
            if v > hi_c[a]:
                hi_c[a] = v
    dim = 0
    best = hi_c[0] - lo_c[0]
    for a in range(1, 3):
        if hi_c[a] - lo_c[a] > best:
            best = hi_c[a] - lo_c[a]
            dim = a
    mid = (lo + hi) // 2
    _select(pts, perm, lo, hi, mid, dim)
    split[mid] = dim
    _build(pts, perm, split, lo, mid)
    _build(pts, perm, split, mid + 1, hi)


def build_tree(const double[:, ::1] pts):
    """Return ``(perm, split_dim)`` describing an implicit median kd-tree."""
    cdef Py_ssize_t n = pts.shape[0]
    perm_arr = np.arange(n, dtype=np.int64)
    split_arr = np.zeros(n, dtype=np.int8)
    cdef cnp.int64_t[::1] perm = perm_arr
    cdef cnp.int8_t[::1] split = split_arr
    with nogil:
        _build(pts, perm, split, 0, n)
    return perm_arr, split_arr
