"""Pure numpy/scipy versions of the compiled kernels.

Results match :mod:`dualcap._ckernels` exactly for nearest-neighbour queries
and to rounding for TSDF integration (identical operation order is used).
"""
import numpy as np
from scipy.spatial import cKDTree

_BLOCK = 1 << 20


def _sqdist_rows(q, pts):
    d = q[:, None, :] - pts[None, :, :]
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def brute_nearest(query, ref):
    n, m = len(query), len(ref)
    best = np.empty(n)
    arg = np.empty(n, dtype=np.int64)
    step = max(1, _BLOCK // max(m, 1))
    for s in range(0, n, step):
        d = _sqdist_rows(query[s:s + step], ref)
        a = np.argmin(d, axis=1)
        arg[s:s + step] = a
        best[s:s + step] = d[np.arange(len(a)), a]
    return best, arg


class ScipyTree:
    """cKDTree front end with an exact re-check of near ties."""

    def __init__(self, pts):
        self.pts = pts
        self.tree = cKDTree(pts)

    def query(self, query):
        m = len(self.pts)
        k = 2 if m > 1 else 1
        dist, idx = self.tree.query(query, k=k)
        if k == 1:
            dist = dist[:, None]
            idx = idx[:, None]
        first = idx[:, 0]
        diff = query - self.pts[first]
        best = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]
        arg = first.astype(np.int64)
        if k == 1:
            return best, arg
        # scipy's own rounding may reorder candidates within a few ulps
        close = dist[:, 1] <= dist[:, 0] * (1 + 1e-9) + 1e-300
        for i in np.nonzero(close)[0]:
            r = np.sqrt(best[i]) * (1 + 1e-9) + 1e-300
            cand = np.array(sorted(self.tree.query_ball_point(query[i], r)), dtype=np.int64)
            d = _sqdist_rows(query[i:i + 1], self.pts[cand])[0]
            j = int(np.argmin(d))
            best[i] = d[j]
            arg[i] = cand[j]
        return best, arg


def tsdf_integrate(sdf, weight, origin, voxel, depth, R, T, fx, fy, cx, cy, trunc, max_depth):
    nx, ny, nz = sdf.shape
    h, w = depth.shape
    px = (origin[0] + np.arange(nx) * voxel)[:, None, None]
    py = (origin[1] + np.arange(ny) * voxel)[None, :, None]
    pz = (origin[2] + np.arange(nz) * voxel)[None, None, :]
    zc = R[2, 0] * px + R[2, 1] * py + R[2, 2] * pz + T[2]
    ok = zc > 1e-9
    xc = R[0, 0] * px + R[0, 1] * py + R[0, 2] * pz + T[0]
    yc = R[1, 0] * px + R[1, 1] * py + R[1, 2] * pz + T[1]
    zs = np.where(ok, zc, 1.0)
    u = np.floor(fx * xc / zs + cx + 0.5)
    v = np.floor(fy * yc / zs + cy + 0.5)
    ok &= (u >= 0) & (u < w) & (v >= 0) & (v < h)
    ui = np.where(ok, u, 0).astype(np.int64)
    vi = np.where(ok, v, 0).astype(np.int64)
    d = depth[vi, ui]
    ok &= (d > 0) & (d <= max_depth)
    dist = d - zc
    ok &= dist >= -trunc
    dist = np.minimum(dist, trunc)
    # behind-surface samples lose weight linearly past one voxel
    wn = np.where(dist < -voxel, (trunc + dist) / (trunc - voxel), 1.0)
    ok &= wn > 0
    wold = weight[ok]
    wn = wn[ok]
    sdf[ok] = (wold * sdf[ok] + wn * dist[ok]) / (wold + wn)
    weight[ok] = wold + wn
    return int(ok.sum())
