"""Compare the compiled and pure-Python kernel backends.

Times kd-tree build and query, brute-force nearest neighbours and TSDF
integration on fixed synthetic inputs, checks both backends agree, and prints
one row per kernel.

    python3 benchmarks/bench_kernels.py [--repeat N] [--points N]
"""
import argparse
import time

import numpy as np

from dualcap import kernels, synth
from dualcap.fusion import TsdfVolume


def best_of(fn, repeat):
    """Return the fastest wall time of ``repeat`` calls and the last result."""
    best, out = np.inf, None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def cases(n_points, seed=0):
    rng = np.random.default_rng(seed)
    ref = rng.normal(size=(n_points, 3))
    query = rng.normal(size=(n_points, 3))
    small_ref, small_query = ref[: n_points // 10], query[: n_points // 10]
    _, frames = synth.cube_frames(20, seed=0)

    def tree():
        return kernels.KDTree(ref).query(query)

    def brute():
        return kernels.brute_nearest(small_query, small_ref)

    def tsdf():
        vol = TsdfVolume.from_bounds([-0.6] * 3, [0.6] * 3, voxel_size=0.02)
        for f in frames:
            k = f.intrinsics
            kernels.tsdf_integrate(vol.sdf, vol.weight, vol.origin, vol.voxel_size, f.depth,
                                   f.pose.rotation, f.pose.translation, k.fx, k.fy, k.cx, k.cy,
                                   vol.trunc, f.max_depth)
        return vol.sdf, vol.weight

    return [(f"kdtree build+query ({n_points} x {n_points})", tree),
            (f"brute nearest ({len(small_query)} x {len(small_ref)})", brute),
            ("tsdf integrate (20 frames, 2 cm, 60^3)", tsdf)]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--points", type=int, default=20000)
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernels not built; timing the Python backend only")
    prev = kernels.backend()
    print(f"{'kernel':44s}" + "".join(f"{b:>12s}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    try:
        for name, fn in cases(args.points):
            times, results = [], []
            for b in backends:
                kernels.use_backend(b)
                t, out = best_of(fn, args.repeat)
                times.append(t)
                results.append(out)
            same = all(np.array_equal(x, y) for r in results[1:] for x, y in zip(results[0], r))
            row = f"{name:44s}" + "".join(f"{1000 * t:10.1f}ms" for t in times)
            if len(times) > 1:
                row += f"{times[1] / times[0]:11.1f}x" + ("" if same else "  (outputs differ)")
            print(row)
    finally:
        kernels.use_backend(prev)


if __name__ == "__main__":
    main()
