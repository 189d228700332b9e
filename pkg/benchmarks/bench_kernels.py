"""Compare the compiled spatial kernels with the numpy fallback.

Usage:
    python3 benchmarks/bench_kernels.py [--points 100000] [--queries 2000]

Both backends run in this process: ``VoxelGrid(use_kernels=False)`` forces the
numpy path, the same switch ``PVMAP_PURE_PYTHON=1`` sets at import.
"""

import argparse
import logging
import time

import numpy as np

from pvmap.spatial import HAVE_KERNELS, VoxelGrid

logger = logging.getLogger("bench_kernels")


def make_cloud(rng, n):
    xy = rng.uniform(-200, 200, (n, 2))
    z = 0.5 * np.sin(xy[:, 0] / 20) + rng.normal(0, 0.05, n)
    return np.column_stack([xy, z])


def make_rays(rng, n):
    o = np.column_stack([rng.uniform(-190, 190, (n, 2)), np.full(n, 80.0)])
    d = np.column_stack([rng.normal(0, 0.1, (n, 2)), -np.ones(n)])
    return o, d / np.linalg.norm(d, axis=1, keepdims=True)


def timed(fn, repeat=3):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=100_000)
    ap.add_argument("--queries", type=int, default=2000)
    ap.add_argument("--k", type=int, default=5)
    ap.add_argument("--radius", type=float, default=0.3)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    rng = np.random.default_rng(0)
    pts = make_cloud(rng, args.points)
    origins, dirs = make_rays(rng, args.queries)
    queries = pts[rng.integers(0, len(pts), args.queries)] + rng.normal(0, 0.1, (args.queries, 3))

    backends = [("numpy", False)] + ([("compiled", True)] if HAVE_KERNELS else [])
    if not HAVE_KERNELS:
        logger.info("compiled kernels unavailable; timing the numpy path only")
    results = {}
    for name, flag in backends:
        t_build, grid = timed(lambda: VoxelGrid(pts, use_kernels=flag), repeat=1)
        t_ray, rays = timed(lambda: [grid.ray_nearest(o, d, args.radius)
                                     for o, d in zip(origins, dirs)])
        t_knn, knn = timed(lambda: [grid.knn(q, args.k).tolist() for q in queries])
        results[name] = (t_build, t_ray, t_knn, rays, knn)
        logger.info("%-8s build %7.3f s  ray %7.1f us/query  knn %7.1f us/query", name, t_build,
                    1e6 * t_ray / args.queries, 1e6 * t_knn / args.queries)

    if len(results) == 2:
        a, b = results["numpy"], results["compiled"]
        same = a[3] == b[3] and a[4] == b[4]
        logger.info("speedup ray x%.1f  knn x%.1f  identical results: %s",
                    a[1] / b[1], a[2] / b[2], same)
        return 0 if same else 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
