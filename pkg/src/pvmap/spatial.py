"""Uniform voxel-grid index for nearest-to-ray and k-nearest-neighbour queries.

The grid stores point indices in CSR layout (``cell_start`` offsets into a
cell-sorted index array). Queries gather candidate cells conservatively and
then evaluate exact distances, so results equal the brute-force answer. The
distance formulas are spelled out component by component, identically in the
numpy path, the compiled path and the brute-force oracle, which keeps the
three bit-identical.

The compiled kernels live in ``pvmap._kernels``; set ``PVMAP_PURE_PYTHON=1``
to force the numpy fallback.
"""

from __future__ import annotations

import logging
import math
import os

import numpy as np

logger = logging.getLogger(__name__)

try:
    if os.environ.get("PVMAP_PURE_PYTHON"):
        raise ImportError("pure-python mode requested")
    from pvmap import _kernels  # type: ignore[attr-defined]

    HAVE_KERNELS = True
except ImportError:  # pragma: no cover - exercised when the extension is absent
    _kernels = None
    HAVE_KERNELS = False

MAX_CELLS = 20_000_000


def _ray_terms(points: np.ndarray, origin: np.ndarray, direction: np.ndarray):
    vx = points[:, 0] - origin[0]
    vy = points[:, 1] - origin[1]
    vz = points[:, 2] - origin[2]
    t = vx * direction[0] + vy * direction[1] + vz * direction[2]
    wx = vx - t * direction[0]
    wy = vy - t * direction[1]
    wz = vz - t * direction[2]
    d2 = wx * wx + wy * wy + wz * wz
    return d2, t


def _sq_dist(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    dx = points[:, 0] - q[0]
    dy = points[:, 1] - q[1]
    dz = points[:, 2] - q[2]
    return dx * dx + dy * dy + dz * dz


def brute_ray_nearest(points: np.ndarray, origin, direction, max_dist: float = math.inf):
    """Exhaustive nearest-to-ray search; the oracle for :meth:`VoxelGrid.ray_nearest`.

    Returns ``(index, distance, t)`` or ``(-1, inf, nan)`` when no point with
    ``t >= 0`` lies within ``max_dist`` of the ray.
    """
    origin = np.asarray(origin, dtype=float)
    direction = np.asarray(direction, dtype=float)
    d2, t = _ray_terms(points, origin, direction)
    ok = (t >= 0.0) & (d2 <= max_dist * max_dist)
    idx = np.flatnonzero(ok)
    if idx.size == 0:
        return -1, math.inf, math.nan
    best = idx[np.lexsort((idx, t[idx], d2[idx]))[0]]
    return int(best), math.sqrt(d2[best]), float(t[best])


def brute_knn(points: np.ndarray, query, k: int) -> np.ndarray:
    """Exhaustive k nearest neighbours ordered by (distance, index)."""
    q = np.asarray(query, dtype=float)
    d2 = _sq_dist(points, q)
    idx = np.arange(len(points))
    order = np.lexsort((idx, d2))
    return order[: min(k, len(points))].astype(np.int64)


def mean_point_spacing(points: np.ndarray, sample: int = 512) -> float:
    """Mean nearest-neighbour distance estimated on an evenly strided sample."""
    n = len(points)
    if n < 2:
        return 0.0
    step = max(1, n // sample)
    picks = np.arange(0, n, step)[:sample]
    dists = np.empty(len(picks))
    for j, i in enumerate(picks):
        d2 = _sq_dist(points, points[i])
        d2[i] = np.inf
        dists[j] = math.sqrt(d2.min())
    return float(dists.mean())


class VoxelGrid:
    """Immutable voxel grid over a point array.

    Args:
        points: (N, 3) array of positions.
        cell_size: explicit cell edge length; defaults to
            ``cell_factor`` times the mean point spacing.
        cell_factor: multiplier on the mean spacing.
        use_kernels: use the compiled kernels when available.
    """

    def __init__(self, points, cell_size: float | None = None, cell_factor: float = 2.0,
                 use_kernels: bool = True):
        pts = np.ascontiguousarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
            raise ValueError("VoxelGrid needs a non-empty (N, 3) point array")
        self.points = pts
        if cell_size is None:
            spacing = mean_point_spacing(pts)
            cell_size = cell_factor * spacing if spacing > 0 else 1.0
        extent = pts.max(axis=0) - pts.min(axis=0)
        while np.prod(np.floor(extent / cell_size) + 1) > MAX_CELLS:
            cell_size *= 2.0
        self.cell = float(cell_size)
        self.origin = pts.min(axis=0).copy()
        coords = np.floor((pts - self.origin) / self.cell).astype(np.int64)
        self.dims = (coords.max(axis=0) + 1).astype(np.int64)
        lin = (coords[:, 0] * self.dims[1] + coords[:, 1]) * self.dims[2] + coords[:, 2]
        self.order = np.argsort(lin, kind="stable").astype(np.int64)
        counts = np.bincount(lin, minlength=int(np.prod(self.dims)))
        self.cell_start = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self.use_kernels = bool(use_kernels and HAVE_KERNELS)
        self._upper = self.origin + self.dims * self.cell

    def __len__(self) -> int:
        return len(self.points)

    # -- helpers ---------------------------------------------------------
    def _gather(self, cells_lin: np.ndarray) -> np.ndarray:
        starts = self.cell_start[cells_lin]
        stops = self.cell_start[cells_lin + 1]
        lengths = stops - starts
        total = int(lengths.sum())
        if total == 0:
            return np.empty(0, dtype=np.int64)
        offsets = np.repeat(starts - np.concatenate([[0], np.cumsum(lengths)[:-1]]), lengths)
        return self.order[np.arange(total) + offsets]

    def _clip(self, origin, direction, pad):
        lo = self.origin - pad
        hi = self._upper + pad
        t0, t1 = 0.0, math.inf
        for a in range(3):
            if direction[a] == 0.0:
                if origin[a] < lo[a] or origin[a] > hi[a]:
                    return None
                continue
            ta = (lo[a] - origin[a]) / direction[a]
            tb = (hi[a] - origin[a]) / direction[a]
            if ta > tb:
                ta, tb = tb, ta
            t0 = max(t0, ta)
            t1 = min(t1, tb)
            if t0 > t1:
                return None
        return t0, t1

    # -- queries ---------------------------------------------------------
    def ray_nearest(self, origin, direction, max_dist: float):
        """Point with minimal perpendicular distance to a ray (``t >= 0``).

        Only points within ``max_dist`` of the ray are considered; ties go to
        the smaller ray parameter, then the smaller index.

        Returns:
            ``(index, distance, t)`` or ``(-1, inf, nan)``.
        """
        origin = np.asarray(origin, dtype=np.float64)
        direction = np.asarray(direction, dtype=np.float64)
        if not math.isfinite(max_dist):
            return brute_ray_nearest(self.points, origin, direction, max_dist)
        if self.use_kernels:
            idx, d, t = _kernels.ray_nearest(
                self.points, self.order, self.cell_start, self.origin, self.dims,
                self.cell, origin, direction, float(max_dist))
            if idx < 0:
                return -1, math.inf, math.nan
            return int(idx), d, t
        span = self._clip(origin, direction, max_dist)
        if span is None:
            return -1, math.inf, math.nan
        t0, t1 = span
        step = 0.5 * self.cell
        n = int(math.ceil((t1 - t0) / step)) + 1
        ts = np.minimum(t0 + step * np.arange(n), t1)
        samples = origin + ts[:, None] * direction
        base = np.floor((samples - self.origin) / self.cell).astype(np.int64)
        base = np.unique(base, axis=0)
        reach = int(math.ceil((max_dist + 0.25 * self.cell) / self.cell)) + 1
        offs = np.arange(-reach, reach + 1)
        cube = np.stack(np.meshgrid(offs, offs, offs, indexing="ij"), axis=-1).reshape(-1, 3)
        cells = (base[:, None, :] + cube[None, :, :]).reshape(-1, 3)
        keep = np.all((cells >= 0) & (cells < self.dims), axis=1)
        cells = cells[keep]
        lin = np.unique((cells[:, 0] * self.dims[1] + cells[:, 1]) * self.dims[2] + cells[:, 2])
        cand = self._gather(lin)
        if cand.size == 0:
            return -1, math.inf, math.nan
        d2, t = _ray_terms(self.points[cand], origin, direction)
        ok = (t >= 0.0) & (d2 <= max_dist * max_dist)
        if not ok.any():
            return -1, math.inf, math.nan
        cand, d2, t = cand[ok], d2[ok], t[ok]
        j = np.lexsort((cand, t, d2))[0]
        return int(cand[j]), math.sqrt(d2[j]), float(t[j])

    def knn(self, query, k: int) -> np.ndarray:
        """Indices of the ``k`` nearest points ordered by (distance, index)."""
        q = np.asarray(query, dtype=np.float64)
        k = min(int(k), len(self.points))
        if k <= 0:
            return np.empty(0, dtype=np.int64)
        if self.use_kernels:
            return np.asarray(_kernels.knn(
                self.points, self.order, self.cell_start, self.origin, self.dims,
                self.cell, q, k), dtype=np.int64)
        center = np.floor((q - self.origin) / self.cell).astype(np.int64)
        max_r = int(self.dims.max()) + int(np.abs(center).max()) + 1
        r = 0
        while True:
            lo = np.maximum(center - r, 0)
            hi = np.minimum(center + r, self.dims - 1)
            if np.all(lo <= hi):
                gx, gy, gz = np.meshgrid(np.arange(lo[0], hi[0] + 1), np.arange(lo[1], hi[1] + 1),
                                         np.arange(lo[2], hi[2] + 1), indexing="ij")
                lin = ((gx * self.dims[1] + gy) * self.dims[2] + gz).ravel()
                cand = self._gather(lin)
            else:
                cand = np.empty(0, dtype=np.int64)
            if cand.size >= k:
                d2 = _sq_dist(self.points[cand], q)
                order = np.lexsort((cand, d2))[:k]
                bound = r * self.cell
                if d2[order[-1]] < bound * bound or r > max_r:
                    return cand[order]
            elif r > max_r:
                return brute_knn(self.points, q, k)
            r += 1
