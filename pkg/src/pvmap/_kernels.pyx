# cython: language_level=3
"""Compiled voxel-grid queries.

Arithmetic mirrors ``pvmap.spatial`` term by term (no fused multiply-add), so
distances and ray parameters are bit-identical to the numpy path.
"""

import numpy as np
from libc.math cimport floor, ceil, sqrt, INFINITY, NAN
from libc.stdlib cimport malloc, realloc, free


cdef inline bint _better(double d2, double t, long long i,
                         double bd2, double bt, long long bi) noexcept nogil:
    if d2 < bd2:
        return True
    if d2 > bd2:
        return False
    if t < bt:
        return True
    if t > bt:
        return False
    return i < bi


cdef bint _clip(const double[:] lo, const double[:] hi, double pad,
                const double[:] o, const double[:] d, double* t0, double* t1) noexcept nogil:
    cdef double a, b, tmp
    cdef int ax
    t0[0] = 0.0
    t1[0] = INFINITY
    for ax in range(3):
        if d[ax] == 0.0:
            if o[ax] < lo[ax] - pad or o[ax] > hi[ax] + pad:
                return False
            continue
        a = (lo[ax] - pad - o[ax]) / d[ax]
        b = (hi[ax] + pad - o[ax]) / d[ax]
        if a > b:
            tmp = a
            a = b
            b = tmp
        if a > t0[0]:
            t0[0] = a
        if b < t1[0]:
            t1[0] = b
        if t0[0] > t1[0]:
            return False
    return True


def ray_nearest(const double[:, ::1] pts, const long long[::1] order,
                const long long[::1] cell_start, const double[::1] gorigin,
                const long long[::1] dims, double cell, const double[::1] o,
                const double[::1] d, double max_dist):
    """Nearest point to a ray within ``max_dist``; returns (idx, dist, t)."""
    cdef double hi_[3]
    cdef double[:] hi = hi_
    cdef int ax
    for ax in range(3):
        hi_[ax] = gorigin[ax] + dims[ax] * cell
    cdef double t0, t1
    if not _clip(gorigin, hi, max_dist, o, d, &t0, &t1):
        return -1, INFINITY, NAN
    cdef double step = 0.5 * cell
    cdef long long n = <long long>ceil((t1 - t0) / step) + 1
    cdef long long reach = <long long>ceil((max_dist + 0.25 * cell) / cell) + 1
    cdef double md2 = max_dist * max_dist
    cdef long long nx = dims[0], ny = dims[1], nz = dims[2]
    cdef long long s, cx, cy, cz, px = 0, py = 0, pz = 0
    cdef long long ix, iy, iz, lx, ly, lz, hx, hy, hz, c, k, p
    cdef bint have_prev = False
    cdef double ts, sx, sy, sz, vx, vy, vz, t, wx, wy, wz, d2
    cdef double bd2 = INFINITY, bt = INFINITY
    cdef long long bi = -1
    with nogil:
        for s in range(n):
            ts = t0 + step * s
            if ts > t1:
                ts = t1
            sx = o[0] + ts * d[0]
            sy = o[1] + ts * d[1]
            sz = o[2] + ts * d[2]
            cx = <long long>floor((sx - gorigin[0]) / cell)
            cy = <long long>floor((sy - gorigin[1]) / cell)
            cz = <long long>floor((sz - gorigin[2]) / cell)
            if have_prev and cx == px and cy == py and cz == pz:
                continue
            lx = cx - reach if cx - reach > 0 else 0
            ly = cy - reach if cy - reach > 0 else 0
            lz = cz - reach if cz - reach > 0 else 0
            hx = cx + reach if cx + reach < nx - 1 else nx - 1
            hy = cy + reach if cy + reach < ny - 1 else ny - 1
            hz = cz + reach if cz + reach < nz - 1 else nz - 1
            for ix in range(lx, hx + 1):
                for iy in range(ly, hy + 1):
                    for iz in range(lz, hz + 1):
                        # skip cells already covered by the previous sample's cube
                        if (have_prev and ix >= px - reach and ix <= px + reach
                                and iy >= py - reach and iy <= py + reach
                                and iz >= pz - reach and iz <= pz + reach):
                            continue
                        c = (ix * ny + iy) * nz + iz
                        for k in range(cell_start[c], cell_start[c + 1]):
                            p = order[k]
                            vx = pts[p, 0] - o[0]
                            vy = pts[p, 1] - o[1]
                            vz = pts[p, 2] - o[2]
                            t = vx * d[0] + vy * d[1] + vz * d[2]
                            if t < 0.0:
                                continue
                            wx = vx - t * d[0]
                            wy = vy - t * d[1]
                            wz = vz - t * d[2]
                            d2 = wx * wx + wy * wy + wz * wz
                            if d2 > md2:
                                continue
                            if _better(d2, t, p, bd2, bt, bi):
                                bd2 = d2
                                bt = t
                                bi = p
            px = cx
            py = cy
            pz = cz
            have_prev = True
    if bi < 0:
        return -1, INFINITY, NAN
    return bi, sqrt(bd2), bt


def knn(const double[:, ::1] pts, const long long[::1] order,
        const long long[::1] cell_start, const double[::1] gorigin,
        const long long[::1] dims, double cell, const double[::1] q, long long kq):
    """The ``kq`` nearest points ordered by (squared distance, index)."""
    cdef long long npts = pts.shape[0]
    cdef long long nx = dims[0], ny = dims[1], nz = dims[2]
    cdef long long cx = <long long>floor((q[0] - gorigin[0]) / cell)
    cdef long long cy = <long long>floor((q[1] - gorigin[1]) / cell)
    cdef long long cz = <long long>floor((q[2] - gorigin[2]) / cell)
    cdef long long amax = cx if cx > 0 else -cx
    if (cy if cy > 0 else -cy) > amax:
        amax = cy if cy > 0 else -cy
    if (cz if cz > 0 else -cz) > amax:
        amax = cz if cz > 0 else -cz
    cdef long long dmax = nx
    if ny > dmax:
        dmax = ny
    if nz > dmax:
        dmax = nz
    cdef long long max_r = dmax + amax + 1
    cdef long long cap = 64, cnt = 0, r = 0
    cdef double* bd = <double*>malloc(cap * sizeof(double))
    cdef long long* bi = <long long*>malloc(cap * sizeof(long long))
    cdef long long ix, iy, iz, c, k, p, cheb, ax_, ay_, az_
    cdef double dx, dy, dz
    cdef double bound, kth
    try:
        while True:
            # add the Chebyshev shell at radius r
            for ix in range(cx - r, cx + r + 1):
                if ix < 0 or ix >= nx:
                    continue
                ax_ = ix - cx if ix >= cx else cx - ix
                for iy in range(cy - r, cy + r + 1):
                    if iy < 0 or iy >= ny:
                        continue
                    ay_ = iy - cy if iy >= cy else cy - iy
                    for iz in range(cz - r, cz + r + 1):
                        if iz < 0 or iz >= nz:
                            continue
                        az_ = iz - cz if iz >= cz else cz - iz
                        cheb = ax_
                        if ay_ > cheb:
                            cheb = ay_
                        if az_ > cheb:
                            cheb = az_
                        if cheb != r:
                            continue
                        c = (ix * ny + iy) * nz + iz
                        for k in range(cell_start[c], cell_start[c + 1]):
                            p = order[k]
                            if cnt == cap:
                                cap *= 2
                                bd = <double*>realloc(bd, cap * sizeof(double))
                                bi = <long long*>realloc(bi, cap * sizeof(long long))
                            dx = pts[p, 0] - q[0]
                            dy = pts[p, 1] - q[1]
                            dz = pts[p, 2] - q[2]
                            bd[cnt] = dx * dx + dy * dy + dz * dz
                            bi[cnt] = p
                            cnt += 1
            if cnt >= kq:
                dist = np.asarray(<double[:cnt]>bd)
                idx = np.asarray(<long long[:cnt]>bi)
                sel = np.lexsort((idx, dist))[:kq]
                kth = dist[sel[kq - 1]]
                bound = r * cell
                if kth < bound * bound or r > max_r:
                    return idx[sel].copy()
            elif r > max_r:
                break
            r += 1
        raise RuntimeError("knn shell growth did not terminate")
    finally:
        free(bd)
        free(bi)
