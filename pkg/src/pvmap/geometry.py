"""Small 2D geometry helpers: oriented quads, convex clipping, line-rectangle intersection."""

from __future__ import annotations

import math

import numpy as np


def wrap_axial(angle: float) -> float:
    """Map an undirected angle into (-pi/2, pi/2]."""
    a = math.fmod(angle, math.pi)
    if a <= -math.pi / 2:
        a += math.pi
    elif a > math.pi / 2:
        a -= math.pi
    return a


def box_corners(cx: float, cy: float, w: float, h: float, angle: float) -> np.ndarray:
    """Corners of an oriented box, counter-clockwise in a y-up sense.

    Returns:
        (4, 2) array.
    """
    c, s = math.cos(angle), math.sin(angle)
    ux, uy = 0.5 * w * c, 0.5 * w * s
    vx, vy = -0.5 * h * s, 0.5 * h * c
    return np.array([
        [cx - ux - vx, cy - uy - vy],
        [cx + ux - vx, cy + uy - vy],
        [cx + ux + vx, cy + uy + vy],
        [cx - ux + vx, cy - uy + vy],
    ])


def polygon_area(poly) -> float:
    """Signed shoelace area."""
    p = np.asarray(poly, dtype=float)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def clip_convex(subject, clipper) -> list[tuple[float, float]]:
    """Sutherland-Hodgman clip of ``subject`` against the convex polygon ``clipper``.

    Both polygons may have either orientation.
    """
    clip = [tuple(map(float, p)) for p in clipper]
    if polygon_area(clip) < 0:
        clip = clip[::-1]
    out = [tuple(map(float, p)) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        src, out = out, []
        prev = src[-1]
        s_prev = side(prev)
        for cur in src:
            s_cur = side(cur)
            # signed distances of opposite sign never give a zero denominator
            if s_cur >= 0.0:
                if s_prev < 0.0:
                    t = s_prev / (s_prev - s_cur)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif s_prev >= 0.0:
                t = s_prev / (s_prev - s_cur)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, s_prev = cur, s_cur
    return out


def intersection_area(a, b) -> float:
    """Area of the intersection of two convex polygons."""
    return abs(polygon_area(clip_convex(a, b)))


def clip_line_to_rect(point, direction, width: float, height: float):
    """Intersect an infinite line with the rectangle [0, width] x [0, height].

    Uses Liang-Barsky parameter clipping.

    Returns:
        The two border points as a (2, 2) array, or None when the line misses
        the rectangle or only touches it in a single point.
    """
    px, py = float(point[0]), float(point[1])
    dx, dy = float(direction[0]), float(direction[1])
    t0, t1 = -math.inf, math.inf
    for p0, d, lo, hi in ((px, dx, 0.0, width), (py, dy, 0.0, height)):
        if d == 0.0:
            if p0 < lo or p0 > hi:
                return None
            continue
        ta, tb = (lo - p0) / d, (hi - p0) / d
        if ta > tb:
            ta, tb = tb, ta
        t0, t1 = max(t0, ta), min(t1, tb)
    if not t0 < t1:
        return None
    return np.array([[px + t0 * dx, py + t0 * dy], [px + t1 * dx, py + t1 * dy]])


def point_line_distance(p, point, direction) -> float:
    """Perpendicular distance of ``p`` to the infinite line through ``point`` along unit ``direction``."""
    vx, vy = p[0] - point[0], p[1] - point[1]
    return abs(vx * direction[1] - vy * direction[0])
