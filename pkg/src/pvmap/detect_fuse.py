"""Post-detector filtering and fusion of oriented module boxes.

Two detector roles are supported: a precise ``primary`` detector whose boxes
are always kept, and a ``secondary`` detector that only fills in where no
primary box is nearby. All filters select subsets; boxes are never modified.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from pvmap.geometry import box_corners, intersection_area, wrap_axial

logger = logging.getLogger(__name__)

SOURCES = ("primary", "secondary")


@dataclass(frozen=True)
class OrientedBox:
    """Oriented rectangle in pixel coordinates (x right, y down)."""

    cx: float
    cy: float
    w: float
    h: float
    angle: float = 0.0

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box dimensions must be positive, got w={self.w}, h={self.h}")
        if not -math.pi / 2 < self.angle <= math.pi / 2:
            object.__setattr__(self, "angle", wrap_axial(self.angle))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy])

    @property
    def diag(self) -> float:
        return math.hypot(self.w, self.h)

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> np.ndarray:
        return box_corners(self.cx, self.cy, self.w, self.h, self.angle)


@dataclass(frozen=True)
class ModuleDetection:
    """One detected module in one frame."""

    box: OrientedBox
    source: str
    frame_id: str
    detection_index: int
    score: float = 1.0

    def __post_init__(self):
        if self.source not in SOURCES and self.source != "manual":
            raise ValueError(f"unknown detection source {self.source!r}")


@dataclass(frozen=True)
class DetectConfig:
    overlap_threshold: float = 0.20
    dim_tolerance: float = 0.4
    fusion_min_sep: float = 0.5
    edge_margin: float = 2.0


@dataclass
class FusedFrame:
    """Fused detections of one frame together with the representative box."""

    frame_id: str
    detections: list[ModuleDetection]
    rep: OrientedBox | None
    counts: dict = field(default_factory=dict)


def discard_edge_detections(dets, width: float, height: float, margin: float = 2.0):
    """Drop boxes with any corner inside the ``margin`` band along the image border."""
    if margin < 0:
        raise ValueError("margin must be non-negative")
    kept = []
    for d in dets:
        c = d.box.corners()
        if (c[:, 0].min() >= margin and c[:, 0].max() <= width - margin
                and c[:, 1].min() >= margin and c[:, 1].max() <= height - margin):
            kept.append(d)
    return kept


def overlap_ratio(a: OrientedBox, b: OrientedBox) -> float:
    """Intersection area divided by the smaller box area."""
    inter = intersection_area(a.corners(), b.corners())
    return inter / min(a.area, b.area)


def discard_overlapping(dets, overlap_threshold: float = 0.20):
    """Remove both members of every pair whose overlap ratio exceeds the threshold."""
    if not 0.0 <= overlap_threshold <= 1.0:
        raise ValueError("overlap_threshold must lie in [0, 1]")
    n = len(dets)
    if n < 2:
        return list(dets)
    centers = np.array([d.box.center for d in dets])
    reach = np.array([0.5 * d.box.diag for d in dets])
    bad = np.zeros(n, dtype=bool)
    for i in range(n - 1):
        dist = np.hypot(*(centers[i + 1:] - centers[i]).T)
        near = np.flatnonzero(dist < reach[i] + reach[i + 1:]) + i + 1
        for j in near:
            if overlap_ratio(dets[i].box, dets[j].box) > overlap_threshold:
                bad[i] = bad[j] = True
    return [d for d, b in zip(dets, bad) if not b]


def circular_median_axial(angles) -> float:
    """Sample angle minimising the summed axial (period pi) distance to all others.

    Ties resolve to the smallest angle value.
    """
    a = np.asarray(angles, dtype=float)
    diff = np.abs(a[:, None] - a[None, :]) % math.pi
    diff = np.minimum(diff, math.pi - diff)
    cost = diff.sum(axis=1)
    best = np.flatnonzero(cost == cost.min())
    return float(a[best][np.argmin(a[best])])


def representative_box(dets) -> OrientedBox:
    """Median-sized box: median width, median height, circular median angle."""
    if len(dets) == 0:
        raise ValueError("representative_box needs at least one detection")
    w = float(np.median([d.box.w for d in dets]))
    h = float(np.median([d.box.h for d in dets]))
    ang = circular_median_axial([d.box.angle for d in dets])
    return OrientedBox(0.0, 0.0, w, h, ang)


def filter_by_dimensions(dets, rep: OrientedBox, tol: float = 0.4):
    """Keep boxes whose width and height are within ``tol`` of the representative."""
    lo_w, hi_w = (1 - tol) * rep.w, (1 + tol) * rep.w
    lo_h, hi_h = (1 - tol) * rep.h, (1 + tol) * rep.h
    return [d for d in dets if lo_w <= d.box.w <= hi_w and lo_h <= d.box.h <= hi_h]


def fuse_detectors(primary_dets, secondary_dets, rep: OrientedBox, min_sep: float = 0.5):
    """All primary boxes plus secondary boxes far enough from every primary center."""
    out = list(primary_dets)
    if not secondary_dets:
        return out
    limit = min_sep * rep.diag
    prim = np.array([d.box.center for d in primary_dets]).reshape(-1, 2)
    for d in secondary_dets:
        if len(prim):
            dist = np.hypot(prim[:, 0] - d.box.cx, prim[:, 1] - d.box.cy).min()
            if dist < limit:
                continue
        out.append(d if d.source == "secondary" else ModuleDetection(
            d.box, "secondary", d.frame_id, d.detection_index, d.score))
    return out


def fuse_frame(frame_id: str, dets, width: float, height: float,
               cfg: DetectConfig = DetectConfig()) -> FusedFrame:
    """Run the full filter chain on one frame's raw detections."""
    by_src = {s: [d for d in dets if d.source == s] for s in SOURCES}
    manual = [d for d in dets if d.source == "manual"]
    cleaned = {}
    for src, group in by_src.items():
        group = discard_edge_detections(group, width, height, cfg.edge_margin)
        cleaned[src] = discard_overlapping(group, cfg.overlap_threshold)
    base = cleaned["primary"] or cleaned["secondary"]
    if not base:
        return FusedFrame(frame_id, manual, None, {"primary": 0, "secondary": 0})
    rep = representative_box(base)
    prim = filter_by_dimensions(cleaned["primary"], rep, cfg.dim_tolerance)
    sec = filter_by_dimensions(cleaned["secondary"], rep, cfg.dim_tolerance)
    fused = fuse_detectors(prim, sec, rep, cfg.fusion_min_sep) + manual
    fused.sort(key=lambda d: d.detection_index)
    counts = {"primary": sum(d.source == "primary" for d in fused),
              "secondary": sum(d.source == "secondary" for d in fused)}
    logger.debug("frame %s: %d fused detections (%s)", frame_id, len(fused), counts)
    return FusedFrame(frame_id, fused, rep, counts)
