"""Back-project pixel observations and intersect them with the point cloud."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from pvmap.scene_io import CameraFrame, PointCloud
from pvmap.spatial import VoxelGrid
from pvmap.structure import ImageStructure

logger = logging.getLogger(__name__)


class NoIntersection(RuntimeError):
    """The ray passes farther than the allowed residual from every cloud point."""


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray


@dataclass(frozen=True)
class SurfaceSample:
    position: np.ndarray
    normal: np.ndarray
    support: int
    residual: float

    def to_list(self) -> list:
        return [*map(float, self.position), *map(float, self.normal), self.support, self.residual]

    @classmethod
    def from_list(cls, v) -> "SurfaceSample":
        return cls(np.array(v[0:3], dtype=float), np.array(v[3:6], dtype=float), int(v[6]),
                   float(v[7]))


@dataclass(frozen=True)
class LiftConfig:
    knn_k: int = 5
    max_ray_residual: float = 0.5
    voxel_cell_factor: float = 2.0


class CloudIndex:
    """Point cloud plus its voxel-grid index; immutable after construction."""

    def __init__(self, cloud: PointCloud, cell_factor: float = 2.0, use_kernels: bool = True):
        if len(cloud) == 0:
            raise ValueError("point cloud is empty")
        self.cloud = cloud
        self.grid = VoxelGrid(cloud.positions, cell_factor=cell_factor, use_kernels=use_kernels)


def pixel_ray(frame: CameraFrame, pixel) -> Ray:
    """World ray through a pixel (camera looks down its -z axis, image y down)."""
    u, v = float(pixel[0]), float(pixel[1])
    d_cam = np.array([(u - frame.cx) / frame.focal, -(v - frame.cy) / frame.focal, -1.0])
    d = frame.rotation.T @ d_cam
    return Ray(frame.center.copy(), d / np.linalg.norm(d))


def raycast_cloud(ray: Ray, index: CloudIndex, k: int = 5,
                  max_residual: float = 0.5) -> SurfaceSample:
    """Nearest cloud point to the ray, smoothed over its k nearest neighbours."""
    if k < 1:
        raise ValueError("k must be at least 1")
    hit, dist, _ = index.grid.ray_nearest(ray.origin, ray.direction, max_residual)
    if hit < 0:
        raise NoIntersection(f"no cloud point within {max_residual} m of the ray")
    nbrs = index.grid.knn(index.cloud.positions[hit], k)
    pos = index.cloud.positions[nbrs].mean(axis=0)
    nrm = index.cloud.normals[nbrs].mean(axis=0)
    norm = np.linalg.norm(nrm)
    if norm == 0:
        raise NoIntersection("neighbour normals cancel out")
    return SurfaceSample(pos, nrm / norm, len(nbrs), float(dist))


@dataclass
class LiftedStructure:
    """Surface samples for the observations of one frame, keyed by their in-frame refs."""

    frame_id: str
    modules: dict[int, SurfaceSample] = field(default_factory=dict)
    keypoints: dict[int, SurfaceSample] = field(default_factory=dict)
    hypotheses: dict[int, SurfaceSample] = field(default_factory=dict)
    unlifted: list[tuple[str, int]] = field(default_factory=list)

    def entry(self, entry):
        kind, idx = entry
        return (self.modules if kind == "det" else self.hypotheses).get(idx)

    def to_dict(self) -> dict:
        return {
            "frame_id": self.frame_id,
            "modules": [[i, s.to_list()] for i, s in sorted(self.modules.items())],
            "keypoints": [[i, s.to_list()] for i, s in sorted(self.keypoints.items())],
            "hypotheses": [[i, s.to_list()] for i, s in sorted(self.hypotheses.items())],
            "unlifted": [list(u) for u in self.unlifted],
        }

    @classmethod
    def from_dict(cls, d) -> "LiftedStructure":
        return cls(d["frame_id"],
                   {i: SurfaceSample.from_list(v) for i, v in d["modules"]},
                   {i: SurfaceSample.from_list(v) for i, v in d["keypoints"]},
                   {i: SurfaceSample.from_list(v) for i, v in d["hypotheses"]},
                   [tuple(u) for u in d["unlifted"]])


def lift_structure(s: ImageStructure, frame: CameraFrame, index: CloudIndex,
                   k: int = 5, max_residual: float = 0.5) -> LiftedStructure:
    """Lift every keypoint, sector module and hypothesis of one frame."""
    if s.frame_id != frame.frame_id:
        raise ValueError(f"structure frame {s.frame_id} does not match camera {frame.frame_id}")
    out = LiftedStructure(s.frame_id)

    def lift(kind, idx, pixel, store):
        try:
            store[idx] = raycast_cloud(pixel_ray(frame, pixel), index, k, max_residual)
        except NoIntersection:
            out.unlifted.append((kind, idx))

    for k_idx, kp in enumerate(s.keypoints):
        if kp.kind == "bench_gap":
            lift("keypoint", k_idx, kp.midpoint, out.keypoints)
    dets = sorted({i for sec in s.sectors for kind, i in sec.modules if kind == "det"})
    for i in dets:
        lift("det", i, s.centers[i], out.modules)
    for h_idx, h in enumerate(s.hypothesized):
        lift("hyp", h_idx, h.center, out.hypotheses)
    if out.unlifted:
        logger.info("frame %s: %d observations unlifted", s.frame_id, len(out.unlifted))
    return out
