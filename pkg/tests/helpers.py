"""Shared builders for the test suites."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pvmap.detect_fuse import ModuleDetection, OrientedBox, fuse_frame
from pvmap.evaluate import score_against_truth
from pvmap.lift3d import CloudIndex, lift_structure
from pvmap.match_fuse import MatchConfig, fuse_structures
from pvmap.optimize import OptimizeConfig, build_plant_model
from pvmap.simulate import truth_dict
from pvmap.structure import RowLine, StructureConfig, build_structure


def det(cx, cy, w=40.0, h=24.0, angle=0.0, source="primary", frame="f", index=0):
    return ModuleDetection(OrientedBox(cx, cy, w, h, angle), source, frame, index)


def dets_at(points, w=40.0, h=24.0, source="primary", frame="f", start=0):
    return [det(x, y, w, h, 0.0, source, frame, start + k) for k, (x, y) in enumerate(points)]


def row_line(xs, y=0.0, frame="f"):
    """Horizontal row with inliers 0..n-1 at the given x positions; returns (row, centers)."""
    centers = {i: np.array([float(x), float(y)]) for i, x in enumerate(xs)}
    row = RowLine(frame, np.array([0.0, float(y)]), np.array([1.0, 0.0]), list(range(len(xs))))
    return row, centers


@dataclass
class PipelineRun:
    scene: object
    fused: dict
    structures: dict
    lifted: dict
    gs: object
    model: object

    @property
    def truth(self) -> dict:
        return truth_dict(self.scene)

    def scores(self):
        return score_against_truth(self.model, self.truth)


def run_scene(scene, seed: int = 0, match_cfg: MatchConfig = MatchConfig(),
              opt_cfg: OptimizeConfig = OptimizeConfig()) -> PipelineRun:
    """Every stage in memory on a simulated scene."""
    cfg = StructureConfig(rows_per_bench=scene.plant.params.rows_per_bench)
    index = CloudIndex(scene.cloud)
    fused, st, lf = {}, {}, {}
    for f in scene.frames:
        ff = fuse_frame(f.frame_id, scene.detections[f.frame_id], f.width, f.height)
        fused[f.frame_id] = ff
        st[f.frame_id] = build_structure(f.frame_id, ff.detections, ff.rep, f.width, f.height,
                                         cfg, scene.images.get(f.frame_id), seed=seed)
        lf[f.frame_id] = lift_structure(st[f.frame_id], f, index)
    gs = fuse_structures(st, lf, match_cfg)
    model = build_plant_model(gs, opt_cfg, scene.frames[0].geo_origin)
    return PipelineRun(scene, fused, st, lf, gs, model)


def detected_truth_ids(run: PipelineRun) -> set:
    """Truth ids with at least one surviving fused detection in some frame."""
    out = set()
    for fid, ff in run.fused.items():
        ids = run.scene.det_truth[fid]
        out.update(int(ids[d.detection_index]) for d in ff.detections
                   if d.detection_index < len(ids) and ids[d.detection_index] is not None)
    return out


def raw_detected_truth_ids(scene) -> set:
    """Truth ids emitted by either detector in any frame."""
    return {int(t) for ids in scene.det_truth.values() for t in ids if t is not None}


def synthetic_frame(fid, xs, kps=(), hyps=(), row_pos=0, px_per_m=100.0):
    """One-row frame with modules at world x positions along the x axis.

    Args:
        xs: world x of the detections, ascending.
        kps: detection positions ``i`` with a bench-gap keypoint between i and i + 1,
            or (i, world_x) to place the keypoint explicitly.
        hyps: world x of hypothesized modules.

    Returns:
        (ImageStructure, LiftedStructure) with pixel x = world x * px_per_m.
    """
    from pvmap.lift3d import LiftedStructure, SurfaceSample
    from pvmap.structure import Bench2D, GapKeypoint, Hypothesis, ImageStructure, Sector

    def sample(x):
        return SurfaceSample(np.array([float(x), 0.0, 0.0]), np.array([0.0, 0.0, 1.0]), 5, 0.0)

    s = ImageStructure(fid, 4000, 1000)
    s.centers = {i: np.array([x * px_per_m, 100.0]) for i, x in enumerate(xs)}
    s.sources = {i: "primary" for i in range(len(xs))}
    lf = LiftedStructure(fid, {i: sample(x) for i, x in enumerate(xs)})
    spacing = np.diff(xs) * px_per_m if len(xs) > 1 else np.array([px_per_m])
    row = RowLine(fid, np.array([0.0, 100.0]), np.array([1.0, 0.0]), list(range(len(xs))),
                  float(np.median(spacing)), row_pos)
    s.benches = [Bench2D([row], True)]
    s.d_med = row.d_med
    entries = [(x, ("det", i)) for i, x in enumerate(xs)]
    for h, x in enumerate(hyps):
        after = max(i for i, xi in enumerate(xs) if xi < x)
        s.hypothesized.append(Hypothesis(0, after, 1, np.array([x * px_per_m, 100.0])))
        lf.hypotheses[h] = sample(x)
        entries.append((x, ("hyp", h)))
    entries.sort(key=lambda t: t[0])
    cuts = []
    for k in kps:
        i, wx = (k, None) if isinstance(k, int) else k
        mid = 0.5 * (xs[i] + xs[i + 1]) if wx is None else wx
        s.keypoints.append(GapKeypoint(0, i, i + 1, np.array([mid * px_per_m, 100.0])))
        lf.keypoints[len(s.keypoints) - 1] = sample(mid)
        cuts.append(mid)
    bounds = [None] + list(range(len(cuts))) + [None]
    edges = [-np.inf] + cuts + [np.inf]
    for j in range(len(edges) - 1):
        mods = [e for x, e in entries if edges[j] < x < edges[j + 1]]
        if mods:
            s.sectors.append(Sector(0, mods, bounds[j], bounds[j + 1]))
    return s, lf


def synthetic_scene(specs):
    """Dicts of structures and lifted structures from {fid: (xs, kps[, hyps])}."""
    st, lf = {}, {}
    for fid, layout in specs.items():
        st[fid], lf[fid] = synthetic_frame(fid, *layout)
    return st, lf
