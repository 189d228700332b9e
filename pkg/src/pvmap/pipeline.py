"""Stage orchestration shared by the ``run`` command and the per-stage commands.

Every stage has an in-memory form and a JSON intermediate that round-trips
exactly, so running the stages one by one gives the same model as one ``run``.
"""

from __future__ import annotations

import logging
from pathlib import Path

from pvmap import scene_io
from pvmap.config import PipelineConfig
from pvmap.detect_fuse import FusedFrame, ModuleDetection, OrientedBox, fuse_frame
from pvmap.evaluate import EvalReport, evaluate_model
from pvmap.lift3d import CloudIndex, LiftedStructure, lift_structure
from pvmap.match_fuse import GlobalStructure, fuse_structures
from pvmap.optimize import PlantModel, build_plant_model
from pvmap.scene_io import SceneInputs
from pvmap.structure import ImageStructure, apply_corrections, build_structure

logger = logging.getLogger(__name__)

INTERMEDIATES = {
    "fuse": "fused.json",
    "infer": "structures.json",
    "lift": "lifted.json",
    "match": "global.json",
    "optimize": "model.json",
}


class StageError(RuntimeError):
    """A stage failed; carries the stage name and the underlying exception."""

    def __init__(self, stage: str, exc: BaseException, frame_id: str | None = None):
        where = f" (frame {frame_id})" if frame_id else ""
        super().__init__(f"{stage}{where}: {exc}")
        self.stage = stage
        self.frame_id = frame_id
        self.cause = exc


# --------------------------------------------------------------------------
# inputs


def load_inputs(cfg: PipelineConfig, need_detections: bool = True) -> SceneInputs:
    """Read cameras, cloud, detections and optional images; nothing is written."""
    frames = scene_io.load_camera_frames(cfg.path("paths.cameras"))
    cloud = scene_io.load_point_cloud(cfg.path("paths.cloud"))
    ids = [f.frame_id for f in frames]
    dets = scene_io.load_detections(cfg.path("paths.detections"), ids) if need_detections else {}
    images = {}
    img_dir = cfg.path("paths.images")
    if img_dir is not None:
        if not img_dir.is_dir():
            raise FileNotFoundError(f"{img_dir}: image directory not found")
        for fid in ids:
            p = img_dir / f"{fid}.ppm"
            if p.is_file():
                images[fid] = scene_io.load_image(p)
    return SceneInputs(frames, cloud, dets, images)


def load_frames(cfg: PipelineConfig):
    return scene_io.load_camera_frames(cfg.path("paths.cameras"))


# --------------------------------------------------------------------------
# intermediate (de)serialisation


def fused_to_dict(fused: dict[str, FusedFrame]) -> list:
    out = []
    for fid, ff in fused.items():
        rb = ff.rep
        out.append({
            "frame_id": fid,
            "rep_box": None if rb is None else [rb.cx, rb.cy, rb.w, rb.h, rb.angle],
            "counts": dict(ff.counts),
            "detections": [{"index": d.detection_index, **scene_io.detection_record(d)}
                           for d in ff.detections],
        })
    return out


def fused_from_dict(data) -> dict[str, FusedFrame]:
    out = {}
    for rec in data:
        rb = rec["rep_box"]
        dets = [ModuleDetection(OrientedBox(d["cx"], d["cy"], d["w"], d["h"], d["angle_rad"]),
                                d["source"], d["frame_id"], d["index"], d["score"])
                for d in rec["detections"]]
        out[rec["frame_id"]] = FusedFrame(rec["frame_id"], dets,
                                          None if rb is None else OrientedBox(*rb),
                                          dict(rec["counts"]))
    return out


def read_intermediate(out_dir: Path, stage: str):
    p = Path(out_dir) / INTERMEDIATES[stage]
    if not p.is_file():
        raise FileNotFoundError(f"{p}: run the {stage} stage first")
    return scene_io._read_json(p)


# --------------------------------------------------------------------------
# stages


def stage_fuse(inputs: SceneInputs, cfg: PipelineConfig) -> dict[str, FusedFrame]:
    dc = cfg.detect()
    out = {}
    for f in inputs.frames:
        try:
            out[f.frame_id] = fuse_frame(f.frame_id, inputs.detections.get(f.frame_id, []),
                                         f.width, f.height, dc)
        except ValueError as exc:
            raise StageError("fuse-detections", exc, f.frame_id) from exc
    return out


def stage_infer(fused: dict[str, FusedFrame], inputs: SceneInputs,
                cfg: PipelineConfig) -> dict[str, ImageStructure]:
    sc = cfg.structure()
    out = {}
    for f in inputs.frames:
        ff = fused[f.frame_id]
        try:
            out[f.frame_id] = build_structure(f.frame_id, ff.detections, ff.rep, f.width,
                                              f.height, sc, inputs.images.get(f.frame_id),
                                              seed=cfg.seed)
        except ValueError as exc:
            raise StageError("infer", exc, f.frame_id) from exc
    corr = cfg.path("paths.corrections")
    if corr is not None:
        edits = scene_io.load_corrections(corr, list(out))
        for e in edits:
            logger.info("correction: %s", e)
        try:
            apply_corrections(out, edits)
        except (ValueError, KeyError, IndexError) as exc:
            bad = scene_io.ValidationError(f"{corr}: {exc}")
            raise StageError("infer", bad) from exc
    return out


def stage_lift(structures: dict[str, ImageStructure], inputs: SceneInputs,
               cfg: PipelineConfig) -> dict[str, LiftedStructure]:
    lc = cfg.lift()
    index = CloudIndex(inputs.cloud, lc.voxel_cell_factor)
    out = {}
    for f in inputs.frames:
        try:
            out[f.frame_id] = lift_structure(structures[f.frame_id], f, index, lc.knn_k,
                                             lc.max_ray_residual)
        except ValueError as exc:
            raise StageError("lift", exc, f.frame_id) from exc
    return out


def stage_match(structures, lifted, cfg: PipelineConfig) -> GlobalStructure:
    return fuse_structures(structures, lifted, cfg.match())


def stage_optimize(gs: GlobalStructure, frames, cfg: PipelineConfig) -> PlantModel:
    geo = frames[0].geo_origin if frames else (0.0, 0.0, 0.0)
    return build_plant_model(gs, cfg.optimize(), geo)


def stage_evaluate(model: PlantModel, cfg: PipelineConfig) -> EvalReport:
    truth = None
    tp = cfg.path("paths.truth")
    if tp is not None:
        truth = scene_io.load_truth(tp)
    reference = None
    rp = cfg.path("paths.reference")
    if rp is not None:
        reference = scene_io.load_model(rp)
    return evaluate_model(model, truth, reference, cfg["evaluate.anchors"])


def write_stage(out_dir, stage: str, payload) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = out / INTERMEDIATES[stage]
    scene_io.dump_json(payload, p)
    return p


def run_pipeline(cfg: PipelineConfig, keep_intermediates: bool = False):
    """Execute every stage and write the final outputs.

    Returns:
        (model, report, global structure)
    """
    inputs = load_inputs(cfg)
    out = cfg.path("paths.output")
    keep = keep_intermediates or cfg["run.keep_intermediates"]
    fused = stage_fuse(inputs, cfg)
    structures = stage_infer(fused, inputs, cfg)
    lifted = stage_lift(structures, inputs, cfg)
    gs = stage_match(structures, lifted, cfg)
    model = stage_optimize(gs, inputs.frames, cfg)
    report = stage_evaluate(model, cfg)
    if keep:
        write_stage(out, "fuse", fused_to_dict(fused))
        write_stage(out, "infer", [s.to_dict() for s in structures.values()])
        write_stage(out, "lift", [lf.to_dict() for lf in lifted.values()])
        write_stage(out, "match", gs.to_dict())
    scene_io.write_outputs(model, report, out)
    return model, report, gs


def structures_from_json(data) -> dict[str, ImageStructure]:
    return {d["frame_id"]: ImageStructure.from_dict(d) for d in data}


def lifted_from_json(data) -> dict[str, LiftedStructure]:
    return {d["frame_id"]: LiftedStructure.from_dict(d) for d in data}
