"""Command-line entry point: ``pvmap <subcommand> [options]``.

Exit codes: 0 success, 1 input error, 2 pipeline inconsistency (``--strict``
with flagged groups, or an unresolvable structural conflict), 3 internal error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from pvmap import pipeline, scene_io, simulate
from pvmap.config import ConfigError, load_config
from pvmap.match_fuse import GlobalStructure, StructuralConflict
from pvmap.pipeline import StageError

logger = logging.getLogger("pvmap")

EXIT_OK, EXIT_INPUT, EXIT_INCONSISTENT, EXIT_INTERNAL = 0, 1, 2, 3
INPUT_ERRORS = (FileNotFoundError, scene_io.ParseError, scene_io.ValidationError, ConfigError)


class Inconsistent(RuntimeError):
    """Flags remain and strict mode is on."""


def _config(args):
    cfg = load_config(args.config)
    over = {}
    if getattr(args, "seed", None) is not None:
        over["run__seed"] = args.seed
    if getattr(args, "strict", False):
        over["run__strict"] = True
    if getattr(args, "keep_intermediates", False):
        over["run__keep_intermediates"] = True
    return cfg.with_overrides(**over) if over else cfg


def _check_flags(flags, cfg) -> None:
    for f in flags:
        logger.warning("flag: %s", f)
    if flags and cfg["run.strict"]:
        raise Inconsistent(f"{len(flags)} unresolved flag(s) in strict mode")


def cmd_simulate(args) -> None:
    scene = simulate.simulate_preset(args.preset, seed=args.seed or 0, noise=args.noise,
                                     images=not args.no_images)
    out = simulate.export_scene(scene, args.out)
    logger.info("scene with %d modules and %d frames written to %s", len(scene.plant),
                len(scene.frames), out)


def cmd_fuse(args) -> None:
    cfg = _config(args)
    inputs = pipeline.load_inputs(cfg)
    fused = pipeline.stage_fuse(inputs, cfg)
    pipeline.write_stage(cfg.path("paths.output"), "fuse", pipeline.fused_to_dict(fused))


def cmd_infer(args) -> None:
    cfg = _config(args)
    inputs = pipeline.load_inputs(cfg)
    fused = pipeline.fused_from_dict(pipeline.read_intermediate(cfg.path("paths.output"), "fuse"))
    structures = pipeline.stage_infer(fused, inputs, cfg)
    pipeline.write_stage(cfg.path("paths.output"), "infer",
                         [s.to_dict() for s in structures.values()])


def cmd_lift(args) -> None:
    cfg = _config(args)
    inputs = pipeline.load_inputs(cfg, need_detections=False)
    out = cfg.path("paths.output")
    structures = pipeline.structures_from_json(pipeline.read_intermediate(out, "infer"))
    lifted = pipeline.stage_lift(structures, inputs, cfg)
    pipeline.write_stage(out, "lift", [lf.to_dict() for lf in lifted.values()])


def cmd_match(args) -> None:
    cfg = _config(args)
    out = cfg.path("paths.output")
    structures = pipeline.structures_from_json(pipeline.read_intermediate(out, "infer"))
    lifted = pipeline.lifted_from_json(pipeline.read_intermediate(out, "lift"))
    gs = pipeline.stage_match(structures, lifted, cfg)
    pipeline.write_stage(out, "match", gs.to_dict())
    _check_flags(gs.flags, cfg)


def cmd_optimize(args) -> None:
    cfg = _config(args)
    out = cfg.path("paths.output")
    gs = GlobalStructure.from_dict(pipeline.read_intermediate(out, "match"))
    model = pipeline.stage_optimize(gs, pipeline.load_frames(cfg), cfg)
    scene_io.write_model(model, out / "model.json")
    _check_flags(gs.flags + model.flags, cfg)


def cmd_evaluate(args) -> None:
    cfg = _config(args)
    out = cfg.path("paths.output")
    model = scene_io.load_model(out / "model.json")
    report = pipeline.stage_evaluate(model, cfg)
    scene_io.write_outputs(model, report, out)
    _print_report(report)


def cmd_run(args) -> None:
    cfg = _config(args)
    model, report, gs = pipeline.run_pipeline(cfg, args.keep_intermediates)
    _print_report(report)
    _check_flags(gs.flags + model.flags, cfg)


def cmd_render_overlay(args) -> None:
    cfg = _config(args)
    out = cfg.path("paths.output")
    model = scene_io.load_model(out / "model.json")
    frames = pipeline.load_frames(cfg)
    if args.frame:
        frames = [f for f in frames if f.frame_id in set(args.frame)]
        if not frames:
            raise scene_io.ValidationError(f"no camera frame among {args.frame}")
    odir = out / "overlays"
    odir.mkdir(parents=True, exist_ok=True)
    for f in frames:
        (odir / f"{f.frame_id}.svg").write_text(scene_io.overlay_svg(model, f), encoding="utf-8")
    logger.info("%d overlays written to %s", len(frames), odir)


def _print_report(report) -> None:
    t = report.truth
    if t is not None:
        print(f"recall {t.recall:.6f}  tuple accuracy {t.tuple_accuracy:.6f}  "
              f"rmse {t.rmse:.6g} m  spurious {t.n_spurious}")
    for name, s in (("row spacing", report.row_spacing), ("column spacing", report.column_spacing)):
        if s is not None:
            print(f"{name}: median {s.median:.4f} m  [{s.min:.4f}, {s.max:.4f}]")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pvmap", description="Map PV plants from aerial images.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def staged(name, func, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", required=True, type=Path)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--strict", action="store_true")
        sp.add_argument("--keep-intermediates", action="store_true")
        sp.set_defaults(func=func)
        return sp

    sp = sub.add_parser("simulate", help="generate a synthetic scene")
    sp.add_argument("--preset", default="pp1-desk", choices=sorted(simulate.PRESETS))
    sp.add_argument("--noise", choices=sorted(simulate.NOISE_PROFILES))
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--no-images", action="store_true")
    sp.set_defaults(func=cmd_simulate)

    staged("fuse-detections", cmd_fuse, "filter and fuse raw detections")
    staged("infer", cmd_infer, "per-image structure inference")
    staged("lift", cmd_lift, "lift observations onto the point cloud")
    staged("match", cmd_match, "cross-image matching and repair")
    staged("optimize", cmd_optimize, "fit row lines and respace modules")
    staged("evaluate", cmd_evaluate, "statistics and ground-truth scores")
    staged("run", cmd_run, "all stages end to end")
    ov = staged("render-overlay", cmd_render_overlay, "project the model into frames as SVG")
    ov.add_argument("--frame", action="append")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Inconsistent as exc:
        logger.error("%s", exc)
        return EXIT_INCONSISTENT
    except StageError as exc:
        logger.error("%s", exc)
        if isinstance(exc.cause, INPUT_ERRORS):
            return EXIT_INPUT
        if isinstance(exc.cause, StructuralConflict):
            return EXIT_INCONSISTENT
        return EXIT_INTERNAL
    except INPUT_ERRORS as exc:
        logger.error("input error: %s", exc)
        return EXIT_INPUT
    except StructuralConflict as exc:
        logger.error("structural conflict: %s", exc)
        return EXIT_INCONSISTENT
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the internal exit code
        logger.exception("internal error: %s", exc)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
