"""Flat ``section.key = value`` pipeline configuration.

Blank lines and lines starting with ``#`` are ignored. Relative paths are
resolved against the directory of the configuration file.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

from pvmap.detect_fuse import DetectConfig
from pvmap.lift3d import LiftConfig
from pvmap.match_fuse import MatchConfig
from pvmap.optimize import OptimizeConfig
from pvmap.structure import StructureConfig


class ConfigError(ValueError):
    """Malformed or out-of-range configuration."""


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str):
    return None if text.strip().lower() in ("", "none") else float(text)


def _int_list(text: str) -> tuple:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _pos(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _frac(v):
    return 0 < v < 1


# key -> (parser, default, range check or None); default REQUIRED marks mandatory keys
REQUIRED = object()
SCHEMA = {
    "paths.cameras": (str, "cameras.json", None),
    "paths.cloud": (str, "cloud.txt", None),
    "paths.detections": (str, "detections.json", None),
    "paths.images": (str, None, None),
    "paths.corrections": (str, None, None),
    "paths.truth": (str, None, None),
    "paths.reference": (str, None, None),
    "paths.output": (str, "out", None),
    "detect.overlap_threshold": (float, 0.20, _frac),
    "detect.dim_tolerance": (float, 0.4, _frac),
    "detect.fusion_min_sep": (float, 0.5, _pos),
    "detect.edge_margin": (float, 2.0, _nonneg),
    "structure.rows_per_bench": (int, REQUIRED, _pos),
    "structure.th": (float, 0.1, lambda v: 0 < v < 1 / 3),
    "structure.n_max": (int, 8, _nonneg),
    "structure.min_inliers": (int, 4, lambda v: v >= 2),
    "structure.ransac_trials": (int, 500, _pos),
    "structure.ransac_threshold": (float, 0.25, _pos),
    "structure.coincidence": (float, 2.0, _pos),
    "structure.darkness_ratio": (float, 0.7, _frac),
    "structure.north_up": (_bool, True, None),
    "lift.knn_k": (int, 5, _pos),
    "lift.max_ray_residual": (float, 0.5, _pos),
    "lift.voxel_cell_factor": (float, 2.0, _pos),
    "match.dist_threshold": (float, 1.5, _pos),
    "match.th": (float, 0.1, lambda v: 0 < v < 1 / 3),
    "match.max_repair_rounds": (int, 10, _nonneg),
    "optimize.ransac3d_threshold": (float, 0.15, _pos),
    "optimize.ransac3d_trials": (int, 500, _pos),
    "optimize.enforce_pitch": (_opt_float, None, lambda v: v is None or v > 0),
    "optimize.max_row_angle_deg": (float, 30.0, lambda v: 0 < v <= 90),
    "optimize.module_length": (float, 1.65, _pos),
    "optimize.module_width": (float, 1.0, _pos),
    "evaluate.anchors": (_int_list, (), None),
    "run.seed": (int, 0, _nonneg),
    "run.strict": (_bool, False, None),
    "run.keep_intermediates": (_bool, False, None),
}
PATH_KEYS = [k for k in SCHEMA if k.startswith("paths.")]


@dataclass(frozen=True)
class PipelineConfig:
    values: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    def __getitem__(self, key: str):
        return self.values[key]

    def path(self, key: str) -> Path | None:
        v = self.values[key]
        if v is None:
            return None
        p = Path(v)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def seed(self) -> int:
        return self.values["run.seed"]

    def with_overrides(self, **kv) -> "PipelineConfig":
        vals = dict(self.values)
        for k, v in kv.items():
            key = k.replace("__", ".")
            if key not in SCHEMA:
                raise ConfigError(f"unknown key {key}")
            vals[key] = v
        return replace(self, values=vals)

    def detect(self) -> DetectConfig:
        v = self.values
        return DetectConfig(v["detect.overlap_threshold"], v["detect.dim_tolerance"],
                            v["detect.fusion_min_sep"], v["detect.edge_margin"])

    def structure(self) -> StructureConfig:
        v = self.values
        return StructureConfig(
            rows_per_bench=v["structure.rows_per_bench"], th=v["structure.th"],
            n_max=v["structure.n_max"], min_inliers=v["structure.min_inliers"],
            ransac_trials=v["structure.ransac_trials"],
            ransac_threshold=v["structure.ransac_threshold"],
            coincidence=v["structure.coincidence"], darkness_ratio=v["structure.darkness_ratio"],
            north_up=v["structure.north_up"])

    def lift(self) -> LiftConfig:
        v = self.values
        return LiftConfig(v["lift.knn_k"], v["lift.max_ray_residual"], v["lift.voxel_cell_factor"])

    def match(self) -> MatchConfig:
        v = self.values
        return MatchConfig(v["match.dist_threshold"], v["match.th"], v["match.max_repair_rounds"])

    def optimize(self) -> OptimizeConfig:
        v = self.values
        return OptimizeConfig(
            ransac3d_threshold=v["optimize.ransac3d_threshold"],
            ransac3d_trials=v["optimize.ransac3d_trials"],
            enforce_pitch=v["optimize.enforce_pitch"],
            max_row_angle_deg=v["optimize.max_row_angle_deg"],
            module_size=(v["optimize.module_length"], v["optimize.module_width"]),
            seed=v["run.seed"])


def parse_config(text: str, base_dir=".", source: str = "<config>") -> PipelineConfig:
    """Parse configuration text; unknown keys and bad values raise ConfigError."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            raise ConfigError(f"{source}: line {lineno}: expected 'key = value'")
        key, val = (p.strip() for p in s.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}: line {lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"{source}: line {lineno}: duplicate key {key!r}")
        raw[key] = (val, lineno)
    values = {}
    for key, (parse, default, check) in SCHEMA.items():
        if key not in raw:
            if default is REQUIRED:
                raise ConfigError(f"{source}: missing required key {key!r}")
            values[key] = default
            continue
        val, lineno = raw[key]
        try:
            v = parse(val)
        except ValueError as exc:
            raise ConfigError(f"{source}: line {lineno}: bad value for {key}: {exc}") from exc
        if isinstance(v, float) and not math.isfinite(v):
            raise ConfigError(f"{source}: line {lineno}: {key} must be finite")
        if check is not None and not check(v):
            raise ConfigError(f"{source}: line {lineno}: {key} = {val} out of range")
        values[key] = v
    return PipelineConfig(values, Path(base_dir))


def load_config(path) -> PipelineConfig:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{p}: no such config file")
    return parse_config(p.read_text(encoding="utf-8"), p.parent, str(p))


def format_config(cfg: PipelineConfig) -> str:
    """Serialise every key, defaults included, in schema order."""
    lines = []
    for key in SCHEMA:
        v = cfg.values[key]
        if v is None:
            continue
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, tuple):
            v = " ".join(map(str, v))
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"
