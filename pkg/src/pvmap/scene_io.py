"""Readers and writers for every file the pipeline consumes or produces.

World coordinates are meters in a local East-North-Up frame anchored at the
``geo_origin`` of the cameras. Cameras look down their local -z axis with x to
the right and y up; ``rotation`` maps world vectors into the camera frame.
Floats are serialised with ``repr`` (shortest exact round-trip form).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from pvmap.detect_fuse import ModuleDetection, OrientedBox

logger = logging.getLogger(__name__)

EARTH_RADIUS = 6378137.0


class ParseError(ValueError):
    """Malformed input file."""


class ValidationError(ValueError):
    """Input parsed but violates a domain invariant."""


# --------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class CameraFrame:
    """Calibrated, undistorted pinhole view with a world pose."""

    frame_id: str
    width: int
    height: int
    focal: float
    cx: float
    cy: float
    rotation: np.ndarray
    center: np.ndarray
    geo_origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        C = np.asarray(self.center, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "center", C)
        object.__setattr__(self, "geo_origin", tuple(float(v) for v in self.geo_origin))
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValidationError(f"frame {self.frame_id}: rotation is not a proper rotation")
        if not self.focal > 0:
            raise ValidationError(f"frame {self.frame_id}: focal must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValidationError(f"frame {self.frame_id}: principal point outside image")

    def project(self, X) -> np.ndarray:
        """Project world points (..., 3) to pixels (..., 2); points behind give NaN."""
        X = np.asarray(X, dtype=float)
        Xc = (X - self.center) @ self.rotation.T
        depth = -Xc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.cx + self.focal * Xc[..., 0] / depth
            v = self.cy - self.focal * Xc[..., 1] / depth
        uv = np.stack([u, v], axis=-1)
        uv[depth <= 0] = np.nan
        return uv

    def depth(self, X) -> np.ndarray:
        Xc = (np.asarray(X, dtype=float) - self.center) @ self.rotation.T
        return -Xc[..., 2]

    def to_dict(self) -> dict:
        lat, lon, alt = self.geo_origin
        return {
            "frame_id": self.frame_id, "width": int(self.width), "height": int(self.height),
            "focal_px": float(self.focal), "cx": float(self.cx), "cy": float(self.cy),
            "R": [float(v) for v in self.rotation.ravel()],
            "center": [float(v) for v in self.center],
            "geo_origin": {"lat": lat, "lon": lon, "alt": alt},
        }


@dataclass(frozen=True)
class SurfacePoint:
    position: np.ndarray
    normal: np.ndarray
    color: tuple


@dataclass
class PointCloud:
    """Point cloud stored column-wise as arrays."""

    positions: np.ndarray
    normals: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=float).reshape(-1, 3)
        self.normals = np.ascontiguousarray(self.normals, dtype=float).reshape(-1, 3)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.uint8).reshape(-1, 3)
        if not (len(self.positions) == len(self.normals) == len(self.colors)):
            raise ValidationError("point cloud arrays differ in length")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.positions.min(axis=0), self.positions.max(axis=0)

    def point(self, i: int) -> SurfacePoint:
        return SurfacePoint(self.positions[i].copy(), self.normals[i].copy(),
                            tuple(int(c) for c in self.colors[i]))


@dataclass
class ImageRaster:
    """Row-major RGB8 image; ``pixels`` has shape (height, width, 3)."""

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.shape != (self.height, self.width, 3):
            raise ValidationError(
                f"pixel array shape {self.pixels.shape} does not match {self.width}x{self.height}")


@dataclass(frozen=True)
class AddKeypoint:
    frame_id: str
    row_index: int
    after_in_row_index: int


@dataclass(frozen=True)
class DeleteKeypoint:
    frame_id: str
    keypoint_index: int


@dataclass(frozen=True)
class AddModule:
    frame_id: str
    center: tuple
    row_index: int


@dataclass(frozen=True)
class DeleteModule:
    frame_id: str
    detection_index: int


CORRECTION_TYPES = {
    "add-keypoint": (AddKeypoint, ("frame_id", "row_index", "after_in_row_index")),
    "delete-keypoint": (DeleteKeypoint, ("frame_id", "keypoint_index")),
    "add-module": (AddModule, ("frame_id", "center", "row_index")),
    "delete-module": (DeleteModule, ("frame_id", "detection_index")),
}


# --------------------------------------------------------------------------
# JSON helpers


def dump_json(obj, path) -> None:
    """Deterministic JSON (insertion-ordered keys, shortest float repr)."""
    text = json.dumps(obj, indent=1, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def _read_json(path):
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{p}: no such file")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{p}: line {exc.lineno}: {exc.msg}") from exc


def _field(rec, key, i, path, kind=float):
    if key not in rec:
        raise ParseError(f"{path}: record {i}: missing field {key!r}")
    try:
        return kind(rec[key])
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{path}: record {i}: bad value for {key!r}") from exc


# --------------------------------------------------------------------------
# cameras


def load_camera_frames(path) -> list[CameraFrame]:
    data = _read_json(path)
    if not isinstance(data, list):
        raise ParseError(f"{path}: expected a JSON array of frames")
    frames = []
    for i, rec in enumerate(data):
        R = rec.get("R")
        C = rec.get("center")
        if not isinstance(R, list) or len(R) != 9:
            raise ParseError(f"{path}: record {i}: field 'R' needs 9 numbers")
        if not isinstance(C, list) or len(C) != 3:
            raise ParseError(f"{path}: record {i}: field 'center' needs 3 numbers")
        geo = rec.get("geo_origin", {"lat": 0.0, "lon": 0.0, "alt": 0.0})
        try:
            frames.append(CameraFrame(
                frame_id=_field(rec, "frame_id", i, path, str),
                width=_field(rec, "width", i, path, int),
                height=_field(rec, "height", i, path, int),
                focal=_field(rec, "focal_px", i, path),
                cx=_field(rec, "cx", i, path),
                cy=_field(rec, "cy", i, path),
                rotation=np.array(R, dtype=float),
                center=np.array(C, dtype=float),
                geo_origin=(float(geo["lat"]), float(geo["lon"]), float(geo["alt"])),
            ))
        except ValidationError as exc:
            raise ValidationError(f"{path}: record {i}: {exc}") from exc
    ids = [f.frame_id for f in frames]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"{path}: duplicate frame_id")
    return frames


def write_camera_frames(frames, path) -> None:
    dump_json([f.to_dict() for f in frames], path)


# --------------------------------------------------------------------------
# point cloud


def load_point_cloud(path) -> PointCloud:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{p}: no such file")
    rows = []
    with p.open("r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 9:
                raise ParseError(f"{p}: line {lineno}: expected 9 values, got {len(parts)}")
            rows.append(parts)
    if not rows:
        raise ParseError(f"{p}: empty point cloud")
    try:
        arr = np.array(rows, dtype=float)
    except ValueError as exc:
        raise ParseError(f"{p}: non-numeric value ({exc})") from exc
    bad = np.flatnonzero(~np.isfinite(arr).all(axis=1))
    if bad.size:
        raise ValidationError(f"{p}: non-finite value in record {int(bad[0])}")
    normals = arr[:, 3:6]
    mag = np.linalg.norm(normals, axis=1)
    off = np.flatnonzero((mag < 0.99) | (mag > 1.01))
    if off.size:
        raise ValidationError(f"{p}: record {int(off[0])}: normal magnitude {mag[off[0]]:.3f}")
    # renormalise only where needed so exact unit normals round-trip untouched
    fix = np.abs(mag - 1.0) > 1e-12
    normals[fix] /= mag[fix, None]
    colors = arr[:, 6:9]
    if np.any((colors < 0) | (colors > 255) | (colors != np.round(colors))):
        raise ValidationError(f"{p}: colors must be integers in [0, 255]")
    return PointCloud(arr[:, :3], normals, colors.astype(np.uint8))


def write_point_cloud(cloud: PointCloud, path) -> None:
    buf = io.StringIO()
    for pos, nrm, col in zip(cloud.positions.tolist(), cloud.normals.tolist(),
                             cloud.colors.tolist()):
        buf.write(" ".join(map(repr, pos + nrm)))
        buf.write(" %d %d %d\n" % tuple(col))
    Path(path).write_text(buf.getvalue(), encoding="ascii")


# --------------------------------------------------------------------------
# detections


def load_detections(path, frame_ids=None) -> dict[str, list[ModuleDetection]]:
    """Group detection records by frame; indices count per frame in file order."""
    data = _read_json(path)
    if not isinstance(data, list):
        raise ParseError(f"{path}: expected a JSON array of detections")
    known = set(frame_ids) if frame_ids is not None else None
    out: dict[str, list[ModuleDetection]] = {}
    warned = set()
    for i, rec in enumerate(data):
        fid = _field(rec, "frame_id", i, path, str)
        w, h = _field(rec, "w", i, path), _field(rec, "h", i, path)
        if w <= 0 or h <= 0:
            raise ValidationError(f"{path}: record {i}: non-positive box dimension")
        src = _field(rec, "source", i, path, str)
        if src not in ("primary", "secondary", "manual"):
            raise ValidationError(f"{path}: record {i}: unknown source {src!r}")
        if known is not None and fid not in known and fid not in warned:
            logger.warning("%s: detections reference unknown frame %s", path, fid)
            warned.add(fid)
        box = OrientedBox(_field(rec, "cx", i, path), _field(rec, "cy", i, path), w, h,
                          _field(rec, "angle_rad", i, path))
        lst = out.setdefault(fid, [])
        lst.append(ModuleDetection(box, src, fid, len(lst), float(rec.get("score", 1.0))))
    return out


def detection_record(d: ModuleDetection) -> dict:
    return {"frame_id": d.frame_id, "cx": d.box.cx, "cy": d.box.cy, "w": d.box.w,
            "h": d.box.h, "angle_rad": d.box.angle, "score": d.score, "source": d.source}


def write_detections(dets_by_frame, path) -> None:
    """Write detections; per-frame order must follow detection_index."""
    recs = []
    for fid in dets_by_frame:
        dets = sorted(dets_by_frame[fid], key=lambda d: d.detection_index)
        recs.extend(detection_record(d) for d in dets)
    dump_json(recs, path)


# --------------------------------------------------------------------------
# images


def load_image(path) -> ImageRaster:
    data = Path(path).read_bytes()
    if data[:2] != b"P6":
        raise ParseError(f"{path}: not a binary PPM (P6)")
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(f"{path}: truncated header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise ParseError(f"{path}: bad header") from exc
    if maxval != 255:
        raise ParseError(f"{path}: only 8-bit PPM is supported")
    need = w * h * 3
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise ParseError(f"{path}: truncated payload ({len(payload)} of {need} bytes)")
    pix = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()
    return ImageRaster(w, h, pix)


def write_image(img: ImageRaster, path) -> None:
    header = b"P6\n%d %d\n255\n" % (img.width, img.height)
    Path(path).write_bytes(header + np.ascontiguousarray(img.pixels, dtype=np.uint8).tobytes())


# --------------------------------------------------------------------------
# corrections


def load_corrections(path, frame_ids=None) -> list:
    data = _read_json(path)
    if not isinstance(data, list):
        raise ParseError(f"{path}: expected a JSON array of edits")
    known = set(frame_ids) if frame_ids is not None else None
    edits = []
    for i, rec in enumerate(data):
        kind = rec.get("type")
        if kind not in CORRECTION_TYPES:
            raise ParseError(f"{path}: record {i}: unknown edit type {kind!r}")
        cls, keys = CORRECTION_TYPES[kind]
        vals = {}
        for k in keys:
            if k not in rec:
                raise ParseError(f"{path}: record {i}: missing field {k!r}")
            v = rec[k]
            if k == "center":
                if not isinstance(v, list) or len(v) != 2:
                    raise ParseError(f"{path}: record {i}: 'center' needs 2 numbers")
                v = (float(v[0]), float(v[1]))
            elif k != "frame_id":
                v = int(v)
            vals[k] = str(v) if k == "frame_id" else v
        if known is not None and vals["frame_id"] not in known:
            raise ValidationError(f"{path}: record {i}: unknown frame {vals['frame_id']}")
        edits.append(cls(**vals))
    return edits


def write_corrections(edits, path) -> None:
    names = {cls: name for name, (cls, _) in CORRECTION_TYPES.items()}
    recs = []
    for e in edits:
        rec = {"type": names[type(e)]}
        for k in CORRECTION_TYPES[rec["type"]][1]:
            v = getattr(e, k)
            rec[k] = list(v) if isinstance(v, tuple) else v
        recs.append(rec)
    dump_json(recs, path)


# --------------------------------------------------------------------------
# model and report exports


def load_model(path):
    from pvmap.optimize import PlantModel

    return PlantModel.from_dict(_read_json(path))


def write_model(model, path) -> None:
    dump_json(model.to_dict(), path)


def enu_to_lonlat(east, north, geo_origin) -> tuple[float, float]:
    """Equirectangular approximation about the geodetic origin."""
    lat0, lon0 = geo_origin[0], geo_origin[1]
    lat = lat0 + math.degrees(north / EARTH_RADIUS)
    lon = lon0 + math.degrees(east / (EARTH_RADIUS * math.cos(math.radians(lat0))))
    return lon, lat


def module_footprint(module, axis_dir, size) -> np.ndarray:
    """Four 3D corners of a module rectangle lying in its plane."""
    n = np.asarray(module.normal, dtype=float)
    u = np.asarray(axis_dir, dtype=float)
    u = u - np.dot(u, n) * n
    nu = np.linalg.norm(u)
    u = u / nu if nu > 0 else np.array([1.0, 0.0, 0.0])
    v = np.cross(n, u)
    p = np.asarray(module.position, dtype=float)
    a, c = 0.5 * size[0], 0.5 * size[1]
    return np.array([p - a * u - c * v, p + a * u - c * v, p + a * u + c * v, p - a * u + c * v])


def model_geojson(model) -> dict:
    axes = {b.bench_id: b.direction for b in model.benches}
    feats = []
    for m in model.modules:
        corners = module_footprint(m, axes.get(m.bench_id, (1.0, 0.0, 0.0)), model.module_size)
        ring = [list(enu_to_lonlat(c[0], c[1], model.geo_origin)) for c in corners]
        # RFC 7946 exterior rings are counter-clockwise
        area = sum(ring[i][0] * ring[(i + 1) % 4][1] - ring[(i + 1) % 4][0] * ring[i][1]
                   for i in range(4))
        if area < 0:
            ring = ring[::-1]
        ring.append(ring[0])
        feats.append({
            "type": "Feature",
            "geometry": {"type": "Polygon", "coordinates": [ring]},
            "properties": {
                "global_id": m.global_id, "line_id": m.line_id, "bench_id": m.bench_id,
                "sector_id": m.sector_id, "row_index": m.row_index,
                "in_row_index": m.in_row_index, "n_detections": m.n_detections,
                "elevation": float(m.position[2]) + model.geo_origin[2],
            },
        })
    return {"type": "FeatureCollection", "features": feats}


_PALETTE = ["#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#42d4f4",
            "#f032e6", "#bfef45", "#469990", "#9a6324", "#800000", "#000075"]


def overlay_svg(model, frame: CameraFrame) -> str:
    """Model modules projected into one frame, coloured by sector and labelled."""
    axes = {b.bench_id: b.direction for b in model.benches}
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{frame.width}" '
        f'height="{frame.height}" viewBox="0 0 {frame.width} {frame.height}">',
        f'<rect x="0" y="0" width="{frame.width}" height="{frame.height}" fill="#202020"/>',
    ]
    for m in model.modules:
        corners = module_footprint(m, axes.get(m.bench_id, (1.0, 0.0, 0.0)), model.module_size)
        uv = frame.project(corners)
        if np.isnan(uv).any():
            continue
        if (uv[:, 0].max() < 0 or uv[:, 0].min() > frame.width
                or uv[:, 1].max() < 0 or uv[:, 1].min() > frame.height):
            continue
        pts = " ".join(f"{u:.2f},{v:.2f}" for u, v in uv)
        color = _PALETTE[m.sector_id % len(_PALETTE)]
        c = uv.mean(axis=0)
        out.append(f'<polygon points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{c[0]:.2f}" y="{c[1]:.2f}" font-size="10" fill="{color}" '
                   f'text-anchor="middle">{m.global_id}-s{m.sector_id}-l{m.line_id}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_outputs(model, report, out_dir, frames=()) -> list[Path]:
    """Write model JSON, GeoJSON, stats CSV and per-frame SVG overlays.

    Returns:
        Paths of the files written, in a fixed order.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise OSError(f"output directory {out} is not writable")
    written = []
    write_model(model, out / "model.json")
    written.append(out / "model.json")
    dump_json(model_geojson(model), out / "model.geojson")
    written.append(out / "model.geojson")
    if report is not None:
        with (out / "stats.csv").open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            for row in report.csv_rows():
                writer.writerow(row)
        written.append(out / "stats.csv")
    if frames:
        odir = out / "overlays"
        odir.mkdir(exist_ok=True)
        for f in frames:
            p = odir / f"{f.frame_id}.svg"
            p.write_text(overlay_svg(model, f), encoding="utf-8")
            written.append(p)
    return written


def load_truth(path) -> dict:
    return _read_json(path)


@dataclass
class SceneInputs:
    """Everything the pipeline reads from disk."""

    frames: list
    cloud: PointCloud
    detections: dict
    images: dict = field(default_factory=dict)
