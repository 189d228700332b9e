"""Synthetic PV plants, nadir camera plans, noisy detections, images and warped clouds.

World frame: x east, y north, z up (meters). Lines of benches run along +x;
line 0 is the northmost line, bench 0 and in-row index 0 are the westmost,
row 0 is the northmost (and, with the benches tilted towards the south, the
highest) row of a bench.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from pvmap.detect_fuse import ModuleDetection, OrientedBox
from pvmap.geometry import wrap_axial
from pvmap.scene_io import (CameraFrame, ImageRaster, PointCloud, dump_json, write_camera_frames,
                            write_detections, write_image, write_point_cloud)

logger = logging.getLogger(__name__)

GROUND_RGB = (190, 180, 150)
MODULE_RGB = (60, 90, 150)
GAP_RGB = (10, 15, 25)
DEFAULT_GEO_ORIGIN = (46.05, 14.5, 300.0)


@dataclass(frozen=True)
class PlantParams:
    n_lines: int = 3
    benches_per_line: int = 9
    rows_per_bench: int = 2
    modules_per_row: int = 8
    module_along: float = 1.65
    module_across: float = 1.0
    spacing: float = 0.05
    gap_factor: float = 1.45  # bench-gap center distance in module pitches
    aisle: float = 4.0
    tilt_deg: float = 20.0
    mount_height: float = 1.0
    terrain_slope: tuple = (0.01, 0.005)
    terrain_amplitude: float = 0.3
    terrain_wavelength: float = 70.0

    @property
    def pitch(self) -> float:
        return self.module_along + self.spacing

    @property
    def across_pitch(self) -> float:
        return self.module_across + self.spacing


@dataclass(frozen=True)
class CameraParams:
    altitude: float = 80.0
    focal: float = 3200.0
    width: int = 1200
    height: int = 800
    overlap: float = 0.6
    margin: float = 0.0


@dataclass(frozen=True)
class NoiseProfile:
    dropout: float = 0.0  # fused (either detector) miss rate
    jitter_px: float = 0.0
    dim_jitter: float = 0.0
    secondary_coverage: float = 0.5
    secondary_shift_px: tuple = (0.0, 0.0)  # per-frame shift magnitude range
    secondary_jitter_px: float = 0.0
    cloud_noise: tuple = (0.0, 0.0, 0.0)
    patch_noise: tuple = (0.0, 0.0, 0.0)  # per-module rigid offset (local SfM inconsistency)
    warp_amplitude: tuple = (0.0, 0.0, 0.0)
    warp_wavelength: float = 100.0

    def __post_init__(self):
        for name in ("dropout", "secondary_coverage"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if min(self.warp_amplitude) < 0 or min(self.cloud_noise) < 0 or min(self.patch_noise) < 0:
            raise ValueError("noise amplitudes must be non-negative")


ZERO_NOISE = NoiseProfile()
PAPER_NOISE = NoiseProfile(
    dropout=0.015, jitter_px=2.0, dim_jitter=0.05, secondary_coverage=0.5,
    secondary_shift_px=(1.5, 2.0), secondary_jitter_px=1.0,
    cloud_noise=(0.02, 0.02, 0.06), patch_noise=(0.03, 0.03, 0.2), warp_amplitude=(0.2, 0.2, 0.6), warp_wavelength=100.0)

PP1_DESK = PlantParams()
PP2_DESK = PlantParams(n_lines=3, benches_per_line=5, rows_per_bench=6, modules_per_row=7,
                       module_along=1.57, module_across=0.79)
PRESET_CAMERA = CameraParams(overlap=0.6, margin=6.0)

PRESETS = {
    "pp1-desk": (PP1_DESK, PRESET_CAMERA, PAPER_NOISE),
    "pp2-desk": (PP2_DESK, PRESET_CAMERA, PAPER_NOISE),
    "zero-noise": (PP1_DESK, PRESET_CAMERA, ZERO_NOISE),
    "paper-noise": (PP1_DESK, PRESET_CAMERA, PAPER_NOISE),
}
NOISE_PROFILES = {"zero-noise": ZERO_NOISE, "paper-noise": PAPER_NOISE}


# --------------------------------------------------------------------------
# plant


@dataclass
class GroundTruthPlant:
    params: PlantParams
    positions: np.ndarray  # (N, 3) module centers
    normals: np.ndarray  # (N, 3)
    tuples: np.ndarray  # (N, 5) line, bench, sector, row, in_row
    bench_centers: np.ndarray  # (lines * benches, 3)
    along: np.ndarray  # unit row direction
    across: np.ndarray  # unit in-plane direction pointing north and up

    def __len__(self) -> int:
        return len(self.positions)

    def terrain(self, x, y):
        return terrain_height(self.params, x, y)

    def module_corners(self) -> np.ndarray:
        """(N, 4, 3) corners: (-along,-across), (+,-), (+,+), (-,+)."""
        a = 0.5 * self.params.module_along * self.along
        c = 0.5 * self.params.module_across * self.across
        offs = np.array([-a - c, a - c, a + c, -a + c])
        return self.positions[:, None, :] + offs[None, :, :]

    def module_index(self) -> dict:
        """Map (line, global bench, row, in_row) to module id."""
        return {tuple(int(v) for v in t[[0, 1, 3, 4]]): i for i, t in enumerate(self.tuples)}

    def gap_quads(self) -> list[tuple[np.ndarray, tuple]]:
        """3D quads of the bench gaps, one per row per gap, with (line, bench, row) keys."""
        p = self.params
        idx = self.module_index()
        corners = self.module_corners()
        out = []
        for L in range(p.n_lines):
            for b in range(p.benches_per_line - 1):
                for r in range(p.rows_per_bench):
                    gb = L * p.benches_per_line + b
                    i = idx[(L, gb, r, p.modules_per_row - 1)]
                    j = idx[(L, gb + 1, r, 0)]
                    out.append((np.array([corners[i, 1], corners[j, 0], corners[j, 3],
                                          corners[i, 2]]), (L, b, r)))
        return out


def terrain_height(p: PlantParams, x, y):
    sx, sy = p.terrain_slope
    lam = p.terrain_wavelength
    return (sx * np.asarray(x) + sy * np.asarray(y)
            + p.terrain_amplitude * np.sin(2 * np.pi * np.asarray(x) / lam)
            * np.cos(2 * np.pi * np.asarray(y) / (1.7 * lam)))


def terrain_normal(p: PlantParams, x, y) -> np.ndarray:
    sx, sy = p.terrain_slope
    lam, A = p.terrain_wavelength, p.terrain_amplitude
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    dzdx = sx + A * (2 * np.pi / lam) * np.cos(2 * np.pi * x / lam) * np.cos(2 * np.pi * y / (1.7 * lam))
    dzdy = sy - A * np.sin(2 * np.pi * x / lam) * (2 * np.pi / (1.7 * lam)) * np.sin(
        2 * np.pi * y / (1.7 * lam))
    n = np.stack([-dzdx, -dzdy, np.ones_like(dzdx)], axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def generate_plant(params: PlantParams = PP1_DESK, seed: int = 0) -> GroundTruthPlant:
    """Deterministic plant of rigid tilted benches sitting on the terrain.

    The seed is accepted for interface symmetry; the layout itself is fixed by
    the parameters.
    """
    p = params
    if min(p.n_lines, p.benches_per_line, p.rows_per_bench, p.modules_per_row) < 1:
        raise ValueError("plant counts must be at least 1")
    if min(p.module_along, p.module_across) <= 0 or p.spacing < 0:
        raise ValueError("module dimensions must be positive")
    if not 1.1 < p.gap_factor < 1.8:
        raise ValueError("bench-gap distance must lie strictly between 1.1 and 1.8 module pitches")
    t = math.radians(p.tilt_deg)
    along = np.array([1.0, 0.0, 0.0])
    across = np.array([0.0, math.cos(t), math.sin(t)])
    normal = np.cross(along, across)  # (0, -sin t, cos t)
    R, M = p.rows_per_bench, p.modules_per_row
    depth = (R * p.across_pitch - p.spacing) * math.cos(t)
    bench_pitch = (M - 1) * p.pitch + p.gap_factor * p.pitch
    pos, nrm, tup, centers = [], [], [], []
    for L in range(p.n_lines):
        yc = -L * (depth + p.aisle)
        for b in range(p.benches_per_line):
            xc = b * bench_pitch
            c = np.array([xc, yc, float(terrain_height(p, xc, yc)) + p.mount_height])
            centers.append(c)
            for r in range(R):
                s = ((R - 1) / 2 - r) * p.across_pitch
                for i in range(M):
                    a = (i - (M - 1) / 2) * p.pitch
                    pos.append(c + a * along + s * across)
                    nrm.append(normal)
                    tup.append((L, L * p.benches_per_line + b,
                                (L * p.benches_per_line + b) * R + r, r, i))
    return GroundTruthPlant(p, np.array(pos), np.array(nrm), np.array(tup, dtype=np.int64),
                            np.array(centers), along, across)


# --------------------------------------------------------------------------
# cameras


def plan_cameras(plant: GroundTruthPlant, cam: CameraParams = CameraParams(),
                 geo_origin=DEFAULT_GEO_ORIGIN) -> list[CameraFrame]:
    """Nadir, north-up grid of frames over the plant bounds (plus margin)."""
    if not 0.0 < cam.overlap < 1.0:
        raise ValueError("overlap must lie in (0, 1)")
    corners = plant.module_corners().reshape(-1, 3)
    lo = corners[:, :2].min(axis=0) - cam.margin
    hi = corners[:, :2].max(axis=0) + cam.margin
    ground = float(np.mean(plant.terrain(plant.positions[:, 0], plant.positions[:, 1])))
    z = ground + cam.altitude
    foot = np.array([cam.width, cam.height]) * cam.altitude / cam.focal
    axes = []
    for k in range(2):
        extent = hi[k] - lo[k]
        if extent <= foot[k]:
            axes.append(np.array([0.5 * (lo[k] + hi[k])]))
            continue
        n = int(math.ceil((extent - foot[k]) / (foot[k] * (1 - cam.overlap)))) + 1
        step = (extent - foot[k]) / (n - 1)
        axes.append(lo[k] + 0.5 * foot[k] + step * np.arange(n))
    frames = []
    for y in axes[1][::-1]:  # north first
        for x in axes[0]:
            frames.append(CameraFrame(f"f{len(frames):03d}", cam.width, cam.height, cam.focal,
                                      cam.width / 2, cam.height / 2, np.eye(3),
                                      np.array([x, y, z]), geo_origin))
    return frames


def visible_modules(plant: GroundTruthPlant, frame: CameraFrame) -> np.ndarray:
    """Mask of modules whose four corners project inside the image."""
    uv = frame.project(plant.module_corners())
    ok = np.isfinite(uv).all(axis=(1, 2))
    ok &= (uv[..., 0] >= 0).all(axis=1) & (uv[..., 0] <= frame.width).all(axis=1)
    ok &= (uv[..., 1] >= 0).all(axis=1) & (uv[..., 1] <= frame.height).all(axis=1)
    return ok


def projection_counts(plant: GroundTruthPlant, frames) -> np.ndarray:
    """Number of frames fully containing each module."""
    return np.sum([visible_modules(plant, f) for f in frames], axis=0).astype(int)


# --------------------------------------------------------------------------
# rendering


@dataclass
class Scene:
    plant: GroundTruthPlant
    frames: list
    detections: dict  # frame_id -> list of ModuleDetection
    det_truth: dict  # frame_id -> list of module truth ids by detection index
    images: dict  # frame_id -> ImageRaster
    cloud: PointCloud
    cloud_labels: np.ndarray  # module id, -1 terrain, -2 gap
    noise: NoiseProfile
    seed: int
    camera: CameraParams = field(default_factory=CameraParams)


def warp_field(rng: np.random.Generator, amplitude, wavelength: float):
    """Smooth displacement field: three weighted sinusoids per axis, |component| <= amplitude."""
    weights = np.array([0.5, 0.3, 0.2])
    lams = wavelength * np.array([1.0, 1.6, 2.3])
    theta = rng.uniform(0, 2 * np.pi, (3, 3))
    phase = rng.uniform(0, 2 * np.pi, (3, 3))
    amp = np.asarray(amplitude, dtype=float)

    def apply(xy: np.ndarray) -> np.ndarray:
        out = np.zeros((len(xy), 3))
        for ax in range(3):
            for k in range(3):
                dirn = np.array([math.cos(theta[ax, k]), math.sin(theta[ax, k])])
                out[:, ax] += weights[k] * np.sin(2 * np.pi * (xy @ dirn) / lams[k] + phase[ax, k])
            out[:, ax] *= amp[ax]
        return out

    return apply


def _grid_offsets(half_along: float, half_across: float, step: float, along, across):
    """Square sampling grid through the origin, kept inside the given half-extents."""
    na = int(math.floor(half_along / step + 1e-9))
    nc = int(math.floor(half_across / step + 1e-9))
    return np.array([i * step * along + j * step * across
                     for i in range(-na, na + 1) for j in range(-nc, nc + 1)])


def build_cloud(plant: GroundTruthPlant, noise: NoiseProfile, rng: np.random.Generator,
                terrain_step: float = 0.5, cloud_step: float = 0.1):
    """Clean surface samples of modules, gaps and terrain, then noise and warp.

    Modules are sampled on a square grid through their centers, so the nearest
    neighbours of a center sample are symmetric about it.
    """
    p = plant.params
    inset = 0.02
    offs = _grid_offsets(0.5 * p.module_along - inset, 0.5 * p.module_across - inset, cloud_step,
                         plant.along, plant.across)
    patch = rng.normal(0.0, 1.0, (len(plant), 3)) * np.asarray(noise.patch_noise, dtype=float)
    mod_pts = (plant.positions[:, None, :] + patch[:, None, :] + offs[None]).reshape(-1, 3)
    mod_nrm = np.repeat(plant.normals, len(offs), axis=0)
    mod_lab = np.repeat(np.arange(len(plant)), len(offs))
    gap_pts, gap_nrm = [], []
    for quad, _ in plant.gap_quads():
        ctr = quad.mean(axis=0)
        rel = quad - ctr
        half_a = np.abs(rel @ plant.along).max() - inset
        half_c = np.abs(rel @ plant.across).max() - inset
        g = _grid_offsets(max(half_a, 0.0), max(half_c, 0.0), cloud_step, plant.along, plant.across)
        gap_pts.extend(ctr + g)
        gap_nrm.extend([plant.normals[0]] * len(g))
    corners = plant.module_corners().reshape(-1, 3)
    lo = corners[:, :2].min(axis=0) - 8.0
    hi = corners[:, :2].max(axis=0) + 8.0
    gx, gy = np.meshgrid(np.arange(lo[0], hi[0], terrain_step), np.arange(lo[1], hi[1], terrain_step))
    gx, gy = gx.ravel(), gy.ravel()
    keep = np.ones(len(gx), dtype=bool)
    depth = (p.rows_per_bench * p.across_pitch - p.spacing) * math.cos(math.radians(p.tilt_deg))
    xs, xe = corners[:, 0].min() - 0.3, corners[:, 0].max() + 0.3
    for yc in np.unique(plant.bench_centers[:, 1]):
        keep &= ~((gx > xs) & (gx < xe) & (np.abs(gy - yc) < 0.5 * depth + 0.3))
    gx, gy = gx[keep], gy[keep]
    ter_pts = np.column_stack([gx, gy, terrain_height(p, gx, gy)])
    ter_nrm = terrain_normal(p, gx, gy)
    pts = np.vstack([mod_pts, np.array(gap_pts).reshape(-1, 3), ter_pts])
    nrm = np.vstack([mod_nrm, np.array(gap_nrm).reshape(-1, 3), ter_nrm])
    labels = np.concatenate([mod_lab, np.full(len(gap_pts), -2), np.full(len(ter_pts), -1)])
    colors = np.vstack([np.tile(MODULE_RGB, (len(mod_pts), 1)), np.tile(GAP_RGB, (len(gap_pts), 1)),
                        np.tile(GROUND_RGB, (len(ter_pts), 1))])
    sigma = np.asarray(noise.cloud_noise, dtype=float)
    if sigma.any():
        pts = pts + rng.normal(0.0, 1.0, pts.shape) * sigma
    else:
        rng.normal(0.0, 1.0, pts.shape)  # keep stream positions independent of the profile
    warp = warp_field(rng, noise.warp_amplitude, noise.warp_wavelength)
    if np.any(noise.warp_amplitude):
        pts = pts + warp(pts[:, :2])
    return PointCloud(pts, nrm, colors), labels


def _raster_quads(img: np.ndarray, quads_uv, color) -> None:
    """Fill convex quads (pixel-center sampling) in place."""
    H, W = img.shape[:2]
    for q in quads_uv:
        if not np.isfinite(q).all():
            continue
        x0, y0 = max(int(math.floor(q[:, 0].min())), 0), max(int(math.floor(q[:, 1].min())), 0)
        x1, y1 = min(int(math.ceil(q[:, 0].max())), W), min(int(math.ceil(q[:, 1].max())), H)
        if x0 >= x1 or y0 >= y1:
            continue
        gx, gy = np.meshgrid(np.arange(x0, x1) + 0.5, np.arange(y0, y1) + 0.5)
        cross = []
        for k in range(4):
            ax, ay = q[k]
            bx, by = q[(k + 1) % 4]
            cross.append((bx - ax) * (gy - ay) - (by - ay) * (gx - ax))
        cross = np.array(cross)
        inside = (cross >= 0).all(axis=0) | (cross <= 0).all(axis=0)
        img[y0:y1, x0:x1][inside] = color


def render_image(plant: GroundTruthPlant, frame: CameraFrame) -> ImageRaster:
    img = np.empty((frame.height, frame.width, 3), dtype=np.uint8)
    img[:] = GROUND_RGB
    _raster_quads(img, [frame.project(q) for q, _ in plant.gap_quads()], GAP_RGB)
    _raster_quads(img, frame.project(plant.module_corners()), MODULE_RGB)
    return ImageRaster(frame.width, frame.height, img)


def exact_boxes(plant: GroundTruthPlant, frame: CameraFrame):
    """Projected centers, edge-length dimensions and angles of every module."""
    uv = frame.project(plant.module_corners())
    ctr = frame.project(plant.positions)
    e_along = 0.5 * ((uv[:, 1] - uv[:, 0]) + (uv[:, 2] - uv[:, 3]))
    w = 0.5 * (np.hypot(*(uv[:, 1] - uv[:, 0]).T) + np.hypot(*(uv[:, 2] - uv[:, 3]).T))
    h = 0.5 * (np.hypot(*(uv[:, 3] - uv[:, 0]).T) + np.hypot(*(uv[:, 2] - uv[:, 1]).T))
    ang = np.arctan2(e_along[:, 1], e_along[:, 0])
    return ctr, w, h, ang


def render_scene(plant: GroundTruthPlant, frames, noise: NoiseProfile = ZERO_NOISE,
                 seed: int = 0, images: bool = True, force_drop=(),
                 camera: CameraParams | None = None) -> Scene:
    """Detections, images and cloud for a camera plan.

    Args:
        force_drop: (frame_id, module id) pairs removed from both detectors,
            used to build missing-detection fixtures.
    """
    ss = np.random.SeedSequence(seed)
    cloud_ss, *frame_ss = ss.spawn(len(frames) + 1)
    cloud, labels = build_cloud(plant, noise, np.random.default_rng(cloud_ss))
    drop = set(force_drop)
    p_primary = noise.dropout / (1.0 - noise.secondary_coverage) if noise.dropout > 0 else 0.0
    p_primary = min(p_primary, 1.0)
    dets, truth, imgs = {}, {}, {}
    for frame, fss in zip(frames, frame_ss):
        rng = np.random.default_rng(fss)
        vis = np.flatnonzero(visible_modules(plant, frame))
        ctr, w, h, ang = exact_boxes(plant, frame)
        n = len(vis)
        keep_p = rng.random(n) >= p_primary
        has_s = rng.random(n) < noise.secondary_coverage
        jit_p = rng.normal(0, 1, (n, 2)) * noise.jitter_px
        dim_p = 1.0 + rng.normal(0, 1, (n, 2)) * noise.dim_jitter
        lo, hi = noise.secondary_shift_px
        mag = rng.uniform(lo, hi) if hi > 0 else 0.0
        theta = rng.uniform(0, 2 * np.pi)
        shift = mag * np.array([math.cos(theta), math.sin(theta)])
        jit_s = rng.normal(0, 1, (n, 2)) * math.hypot(noise.jitter_px, noise.secondary_jitter_px)
        dim_s = 1.0 + rng.normal(0, 1, (n, 2)) * noise.dim_jitter
        fdets, ftruth = [], []
        for k, m in enumerate(vis):
            if (frame.frame_id, int(m)) in drop or not keep_p[k]:
                continue
            box = OrientedBox(float(ctr[m, 0] + jit_p[k, 0]), float(ctr[m, 1] + jit_p[k, 1]),
                              float(w[m] * dim_p[k, 0]), float(h[m] * dim_p[k, 1]),
                              wrap_axial(float(ang[m])))
            fdets.append(ModuleDetection(box, "primary", frame.frame_id, len(fdets)))
            ftruth.append(int(m))
        for k, m in enumerate(vis):
            if (frame.frame_id, int(m)) in drop or not has_s[k]:
                continue
            box = OrientedBox(float(ctr[m, 0] + shift[0] + jit_s[k, 0]),
                              float(ctr[m, 1] + shift[1] + jit_s[k, 1]),
                              float(w[m] * dim_s[k, 0]), float(h[m] * dim_s[k, 1]),
                              wrap_axial(float(ang[m])))
            fdets.append(ModuleDetection(box, "secondary", frame.frame_id, len(fdets)))
            ftruth.append(int(m))
        dets[frame.frame_id] = fdets
        truth[frame.frame_id] = ftruth
        if images:
            imgs[frame.frame_id] = render_image(plant, frame)
    return Scene(plant, list(frames), dets, truth, imgs, cloud, labels, noise, seed,
                 camera or CameraParams())


def simulate_preset(name: str = "pp1-desk", seed: int = 0, noise: str | NoiseProfile | None = None,
                    images: bool = True, force_drop=()) -> Scene:
    """Build a complete scene from a named preset."""
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    params, cam, prof = PRESETS[name]
    if isinstance(noise, str):
        if noise not in NOISE_PROFILES:
            raise ValueError(f"unknown noise profile {noise!r}")
        prof = NOISE_PROFILES[noise]
    elif noise is not None:
        prof = noise
    plant = generate_plant(params, seed)
    frames = plan_cameras(plant, cam)
    return render_scene(plant, frames, prof, seed, images, force_drop, cam)


# --------------------------------------------------------------------------
# export


def truth_dict(scene: Scene) -> dict:
    p = scene.plant
    return {
        "plant": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(p.params).items()},
        "pitch": p.params.pitch,
        "across_pitch": p.params.across_pitch,
        "modules": [
            {"truth_id": i, "line": int(t[0]), "bench": int(t[1]), "sector": int(t[2]),
             "row": int(t[3]), "in_row": int(t[4]),
             "position": [float(v) for v in p.positions[i]],
             "normal": [float(v) for v in p.normals[i]]}
            for i, t in enumerate(p.tuples)
        ],
        "detections": {fid: list(ids) for fid, ids in scene.det_truth.items()},
        "cloud_labels": [int(v) for v in scene.cloud_labels],
    }


def pipeline_config_text(scene: Scene) -> str:
    p = scene.plant.params
    return "\n".join([
        "# generated by pvmap simulate",
        "paths.cameras = cameras.json",
        "paths.cloud = cloud.txt",
        "paths.detections = detections.json",
        "paths.images = images" if scene.images else "# paths.images = images",
        "paths.truth = truth.json",
        "paths.output = out",
        f"structure.rows_per_bench = {p.rows_per_bench}",
        f"run.seed = {scene.seed}",
        "",
    ])


def export_scene(scene: Scene, out_dir) -> Path:
    """Write every ingest file plus truth.json and a ready-to-run pipeline.cfg."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_camera_frames(scene.frames, out / "cameras.json")
    write_point_cloud(scene.cloud, out / "cloud.txt")
    write_detections(scene.detections, out / "detections.json")
    if scene.images:
        (out / "images").mkdir(exist_ok=True)
        for fid, img in scene.images.items():
            write_image(img, out / "images" / f"{fid}.ppm")
    dump_json(truth_dict(scene), out / "truth.json")
    (out / "pipeline.cfg").write_text(pipeline_config_text(scene), encoding="utf-8")
    return out


def scene_with(scene: Scene, **changes) -> Scene:
    return replace(scene, **changes)
