"""Plant-model optimisation: pose averaging, 3D row lines, bench axes and respacing."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from pvmap.match_fuse import GlobalModule, GlobalStructure

logger = logging.getLogger(__name__)


class DegeneratePose(ValueError):
    """Observation normals cancel out."""


class DegenerateLine(ValueError):
    """No two distinct points to define a line."""


class ImplausibleBench(ValueError):
    """Row lines of a bench disagree too much in direction."""


@dataclass(frozen=True)
class OptimizeConfig:
    ransac3d_threshold: float = 0.15
    ransac3d_trials: int = 500
    enforce_pitch: float | None = None
    max_row_angle_deg: float = 30.0
    module_size: tuple = (1.65, 1.0)
    seed: int = 0


@dataclass(frozen=True)
class Line3D:
    origin: np.ndarray
    direction: np.ndarray
    inliers: tuple = ()


@dataclass
class BenchAxis:
    p_bench: np.ndarray
    d_bench: np.ndarray
    row_offsets: dict = field(default_factory=dict)
    bench_id: int = -1
    line_id: int = -1

    @property
    def origin(self) -> np.ndarray:
        return self.p_bench

    @property
    def direction(self) -> np.ndarray:
        return self.d_bench


@dataclass
class ModulePose:
    global_id: int
    position: np.ndarray
    normal: np.ndarray
    line_id: int
    bench_id: int
    sector_id: int
    row_index: int
    in_row_index: int
    n_detections: int
    raw_position: np.ndarray | None = None
    raw_normal: np.ndarray | None = None
    observations: list = field(default_factory=list)  # (frame_id, detection index)

    @property
    def tuple(self) -> tuple:
        return (self.line_id, self.bench_id, self.sector_id, self.row_index, self.in_row_index)


@dataclass
class PlantModel:
    modules: list[ModulePose] = field(default_factory=list)
    benches: list[BenchAxis] = field(default_factory=list)
    geo_origin: tuple = (0.0, 0.0, 0.0)
    module_size: tuple = (1.65, 1.0)
    flags: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.modules)

    def positions(self, raw: bool = False) -> np.ndarray:
        if not self.modules:
            return np.empty((0, 3))
        return np.array([m.raw_position if raw else m.position for m in self.modules], dtype=float)

    def to_dict(self) -> dict:
        def vec(v):
            return None if v is None else [float(x) for x in v]

        return {
            "geo_origin": {"lat": self.geo_origin[0], "lon": self.geo_origin[1],
                           "alt": self.geo_origin[2]},
            "module_size": [float(x) for x in self.module_size],
            "modules": [{
                "global_id": m.global_id, "line_id": m.line_id, "bench_id": m.bench_id,
                "sector_id": m.sector_id, "row_index": m.row_index,
                "in_row_index": m.in_row_index, "position": vec(m.position),
                "normal": vec(m.normal), "n_detections": m.n_detections,
                "raw_position": vec(m.raw_position), "raw_normal": vec(m.raw_normal),
                "observations": [[f, int(i)] for f, i in m.observations],
            } for m in self.modules],
            "benches": [{
                "bench_id": b.bench_id, "line_id": b.line_id, "origin": vec(b.p_bench),
                "direction": vec(b.d_bench),
                "row_offsets": [[int(r), vec(o)] for r, o in sorted(b.row_offsets.items())],
            } for b in self.benches],
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d) -> "PlantModel":
        def arr(v):
            return None if v is None else np.array(v, dtype=float)

        geo = d.get("geo_origin", {"lat": 0.0, "lon": 0.0, "alt": 0.0})
        if isinstance(geo, dict):
            geo = (geo["lat"], geo["lon"], geo["alt"])
        modules = [ModulePose(
            int(m["global_id"]), arr(m["position"]), arr(m["normal"]), int(m["line_id"]),
            int(m["bench_id"]), int(m["sector_id"]), int(m["row_index"]),
            int(m["in_row_index"]), int(m.get("n_detections", 0)), arr(m.get("raw_position")),
            arr(m.get("raw_normal")), [(f, int(i)) for f, i in m.get("observations", [])])
            for m in d.get("modules", [])]
        benches = [BenchAxis(arr(b["origin"]), arr(b["direction"]),
                             {int(r): arr(o) for r, o in b.get("row_offsets", [])},
                             int(b.get("bench_id", -1)), int(b.get("line_id", -1)))
                   for b in d.get("benches", [])]
        return cls(modules, benches, tuple(float(v) for v in geo),
                   tuple(float(v) for v in d.get("module_size", (1.65, 1.0))),
                   list(d.get("flags", [])))


# --------------------------------------------------------------------------
# operations


def average_module_pose(m: GlobalModule) -> tuple[np.ndarray, np.ndarray]:
    """Mean position and normalised mean normal over a module's observations."""
    if not m.observations:
        raise ValueError(f"module {m.global_id} has no observations")
    pos = np.mean([o[2].position for o in m.observations], axis=0)
    nrm = np.mean([o[2].normal for o in m.observations], axis=0)
    norm = np.linalg.norm(nrm)
    if norm == 0:
        raise DegeneratePose(f"module {m.global_id}: observation normals cancel")
    return pos, nrm / norm


def _orient(d: np.ndarray) -> np.ndarray:
    """Sign convention: positive x, ties broken by positive y."""
    if d[0] < 0 or (d[0] == 0 and (d[1] < 0 or (d[1] == 0 and d[2] < 0))):
        return -d
    return d


def _line_residuals(points: np.ndarray, origin: np.ndarray, direction: np.ndarray) -> np.ndarray:
    rel = points - origin
    along = rel @ direction
    return np.linalg.norm(rel - along[:, None] * direction, axis=1)


def _principal(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - c, full_matrices=False)
    return c, _orient(vt[0])


def fit_row_line_3d(positions, seed=0, residual_threshold: float = 0.15,
                    trials: int = 500) -> Line3D:
    """RANSAC line through 3D positions, refined by PCA over the inliers.

    Args:
        positions: (n, 3) points, n >= 2.
        seed: RNG seed (anything ``numpy.random.default_rng`` accepts).
        residual_threshold: inlier distance in meters.
        trials: number of random point pairs.

    Raises:
        DegenerateLine: when every point coincides.
    """
    pts = np.asarray(positions, dtype=float).reshape(-1, 3)
    n = len(pts)
    if n < 2:
        raise DegenerateLine("need at least two positions")
    if n == 2:
        d = pts[1] - pts[0]
        norm = np.linalg.norm(d)
        if norm == 0:
            raise DegenerateLine("coincident points")
        return Line3D(pts.mean(axis=0), _orient(d / norm), (0, 1))
    rng = np.random.default_rng(seed)
    i = rng.integers(0, n, trials)
    j = rng.integers(0, n - 1, trials)
    j = j + (j >= i)
    d = pts[j] - pts[i]
    norm = np.linalg.norm(d, axis=1)
    ok = norm > 0
    if not ok.any():
        raise DegenerateLine("all sampled pairs coincide")
    d = d[ok] / norm[ok, None]
    a = pts[i[ok]]
    # residuals of every point to every candidate: (trials, n)
    rel = pts[None, :, :] - a[:, None, :]
    along = np.einsum("tnk,tk->tn", rel, d)
    res = np.linalg.norm(rel - along[..., None] * d[:, None, :], axis=2)
    counts = (res <= residual_threshold).sum(axis=1)
    best = int(np.argmax(counts))
    inl = np.flatnonzero(res[best] <= residual_threshold)
    if len(inl) < 2:
        inl = np.arange(n)
    origin, direction = _principal(pts[inl])
    return Line3D(origin, direction, tuple(int(k) for k in inl))


def bench_axis(row_lines: list[Line3D], max_angle_deg: float = 30.0,
               row_ids=None) -> BenchAxis:
    """Average the row lines of a bench into its main axis.

    Args:
        row_lines: one line per row.
        max_angle_deg: largest tolerated angle between a row and the first row.
        row_ids: keys for ``row_offsets``; defaults to 0..n-1.

    Raises:
        ImplausibleBench: when a row deviates more than ``max_angle_deg``.
    """
    if not row_lines:
        raise ValueError("bench has no row lines")
    ref = row_lines[0].direction
    dirs, cos_max = [], np.cos(np.radians(max_angle_deg))
    for ln in row_lines:
        dd = ln.direction if ln.direction @ ref >= 0 else -ln.direction
        if dd @ ref < cos_max:
            raise ImplausibleBench(f"row direction deviates {np.degrees(np.arccos(np.clip(dd @ ref, -1, 1))):.1f} deg")
        dirs.append(dd)
    d = np.mean(dirs, axis=0)
    d = d / np.linalg.norm(d)
    p = np.mean([ln.origin for ln in row_lines], axis=0)
    ids = list(range(len(row_lines))) if row_ids is None else list(row_ids)
    offsets = {}
    for rid, ln in zip(ids, row_lines):
        off = ln.origin - p
        offsets[rid] = off - (off @ d) * d
    return BenchAxis(p, d, offsets)


def project_onto_axis(p, axis: BenchAxis) -> np.ndarray:
    """Orthogonal projection of a point onto the bench axis."""
    p = np.asarray(p, dtype=float)
    return axis.p_bench + ((p - axis.p_bench) @ axis.d_bench) * axis.d_bench


def respace_row(positions, axis: BenchAxis, in_row=None, enforce_pitch: float | None = None):
    """Reposition a row at uniform intervals along the bench axis.

    Positions are ordered by in-row index. With indices that skip (an
    unconfirmed module inside the row) the interval is measured per index step.

    Args:
        positions: (n, 3) module positions ordered along the row.
        axis: bench axis.
        in_row: in-row indices; defaults to 0..n-1.
        enforce_pitch: fixed spacing in meters, centred on the row's mean
            axis parameter; None keeps the end modules in place.

    Returns:
        (new positions (n, 3), row offset vector).
    """
    pts = np.asarray(positions, dtype=float).reshape(-1, 3)
    n = len(pts)
    idx = np.arange(n, dtype=float) if in_row is None else np.asarray(in_row, dtype=float)
    proj = np.array([project_onto_axis(p, axis) for p in pts])
    offset = (pts - proj).mean(axis=0)
    t = (pts - axis.p_bench) @ axis.d_bench
    if n == 1:
        return (axis.p_bench + t[0] * axis.d_bench + offset)[None, :], offset
    steps = idx - idx[0]
    if enforce_pitch is not None:
        t_new = t.mean() + (steps - steps.mean()) * enforce_pitch
    else:
        delta = (t[-1] - t[0]) / steps[-1]
        t_new = t[0] + steps * delta
    return axis.p_bench + t_new[:, None] * axis.d_bench + offset, offset


def build_plant_model(gs: GlobalStructure, cfg: OptimizeConfig = OptimizeConfig(),
                      geo_origin=(0.0, 0.0, 0.0)) -> PlantModel:
    """Average, fit and respace every bench of a fused structure."""
    model = PlantModel(geo_origin=tuple(geo_origin), module_size=tuple(cfg.module_size))
    poses = []
    for m in gs.modules:
        try:
            pos, nrm = average_module_pose(m)
        except DegeneratePose as exc:
            model.flags.append(str(exc))
            pos = np.mean([o[2].position for o in m.observations], axis=0)
            nrm = np.array([0.0, 0.0, 1.0])
        poses.append(ModulePose(m.global_id, pos.copy(), nrm.copy(), m.line_id, m.bench_id,
                                m.sector_id, m.row_index, m.in_row_index, len(m.observations),
                                pos, nrm, [(f, i) for f, i, _ in m.observations]))
    benches: dict[int, dict[int, list[ModulePose]]] = {}
    for p in poses:
        benches.setdefault(p.bench_id, {}).setdefault(p.row_index, []).append(p)
    for bid in sorted(benches):
        rows = {r: sorted(ms, key=lambda x: x.in_row_index) for r, ms in benches[bid].items()}
        try:
            axis = _optimize_bench(bid, rows, cfg)
        except (DegenerateLine, ImplausibleBench) as exc:
            model.flags.append(f"bench {bid}: {exc}; poses left unoptimised")
            logger.warning(model.flags[-1])
            continue
        axis.line_id = rows[min(rows)][0].line_id
        model.benches.append(axis)
    model.modules = sorted(poses, key=lambda p: p.global_id)
    return model


def _optimize_bench(bid: int, rows: dict, cfg: OptimizeConfig) -> BenchAxis:
    lines, ids = [], []
    for r in sorted(rows):
        if len(rows[r]) < 2:
            continue
        pts = np.array([m.raw_position for m in rows[r]])
        lines.append(fit_row_line_3d(pts, [cfg.seed, bid, r], cfg.ransac3d_threshold,
                                     cfg.ransac3d_trials))
        ids.append(r)
    if not lines:
        raise DegenerateLine("no row with two modules")
    axis = bench_axis(lines, cfg.max_row_angle_deg, ids)
    axis.bench_id = bid
    for r in sorted(rows):
        ms = rows[r]
        pts = np.array([m.raw_position for m in ms])
        new, _ = respace_row(pts, axis, [m.in_row_index for m in ms], cfg.enforce_pitch)
        nrm = np.mean([m.raw_normal for m in ms], axis=0)
        nrm = nrm / np.linalg.norm(nrm)
        for m, p in zip(ms, new):
            m.position = p
            m.normal = nrm.copy()
    return axis
