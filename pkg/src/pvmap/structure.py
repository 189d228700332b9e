"""Per-image layout inference: rows, benches, bench-gap keypoints, hypotheses, sectors.

Pixel coordinates have x to the right and y down. Rows are oriented left to
right, and with north-up imagery benches are ordered top to bottom, which is
north to south.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from pvmap.detect_fuse import ModuleDetection, OrientedBox
from pvmap.geometry import clip_line_to_rect, point_line_distance
from pvmap.scene_io import AddKeypoint, AddModule, DeleteKeypoint, DeleteModule, ImageRaster

logger = logging.getLogger(__name__)

EDGE = None  # sector bound marker for image edge / row end


@dataclass(frozen=True)
class StructureConfig:
    rows_per_bench: int
    th: float = 0.1
    n_max: int = 8
    min_inliers: int = 4
    ransac_trials: int = 500
    ransac_threshold: float = 0.25  # fraction of representative box height
    coincidence: float = 2.0  # Hausdorff limit in representative heights
    darkness_ratio: float = 0.7
    north_up: bool = True


def _nan_to_none(v):
    return None if v is None or math.isnan(v) else float(v)


def _none_to_nan(v):
    return math.nan if v is None else float(v)


@dataclass
class RowLine:
    frame_id: str
    point: np.ndarray
    direction: np.ndarray
    inliers: list[int]
    d_med: float = math.nan
    bench_position: int = -1

    def param(self, p) -> float:
        return float(np.dot(np.asarray(p, dtype=float) - self.point, self.direction))


@dataclass
class Bench2D:
    rows: list[RowLine]
    valid: bool


@dataclass
class GapKeypoint:
    row: int
    left_module: int
    right_module: int
    midpoint: np.ndarray
    kind: str = "bench_gap"
    origin: str = "auto"


@dataclass
class Hypothesis:
    row: int
    after: int  # detection index of the left neighbour
    slot: int  # 1-based position inside the gap
    center: np.ndarray


@dataclass
class Sector:
    row: int
    modules: list[tuple[str, int]]  # ("det", detection_index) or ("hyp", hypothesis index)
    left_bound: int | None
    right_bound: int | None


@dataclass
class ImageStructure:
    frame_id: str
    width: int
    height: int
    benches: list[Bench2D] = field(default_factory=list)
    keypoints: list[GapKeypoint] = field(default_factory=list)
    sectors: list[Sector] = field(default_factory=list)
    hypothesized: list[Hypothesis] = field(default_factory=list)
    d_med: float = math.nan
    rep_box: OrientedBox | None = None
    centers: dict[int, np.ndarray] = field(default_factory=dict)
    sources: dict[int, str] = field(default_factory=dict)

    @property
    def rows(self) -> list[RowLine]:
        """Rows of valid benches, flat, in bench order."""
        return [r for b in self.benches if b.valid for r in b.rows]

    def entry_center(self, entry) -> np.ndarray:
        kind, idx = entry
        return self.centers[idx] if kind == "det" else self.hypothesized[idx].center

    # -- serialisation ----------------------------------------------------
    def to_dict(self) -> dict:
        def row_d(r):
            return {"point": r.point.tolist(), "direction": r.direction.tolist(),
                    "inliers": list(r.inliers), "d_med": _nan_to_none(r.d_med),
                    "bench_position": r.bench_position}

        rb = self.rep_box
        return {
            "frame_id": self.frame_id, "width": self.width, "height": self.height,
            "d_med": _nan_to_none(self.d_med),
            "rep_box": None if rb is None else [rb.w, rb.h, rb.angle],
            "benches": [{"valid": b.valid, "rows": [row_d(r) for r in b.rows]}
                        for b in self.benches],
            "keypoints": [{"row": k.row, "left": k.left_module, "right": k.right_module,
                           "midpoint": k.midpoint.tolist(), "kind": k.kind, "origin": k.origin}
                          for k in self.keypoints],
            "hypothesized": [{"row": h.row, "after": h.after, "slot": h.slot,
                              "center": h.center.tolist()} for h in self.hypothesized],
            "sectors": [{"row": s.row, "modules": [list(e) for e in s.modules],
                         "left": s.left_bound, "right": s.right_bound} for s in self.sectors],
            "detections": [{"index": i, "center": c.tolist(), "source": self.sources[i]}
                           for i, c in sorted(self.centers.items())],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ImageStructure":
        def row_o(r):
            return RowLine(d["frame_id"], np.array(r["point"]), np.array(r["direction"]),
                           list(r["inliers"]), _none_to_nan(r["d_med"]), r["bench_position"])

        rb = d.get("rep_box")
        s = cls(d["frame_id"], d["width"], d["height"], d_med=_none_to_nan(d["d_med"]),
                rep_box=None if rb is None else OrientedBox(0.0, 0.0, *rb))
        s.benches = [Bench2D([row_o(r) for r in b["rows"]], b["valid"]) for b in d["benches"]]
        s.keypoints = [GapKeypoint(k["row"], k["left"], k["right"], np.array(k["midpoint"]),
                                   k["kind"], k["origin"]) for k in d["keypoints"]]
        s.hypothesized = [Hypothesis(h["row"], h["after"], h["slot"], np.array(h["center"]))
                          for h in d["hypothesized"]]
        s.sectors = [Sector(x["row"], [tuple(e) for e in x["modules"]], x["left"], x["right"])
                     for x in d["sectors"]]
        s.centers = {e["index"]: np.array(e["center"]) for e in d["detections"]}
        s.sources = {e["index"]: e["source"] for e in d["detections"]}
        return s


# --------------------------------------------------------------------------
# rows


def _orient(direction) -> np.ndarray:
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    if d[0] < 0 or (d[0] == 0 and d[1] < 0):
        d = -d
    return d


def _tls_line(pts: np.ndarray):
    c = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - c, full_matrices=False)
    return c, _orient(vt[0])


def fit_rows_ransac(centers, rep: OrientedBox, seed: int = 0, trials: int = 500,
                    min_inliers: int = 4, threshold_frac: float = 0.25,
                    indices=None, frame_id: str = "") -> list[RowLine]:
    """Sequential RANSAC: extract lines until the best one has too few inliers.

    Args:
        centers: (n, 2) pixel centers.
        rep: representative box; the residual threshold is ``threshold_frac * rep.h``.
        seed: PRNG seed; results are deterministic given it.
        indices: labels for the centers (detection indices); defaults to 0..n-1.

    Returns:
        Rows with inliers sorted by their parameter along the (left-to-right) direction.
    """
    pts = np.asarray(centers, dtype=float).reshape(-1, 2)
    labels = np.arange(len(pts)) if indices is None else np.asarray(indices)
    thr = threshold_frac * rep.h
    rng = np.random.default_rng(seed)
    remaining = np.arange(len(pts))
    rows = []
    while len(remaining) >= max(min_inliers, 2):
        P = pts[remaining]
        i = rng.integers(0, len(P), trials)
        j = rng.integers(0, len(P) - 1, trials)
        j = j + (j >= i)  # distinct second sample
        d = P[j] - P[i]
        nrm = np.hypot(d[:, 0], d[:, 1])
        ok = nrm > 0
        n = np.zeros_like(d)
        n[ok, 0] = -d[ok, 1] / nrm[ok]
        n[ok, 1] = d[ok, 0] / nrm[ok]
        res = np.abs((P[None, :, 0] - P[i, 0][:, None]) * n[:, 0][:, None]
                     + (P[None, :, 1] - P[i, 1][:, None]) * n[:, 1][:, None])
        counts = np.where(ok, (res <= thr).sum(axis=1), 0)
        best = int(np.argmax(counts))
        if counts[best] < min_inliers:
            break
        mask = res[best] <= thr
        c, u = _tls_line(P[mask])
        resid = np.abs((P[:, 0] - c[0]) * u[1] - (P[:, 1] - c[1]) * u[0])
        mask = resid <= thr
        if mask.sum() < min_inliers:
            break
        c, u = _tls_line(P[mask])
        members = remaining[mask]
        t = (pts[members] - c) @ u
        order = np.lexsort((labels[members], t))
        rows.append(RowLine(frame_id, c, u, [int(labels[m]) for m in members[order]]))
        remaining = remaining[~mask]
    return rows


def hausdorff_line_distance(L: RowLine, K: RowLine, width: float, height: float) -> float:
    """Max of the four border-point-to-line distances between two image lines."""
    bl = clip_line_to_rect(L.point, L.direction, width, height)
    bk = clip_line_to_rect(K.point, K.direction, width, height)
    if bl is None or bk is None:
        raise ValueError("line does not cross the image rectangle")
    return max(point_line_distance(bl[0], K.point, K.direction),
               point_line_distance(bl[1], K.point, K.direction),
               point_line_distance(bk[0], L.point, L.direction),
               point_line_distance(bk[1], L.point, L.direction))


def _mean_y(row: RowLine, centers) -> float:
    return float(np.mean([centers[i][1] for i in row.inliers]))


def group_rows_into_benches(rows, rep: OrientedBox, width, height, rows_per_bench: int,
                            centers, coincidence: float = 2.0,
                            north_up: bool = True) -> list[Bench2D]:
    """Connected components of rows under ``H <= coincidence * rep.h``."""
    n = len(rows)
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    limit = coincidence * rep.h
    for a in range(n):
        for b in range(a + 1, n):
            try:
                h = hausdorff_line_distance(rows[a], rows[b], width, height)
            except ValueError:
                continue
            if h <= limit:
                ra, rb = find(a), find(b)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
    comps: dict[int, list[RowLine]] = {}
    for i in range(n):
        comps.setdefault(find(i), []).append(rows[i])
    sign = 1.0 if north_up else -1.0
    benches = []
    for members in comps.values():
        members.sort(key=lambda r: sign * _mean_y(r, centers))
        valid = len(members) == rows_per_bench
        if valid:
            for pos, r in enumerate(members):
                r.bench_position = pos
        benches.append(Bench2D(members, valid))
    benches.sort(key=lambda b: sign * float(np.mean([_mean_y(r, centers) for r in b.rows])))
    return benches


# --------------------------------------------------------------------------
# gaps and hypotheses


def row_distances(row: RowLine, centers) -> np.ndarray:
    pts = np.array([centers[i] for i in row.inliers], dtype=float)
    return np.hypot(*np.diff(pts, axis=0).T) if len(pts) > 1 else np.empty(0)


def row_spacing(d: np.ndarray, th: float = 0.1, fallback: float | None = None) -> float:
    """Median module spacing of a row.

    A row cut by the image border can hold more gaps than ordinary spacings, and
    then its median is meaningless. When fewer than half of the spacings lie
    within ``th`` of the median, ``fallback`` (the frame spacing) is used instead.
    """
    if len(d) == 0:
        return math.nan if fallback is None else float(fallback)
    med = float(np.median(d))
    if fallback is None or math.isnan(fallback):
        return med
    support = int(np.count_nonzero(np.abs(d / med - 1.0) <= th))
    return med if 2 * support >= len(d) and len(d) >= 2 else float(fallback)


def find_gap_candidates(row: RowLine, centers, th: float = 0.1, row_ref: int = -1,
                        fallback: float | None = None):
    """Consecutive pairs whose spacing falls in the bench-gap band.

    Sets ``row.d_med`` as a side effect (see ``row_spacing``).
    """
    d = row_distances(row, centers)
    row.d_med = row_spacing(d, th, fallback)
    if len(d) < 1 or math.isnan(row.d_med):
        return []
    lo, hi = (1 + th) * row.d_med, 2 * (1 - th) * row.d_med
    out = []
    for k, dij in enumerate(d):
        if lo < dij < hi:
            a, b = row.inliers[k], row.inliers[k + 1]
            mid = 0.5 * (np.asarray(centers[a]) + np.asarray(centers[b]))
            out.append(GapKeypoint(row_ref, a, b, mid))
    return out


def missing_count(dij: float, d_med: float, th: float = 0.1, n_max: int = 8) -> int:
    """Number of missing detections explaining a spacing, or 0 when none fits.

    Where neighbouring bands overlap the count closest to ``dij / d_med - 1`` wins.
    """
    fits = [n for n in range(1, n_max + 1)
            if (1 - th) * d_med * (n + 1) < dij < (1 + th) * d_med * (n + 1)]
    if not fits:
        return 0
    est = dij / d_med - 1
    return min(fits, key=lambda n: (abs(n - est), n))


def hypothesize_missing(row: RowLine, centers, d_med: float, th: float = 0.1, n_max: int = 8,
                        skip_pairs=(), row_ref: int = -1) -> list[Hypothesis]:
    """Evenly spaced hypothesised centers in gaps that fit a whole number of modules."""
    skip = set(skip_pairs)
    out = []
    for a, b in zip(row.inliers[:-1], row.inliers[1:]):
        if (a, b) in skip:
            continue
        ca, cb = np.asarray(centers[a], dtype=float), np.asarray(centers[b], dtype=float)
        n = missing_count(float(np.hypot(*(cb - ca))), d_med, th, n_max)
        for k in range(1, n + 1):
            out.append(Hypothesis(row_ref, a, k, ca + (k / (n + 1)) * (cb - ca)))
    return out


def _support(box: OrientedBox, u) -> float:
    """Half-extent of a box along unit direction ``u``."""
    c, s = math.cos(box.angle), math.sin(box.angle)
    return 0.5 * box.w * abs(u[0] * c + u[1] * s) + 0.5 * box.h * abs(-u[0] * s + u[1] * c)


def transition_patch(box_a: OrientedBox, box_b: OrientedBox, rep: OrientedBox):
    """Oriented rectangle between the facing edges of two neighbouring boxes.

    Returns:
        (center, unit axis, half length, half height).
    """
    ca, cb = box_a.center, box_b.center
    d = cb - ca
    dist = float(np.hypot(*d))
    u = d / dist
    t0 = _support(box_a, u)
    t1 = dist - _support(box_b, u)
    mid = 0.5 * (t0 + t1)
    half = max(0.5 * (t1 - t0), 0.25 * rep.w)
    return ca + mid * u, u, half, 0.25 * rep.h


def patch_luminance(image: ImageRaster, center, u, half_len: float, half_h: float):
    """Mean luminance of pixels whose centers fall inside the patch; None if it leaves the raster."""
    v = np.array([-u[1], u[0]])
    corners = np.array([center + sa * half_len * u + sb * half_h * v
                        for sa in (-1, 1) for sb in (-1, 1)])
    if (corners[:, 0].min() < 0 or corners[:, 1].min() < 0
            or corners[:, 0].max() > image.width or corners[:, 1].max() > image.height):
        return None
    x0, x1 = int(math.floor(corners[:, 0].min())), int(math.ceil(corners[:, 0].max()))
    y0, y1 = int(math.floor(corners[:, 1].min())), int(math.ceil(corners[:, 1].max()))
    xs = np.arange(x0, x1) + 0.5
    ys = np.arange(y0, y1) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    rx, ry = gx - center[0], gy - center[1]
    inside = (np.abs(rx * u[0] + ry * u[1]) <= half_len) & (np.abs(rx * v[0] + ry * v[1]) <= half_h)
    if not inside.any():
        return None
    pix = image.pixels[y0:y1, x0:x1].astype(float)
    lum = 0.299 * pix[..., 0] + 0.587 * pix[..., 1] + 0.114 * pix[..., 2]
    return float(lum[inside].mean())


def classify_gap(candidate: GapKeypoint, image: ImageRaster | None, row: RowLine,
                 boxes: dict, rep: OrientedBox, darkness_ratio: float = 0.7,
                 candidate_pairs=(), th: float = 0.1) -> str:
    """Label a gap candidate ``bench_gap`` or ``rejected`` from transition-patch darkness.

    Without an image every candidate is a bench gap. References are the row's
    ordinary transitions (spacing at most ``(1 + th) * d_med``).
    """
    if image is None:
        return "bench_gap"
    patch = transition_patch(boxes[candidate.left_module], boxes[candidate.right_module], rep)
    lum = patch_luminance(image, *patch)
    if lum is None:
        logger.warning("frame %s: gap patch outside raster, candidate rejected", row.frame_id)
        return "rejected"
    skip = set(candidate_pairs)
    refs = []
    for a, b in zip(row.inliers[:-1], row.inliers[1:]):
        if (a, b) in skip:
            continue
        if np.hypot(*(boxes[b].center - boxes[a].center)) > (1 + th) * row.d_med:
            continue
        ref = patch_luminance(image, *transition_patch(boxes[a], boxes[b], rep))
        if ref is not None:
            refs.append(ref)
    if not refs:
        logger.debug("frame %s: no reference transitions, distance-only gap", row.frame_id)
        return "bench_gap"
    return "bench_gap" if lum < darkness_ratio * float(np.median(refs)) else "rejected"


# --------------------------------------------------------------------------
# sectors and composition


def build_sectors(s: ImageStructure) -> None:
    """(Re)build sectors from rows, bench-gap keypoints and hypotheses."""
    s.sectors = []
    hyp_after: dict[tuple[int, int], list[int]] = {}
    for h_idx, h in enumerate(s.hypothesized):
        hyp_after.setdefault((h.row, h.after), []).append(h_idx)
    gaps = {(k.row, k.left_module): k_idx for k_idx, k in enumerate(s.keypoints)
            if k.kind == "bench_gap"}
    for r_idx, row in enumerate(s.rows):
        current: list[tuple[str, int]] = []
        left = EDGE
        for det in row.inliers:
            current.append(("det", det))
            k_idx = gaps.get((r_idx, det))
            if k_idx is not None:
                s.sectors.append(Sector(r_idx, current, left, k_idx))
                current, left = [], k_idx
                continue
            hyps = sorted(hyp_after.get((r_idx, det), []), key=lambda i: s.hypothesized[i].slot)
            current.extend(("hyp", i) for i in hyps)
        if current:
            s.sectors.append(Sector(r_idx, current, left, EDGE))


def build_structure(frame_id: str, dets: list[ModuleDetection], rep: OrientedBox | None,
                    width: int, height: int, cfg: StructureConfig,
                    image: ImageRaster | None = None, seed: int = 0) -> ImageStructure:
    """Infer the full in-image structure of one frame."""
    s = ImageStructure(frame_id, width, height, rep_box=rep)
    s.centers = {d.detection_index: d.box.center for d in dets}
    s.sources = {d.detection_index: d.source for d in dets}
    if not dets or rep is None:
        return s
    boxes = {d.detection_index: d.box for d in dets}
    idx = [d.detection_index for d in dets]
    pts = np.array([s.centers[i] for i in idx])
    rows = fit_rows_ransac(pts, rep, seed, cfg.ransac_trials, cfg.min_inliers,
                           cfg.ransac_threshold, indices=idx, frame_id=frame_id)
    s.benches = group_rows_into_benches(rows, rep, width, height, cfg.rows_per_bench,
                                        s.centers, cfg.coincidence, cfg.north_up)
    dmeds = []
    pooled = [row_distances(row, s.centers) for row in s.rows]
    pooled = np.concatenate(pooled) if pooled else np.empty(0)
    frame_spacing = float(np.median(pooled)) if len(pooled) else math.nan
    for r_idx, row in enumerate(s.rows):
        cands = find_gap_candidates(row, s.centers, cfg.th, r_idx, frame_spacing)
        if math.isnan(row.d_med):
            continue
        dmeds.append(row.d_med)
        pairs = [(c.left_module, c.right_module) for c in cands]
        for c in cands:
            c.kind = classify_gap(c, image, row, boxes, rep, cfg.darkness_ratio, pairs, cfg.th)
        s.keypoints.extend(cands)
        s.hypothesized.extend(hypothesize_missing(row, s.centers, row.d_med, cfg.th, cfg.n_max,
                                                  pairs, r_idx))
    s.d_med = float(np.median(dmeds)) if dmeds else math.nan
    build_sectors(s)
    return s


# --------------------------------------------------------------------------
# manual corrections


def apply_corrections(structures: dict[str, ImageStructure], edits) -> None:
    """Apply manual edits in order; sectors of touched frames are rebuilt.

    Row indices count over the rows of valid benches; keypoint indices index
    the frame's keypoint list; in-row indices index the row's detections.
    """
    touched = set()
    for e in edits:
        s = structures.get(e.frame_id)
        if s is None:
            raise ValueError(f"correction references unknown frame {e.frame_id}")
        rows = s.rows
        if isinstance(e, AddKeypoint):
            row = _row(rows, e.row_index, e)
            k = e.after_in_row_index
            if not 0 <= k < len(row.inliers) - 1:
                raise IndexError(f"{e}: in-row index out of range")
            a, b = row.inliers[k], row.inliers[k + 1]
            s.hypothesized = [h for h in s.hypothesized if not (h.row == e.row_index and h.after == a)]
            s.keypoints.append(GapKeypoint(e.row_index, a, b, 0.5 * (s.centers[a] + s.centers[b]),
                                           "bench_gap", "manual"))
        elif isinstance(e, DeleteKeypoint):
            if not 0 <= e.keypoint_index < len(s.keypoints):
                raise IndexError(f"{e}: keypoint index out of range")
            s.keypoints[e.keypoint_index].kind = "rejected"
        elif isinstance(e, AddModule):
            row = _row(rows, e.row_index, e)
            new = max(s.centers, default=-1) + 1
            c = np.asarray(e.center, dtype=float)
            s.centers[new] = c
            s.sources[new] = "manual"
            t = row.param(c)
            ts = [row.param(s.centers[i]) for i in row.inliers]
            pos = int(np.searchsorted(ts, t))
            row.inliers.insert(pos, new)
            near = 0.5 * (row.d_med if not math.isnan(row.d_med) else s.d_med)
            s.hypothesized = [h for h in s.hypothesized
                              if not (h.row == e.row_index and np.hypot(*(h.center - c)) < near)]
            _reanchor(s, e.row_index, row)
        elif isinstance(e, DeleteModule):
            if e.detection_index not in s.centers:
                raise IndexError(f"{e}: detection index not present")
            for r_idx, row in enumerate(rows):
                if e.detection_index in row.inliers:
                    row.inliers.remove(e.detection_index)
                    s.keypoints = [k for k in s.keypoints if not (
                        k.row == r_idx and e.detection_index in (k.left_module, k.right_module))]
                    _reanchor(s, r_idx, row)
            del s.centers[e.detection_index]
            del s.sources[e.detection_index]
        else:  # pragma: no cover - loader guarantees the type
            raise TypeError(f"unknown correction {e!r}")
        logger.info("applied correction %s", e)
        touched.add(e.frame_id)
    for fid in touched:
        build_sectors(structures[fid])


def _row(rows, i, e):
    if not 0 <= i < len(rows):
        raise IndexError(f"{e}: row index out of range")
    return rows[i]


def _reanchor(s: ImageStructure, r_idx: int, row: RowLine) -> None:
    """Keep keypoints and hypotheses attached to consecutive neighbours after an edit."""
    pos = {det: k for k, det in enumerate(row.inliers)}
    keep = []
    for k in s.keypoints:
        if k.row != r_idx:
            keep.append(k)
        elif pos.get(k.right_module, -1) == pos.get(k.left_module, -9) + 1:
            keep.append(k)
    s.keypoints = keep
    fixed = []
    for h in s.hypothesized:
        if h.row == r_idx and h.after in pos:
            # attach to the detection directly preceding the hypothesis
            t = row.param(h.center)
            prev = [d for d in row.inliers if row.param(s.centers[d]) < t]
            if not prev:
                continue
            h = Hypothesis(h.row, prev[-1], h.slot, h.center)
        elif h.row == r_idx:
            continue
        fixed.append(h)
    s.hypothesized = fixed
