"""Cross-image fusion: keypoint groups, global row lines, sector groups, repair, module IDs.

Terminology used in this module:

* A *row chain* (``GlobalLine``) is one physical row continued across all the
  benches of a plant line. Rows of different frames that share a bench-gap
  keypoint group belong to the same chain.
* A *sector group* is one physical bench row: the same run of modules between
  two bench gaps as seen from several frames.
* Plant lines and benches of the final model are derived from the chains and
  sector groups through the unrefined keypoint clusters, which join the gap
  keypoints of all rows of a bench.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from pvmap.lift3d import LiftedStructure, SurfaceSample
from pvmap.structure import ImageStructure

logger = logging.getLogger(__name__)


class StructuralConflict(RuntimeError):
    """Two rows of one frame were assigned to the same global line."""


@dataclass(frozen=True)
class MatchConfig:
    dist_threshold: float = 1.5
    th: float = 0.1
    max_repair_rounds: int = 10


# --------------------------------------------------------------------------
# data types


@dataclass
class KeypointObs:
    """One lifted bench-gap keypoint; ``key`` is the keypoint index or a synthetic tag."""

    frame_id: str
    key: object
    position: np.ndarray
    row: int
    row_position: int


@dataclass
class KeypointGroup:
    group_id: int
    members: list[tuple[str, object]]
    centroid: np.ndarray
    row_position: int
    cluster: int = -1


@dataclass
class GlobalLine:
    line_id: int
    rows: list[tuple[str, int]]
    row_position: int = -1


@dataclass
class WorkSector:
    """A sector being matched; bounds are (frame_id, keypoint key) or None for an edge."""

    frame_id: str
    row: int
    entries: list[tuple[str, int]]
    left: tuple | None
    right: tuple | None
    source: int

    @property
    def ref(self) -> tuple:
        return (self.frame_id, self.row, self.source, self.entries[0], self.entries[-1])

    @property
    def closed(self) -> bool:
        return self.left is not None and self.right is not None


@dataclass
class SectorGroup:
    sector_group_id: int
    members: list[WorkSector]
    left_kg: int | None = None
    right_kg: int | None = None
    module_count: int = 0
    line: int = -1
    violations: list[str] = field(default_factory=list)
    flagged: bool = False
    count_hint: int | None = None


@dataclass
class GlobalModule:
    global_id: int
    line_id: int
    bench_id: int
    sector_id: int
    row_index: int
    in_row_index: int
    observations: list[tuple[str, int, SurfaceSample]]
    hypothesis_only: bool = False


@dataclass
class GlobalStructure:
    keypoint_groups: list[KeypointGroup] = field(default_factory=list)
    lines: list[GlobalLine] = field(default_factory=list)
    sector_groups: list[SectorGroup] = field(default_factory=list)
    modules: list[GlobalModule] = field(default_factory=list)
    chains: dict = field(default_factory=dict)  # row-chain id -> ordered sector group ids
    flags: list[str] = field(default_factory=list)
    repairs: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "keypoint_groups": [
                {"group_id": g.group_id, "members": [[f, k] for f, k in g.members],
                 "centroid": g.centroid.tolist(), "row_position": g.row_position,
                 "cluster": g.cluster} for g in self.keypoint_groups],
            "lines": [{"line_id": ln.line_id, "rows": [list(r) for r in ln.rows],
                       "row_position": ln.row_position} for ln in self.lines],
            "sector_groups": [
                {"sector_group_id": g.sector_group_id, "line": g.line, "left_kg": g.left_kg,
                 "right_kg": g.right_kg, "module_count": g.module_count, "flagged": g.flagged,
                 "violations": list(g.violations), "count_hint": g.count_hint,
                 "members": [{"frame_id": m.frame_id, "row": m.row, "source": m.source,
                              "entries": [list(e) for e in m.entries],
                              "left": None if m.left is None else list(m.left),
                              "right": None if m.right is None else list(m.right)}
                             for m in g.members]} for g in self.sector_groups],
            "chains": [[k, v] for k, v in sorted(self.chains.items())],
            "modules": [
                {"global_id": m.global_id, "line_id": m.line_id, "bench_id": m.bench_id,
                 "sector_id": m.sector_id, "row_index": m.row_index,
                 "in_row_index": m.in_row_index,
                 "observations": [[f, i, s.to_list()] for f, i, s in m.observations]}
                for m in self.modules],
            "flags": list(self.flags),
            "repairs": list(self.repairs),
        }

    @classmethod
    def from_dict(cls, d) -> "GlobalStructure":
        def bound(b):
            return None if b is None else tuple(b)

        gs = cls()
        gs.keypoint_groups = [KeypointGroup(g["group_id"], [tuple(m) for m in g["members"]],
                                            np.array(g["centroid"]), g["row_position"], g["cluster"])
                              for g in d["keypoint_groups"]]
        gs.lines = [GlobalLine(x["line_id"], [tuple(r) for r in x["rows"]], x["row_position"])
                    for x in d["lines"]]
        gs.sector_groups = [
            SectorGroup(g["sector_group_id"],
                        [WorkSector(m["frame_id"], m["row"], [tuple(e) for e in m["entries"]],
                                    bound(m["left"]), bound(m["right"]), m["source"])
                         for m in g["members"]],
                        g["left_kg"], g["right_kg"], g["module_count"], g["line"],
                        list(g["violations"]), g["flagged"], g.get("count_hint"))
            for g in d["sector_groups"]]
        gs.chains = {k: v for k, v in d["chains"]}
        gs.modules = [GlobalModule(m["global_id"], m["line_id"], m["bench_id"], m["sector_id"],
                                   m["row_index"], m["in_row_index"],
                                   [(f, i, SurfaceSample.from_list(s))
                                    for f, i, s in m["observations"]])
                      for m in d["modules"]]
        gs.flags = list(d["flags"])
        gs.repairs = list(d["repairs"])
        return gs


# --------------------------------------------------------------------------
# union-find


class _DSU:
    def __init__(self):
        self.parent: dict = {}

    def add(self, a):
        self.parent.setdefault(a, a)

    def find(self, a):
        self.add(a)
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            lo, hi = (ra, rb) if _sort_key(ra) <= _sort_key(rb) else (rb, ra)
            self.parent[hi] = lo

    def classes_of(self, a) -> list:
        root = self.find(a)
        return [x for x in self.parent if self.find(x) == root]

    def classes(self) -> list[list]:
        out: dict = {}
        for a in sorted(self.parent, key=_sort_key):
            out.setdefault(self.find(a), []).append(a)
        return list(out.values())


def _sort_key(x):
    """Total order over the mixed int/str tuples used as node labels."""
    if isinstance(x, tuple):
        return tuple(_sort_key(v) for v in x)
    if x is None:
        return (0, 0)
    if isinstance(x, (int, np.integer)):
        return (1, int(x))
    return (2, str(x))


# --------------------------------------------------------------------------
# keypoints and lines


def collect_keypoints(structures: dict, lifted: dict) -> list[KeypointObs]:
    """Lifted bench-gap keypoints in lexicographic (frame_id, index) order."""
    out = []
    for fid in sorted(structures):
        s, lf = structures[fid], lifted.get(fid)
        if lf is None:
            continue
        rows = s.rows
        for k_idx, kp in enumerate(s.keypoints):
            if kp.kind != "bench_gap" or k_idx not in lf.keypoints:
                continue
            out.append(KeypointObs(fid, k_idx, lf.keypoints[k_idx].position, kp.row,
                                   rows[kp.row].bench_position))
    return out


def group_keypoints(kps: list[KeypointObs], dist_threshold: float = 1.5) -> list[KeypointGroup]:
    """Single-linkage clusters under 3D distance <= threshold.

    Groups are numbered by their first member in (frame_id, key) order, so the
    result does not depend on the input order.
    """
    order = sorted(range(len(kps)), key=lambda i: _sort_key((kps[i].frame_id, kps[i].key)))
    kps = [kps[i] for i in order]
    n = len(kps)
    dsu = _DSU()
    for i in range(n):
        dsu.add(i)
    if n:
        P = np.array([k.position for k in kps])
        for i in range(n - 1):
            d = np.linalg.norm(P[i + 1:] - P[i], axis=1)
            for j in np.flatnonzero(d <= dist_threshold):
                dsu.union(i, i + 1 + int(j))
    groups = []
    for gid, members in enumerate(dsu.classes()):
        pos = np.array([kps[i].position for i in members])
        rp = sorted({kps[i].row_position for i in members})
        groups.append(KeypointGroup(gid, [(kps[i].frame_id, kps[i].key) for i in members],
                                    pos.mean(axis=0), rp[0] if len(rp) == 1 else -1, gid))
    return groups


def refine_by_row_position(groups: list[KeypointGroup], kps: list[KeypointObs]) -> list[KeypointGroup]:
    """Split groups so every group holds keypoints of a single in-bench row position."""
    by_ref = {(k.frame_id, k.key): k for k in kps}
    out = []
    for g in groups:
        parts: dict[int, list] = {}
        for m in g.members:
            parts.setdefault(by_ref[m].row_position, []).append(m)
        for rp in sorted(parts):
            mem = parts[rp]
            pos = np.array([by_ref[m].position for m in mem])
            out.append(KeypointGroup(len(out), mem, pos.mean(axis=0), rp, g.cluster))
    return out


def recluster_keypoint_groups(groups: list[KeypointGroup], dist_threshold: float) -> None:
    """Join clusters whose group centroids are within the threshold.

    Keypoints of one bench gap are chained row by row; a row without any
    detected keypoint can break that chain until repair fills it in.
    """
    dsu = _DSU()
    for g in groups:
        dsu.union(("g", g.group_id), ("c", g.cluster))
    for i, a in enumerate(groups):
        for b in groups[i + 1:]:
            if np.linalg.norm(a.centroid - b.centroid) <= dist_threshold:
                dsu.union(("g", a.group_id), ("g", b.group_id))
    for g in groups:
        g.cluster = min(n[1] for n in dsu.classes_of(("g", g.group_id)) if n[0] == "c")


def assign_global_lines(groups: list[KeypointGroup], kps: list[KeypointObs], extra_rows=()):
    """Unite rows that share a keypoint group; each class is one row chain.

    Args:
        groups: keypoint groups, refined by row position.
        kps: the keypoint observations the groups refer to.
        extra_rows: further lists of (frame_id, row) known to be one physical row.

    Returns:
        (lines, row_to_line) with row keys (frame_id, row index).

    Raises:
        StructuralConflict: when two rows of the same frame end up united.
    """
    by_ref = {(k.frame_id, k.key): k for k in kps}
    dsu = _DSU()
    for g in groups:
        rows = [(m[0], by_ref[m].row) for m in g.members]
        for r in rows:
            dsu.add(r)
        for r in rows[1:]:
            dsu.union(rows[0], r)
    for rows in extra_rows:
        for r in rows[1:]:
            dsu.union(rows[0], r)
    lines, row_to_line = [], {}
    for cls in dsu.classes():
        frames = [r[0] for r in cls]
        dup = sorted({f for f in frames if frames.count(f) > 1})
        if dup:
            raise StructuralConflict(f"rows of frame(s) {', '.join(dup)} joined into one line")
        lid = len(lines)
        rp = {by_ref[m].row_position for g in groups for m in g.members
              if (m[0], by_ref[m].row) in set(cls)}
        lines.append(GlobalLine(lid, list(cls), min(rp) if rp else -1))
        for r in cls:
            row_to_line[r] = lid
    return lines, row_to_line


# --------------------------------------------------------------------------
# sectors


def work_sectors(structures: dict) -> list[WorkSector]:
    out = []
    for fid in sorted(structures):
        s = structures[fid]
        for idx, sec in enumerate(s.sectors):
            out.append(WorkSector(
                fid, sec.row, list(sec.modules),
                None if sec.left_bound is None else (fid, sec.left_bound),
                None if sec.right_bound is None else (fid, sec.right_bound), idx))
    return out


def group_sectors(sectors: list[WorkSector], kg_of: dict) -> list[SectorGroup]:
    """Merge sectors sharing a keypoint group on the same side, to a fixpoint.

    Sectors touching no keypoint group end up as singletons.
    """
    dsu = _DSU()
    for i in range(len(sectors)):
        dsu.add(("s", i))
    for i, s in enumerate(sectors):
        if s.left is not None and s.left in kg_of:
            dsu.union(("s", i), ("right-of", kg_of[s.left]))
        if s.right is not None and s.right in kg_of:
            dsu.union(("s", i), ("left-of", kg_of[s.right]))
    groups = []
    for cls in dsu.classes():
        members = [sectors[c[1]] for c in cls if c[0] == "s"]
        if members:
            groups.append(SectorGroup(len(groups), members))
    return groups


def check_group(g: SectorGroup, kg_of: dict) -> None:
    """Fill in the group's keypoint groups, module count and violations.

    Without a closed member the count is ``g.count_hint`` when set (the count
    of closed sibling rows of the bench), else the largest member count.
    """
    g.violations = []
    lefts = sorted({kg_of[m.left] for m in g.members if m.left in kg_of})
    rights = sorted({kg_of[m.right] for m in g.members if m.right in kg_of})
    g.left_kg = lefts[0] if len(lefts) == 1 else None
    g.right_kg = rights[0] if len(rights) == 1 else None
    if not lefts and not rights:
        g.violations.append("unanchored")
    if len(lefts) > 1 or len(rights) > 1 or (lefts and rights and lefts[0] == rights[0]):
        g.violations.append("keypoint-groups")
    frames = [m.frame_id for m in g.members]
    if len(set(frames)) != len(frames):
        g.violations.append("duplicate-frame")
    closed = [len(m.entries) for m in g.members if m.left in kg_of and m.right in kg_of]
    counts = [len(m.entries) for m in g.members]
    if closed:
        g.module_count = closed[0]
        if len(set(closed)) > 1:
            g.violations.append("closed-count")
    elif g.count_hint is not None:
        g.module_count = g.count_hint
    else:
        g.module_count = max(counts)
        left_only = any(m.left in kg_of and m.right not in kg_of for m in g.members)
        right_only = any(m.right in kg_of and m.left not in kg_of for m in g.members)
        if left_only and right_only and len(set(counts)) > 1:
            g.violations.append("mixed-anchoring")
    if any(c > g.module_count for c in counts):
        g.violations.append("open-count")


# --------------------------------------------------------------------------
# repair


def estimate_gap_ratio(structures: dict) -> float:
    """Median bench-gap spacing in units of the row's median module spacing."""
    ratios = []
    for s in structures.values():
        rows = s.rows
        for kp in s.keypoints:
            if kp.kind != "bench_gap":
                continue
            row = rows[kp.row]
            d = np.hypot(*(s.centers[kp.right_module] - s.centers[kp.left_module]))
            if row.d_med > 0:
                ratios.append(d / row.d_med)
    return float(np.median(ratios)) if ratios else 1.45


def _entry_center(s: ImageStructure, placeholders: dict, fid: str, e) -> np.ndarray:
    if e[0] == "ph":
        return placeholders[(fid, e[1])]
    return s.entry_center(e)


def gap_explanations(ws: WorkSector, s: ImageStructure, placeholders: dict, th: float,
                     gap_ratio: float, n_max: int = 8):
    """Spacings between consecutive real entries that a bench gap would explain.

    Hypotheses are skipped, since a gap plus missing modules can look like a
    run of missing modules.

    Returns:
        List of (ia, ib, m): entry positions of the pair and the number ``m`` of
        modules that would be missing around a gap of ``gap_ratio`` spacings.
    """
    d_med = s.rows[ws.row].d_med
    real = [k for k, e in enumerate(ws.entries) if e[0] != "hyp"]
    out = []
    for ia, ib in zip(real, real[1:]):
        a = _entry_center(s, placeholders, ws.frame_id, ws.entries[ia])
        b = _entry_center(s, placeholders, ws.frame_id, ws.entries[ib])
        r = float(np.hypot(*(b - a))) / d_med
        for m in range(n_max + 1):
            if abs(r - (gap_ratio + m)) <= th * (m + 1):
                out.append((ia, ib, m))
    return out


def _sample(lifted: dict, fid: str, e):
    lf = lifted.get(fid)
    if lf is None or e[0] == "ph":
        return None
    return lf.entry(e)


def locate_split(ws: WorkSector, s: ImageStructure, kg_list: list[KeypointGroup], kg_of: dict,
                 lifted: dict, placeholders: dict, cfg: MatchConfig, gap_ratio: float):
    """The unique gap placement inside a sector confirmed by a keypoint group.

    For each gap-like pair (A, B) with m missing modules, k of them left of the
    gap, the gap center lies at A + (k + gap_ratio / 2) * p along the row, p being
    the 3D pitch implied by the pair. The placement is confirmed by a keypoint
    group of the same row position within half a pitch of that point. Failing
    that, a group of another row of the same bench confirms it when it is within
    half a pitch along the row and ``dist_threshold`` across; the split then
    starts a new group for this row position in the same cluster.

    Returns:
        (ia, ib, m, k, target, center) where target is ("kg", group_id) or
        ("cluster", cluster_id); None when no placement or several fit.
    """
    row_pos = s.rows[ws.row].bench_position
    own = {kg_of.get(ws.left), kg_of.get(ws.right)}
    exact, across = {}, {}
    for ia, ib, m in gap_explanations(ws, s, placeholders, cfg.th, gap_ratio):
        sa = _sample(lifted, ws.frame_id, ws.entries[ia])
        sb = _sample(lifted, ws.frame_id, ws.entries[ib])
        if sa is None or sb is None:
            continue
        A, B = sa.position, sb.position
        dist = float(np.linalg.norm(B - A))
        if dist == 0:
            continue
        u, p = (B - A) / dist, dist / (gap_ratio + m)
        tol = min(cfg.dist_threshold, 0.5 * p)
        for k in range(m + 1):
            center = A + (k + 0.5 * gap_ratio) * p * u
            for g in kg_list:
                if g.group_id in own:
                    continue
                off = g.centroid - center
                along = abs(float(off @ u))
                if g.row_position == row_pos:
                    if np.linalg.norm(off) <= tol:
                        exact[(ia, ib, k, g.group_id)] = (ia, ib, m, k, ("kg", g.group_id), center)
                elif along <= tol and np.linalg.norm(off - (off @ u) * u) <= cfg.dist_threshold:
                    d = float(np.linalg.norm(off))
                    prev = across.get((ia, ib, k))
                    if prev is None or d < prev[0]:
                        across[(ia, ib, k)] = (d, (ia, ib, m, k, ("cluster", g.cluster), center))
    if exact:
        return next(iter(exact.values())) if len(exact) == 1 else None
    return next(iter(across.values()))[1] if len(across) == 1 else None


def verify_and_repair(sectors: list[WorkSector], kg_list: list[KeypointGroup], kg_of: dict,
                      structures: dict, lifted: dict, cfg: MatchConfig,
                      repairs: list, placeholders: dict, kps: list | None = None):
    """Split merged sectors at missed bench gaps until no further split applies.

    Each split adds a synthetic keypoint to the matching keypoint group (and to
    ``kps`` when given).

    Returns:
        (groups, sectors) after the last regrouping; inconsistent groups are flagged.
    """
    gap_ratio = estimate_gap_ratio(structures)
    serial = 0
    for _ in range(cfg.max_repair_rounds):
        new_sectors, changed = [], False
        for ws in sectors:
            s = structures[ws.frame_id]
            hit = locate_split(ws, s, kg_list, kg_of, lifted, placeholders, cfg, gap_ratio)
            if hit is None:
                new_sectors.append(ws)
                continue
            ia, ib, m, k, target, center = hit
            row_pos = s.rows[ws.row].bench_position
            if target[0] == "cluster":
                gid = len(kg_list)
                kg_list.append(KeypointGroup(gid, [], center, row_pos, target[1]))
            else:
                gid = target[1]
            new_sectors.extend(_split_sector(ws, s, (ia, ib, m, k), gid, kg_list, kg_of,
                                             placeholders, serial))
            if kps is not None:
                kps.append(KeypointObs(ws.frame_id, f"syn{serial}", center, ws.row, row_pos))
            serial += 1
            changed = True
            repairs.append(f"split sector {ws.frame_id}/row{ws.row}/sec{ws.source} after entry "
                           f"{ia} at keypoint group {gid} ({k} missing left, {m - k} right)")
        sectors = new_sectors
        if not changed:
            break
    groups = group_sectors(sectors, kg_of)
    for g in groups:
        check_group(g, kg_of)
    groups = merge_open_groups(groups, kg_list, kg_of)
    for g in groups:
        g.flagged = bool(g.violations)
    return groups, sectors


def _share_bench_counts(groups: list[SectorGroup], cluster: dict, kg_of: dict) -> None:
    """Give open groups the module count of their bench when it is larger.

    The bench count comes from consistent closed rows at the same gap cluster,
    or else from the largest open row anchored there.
    """
    closed = {"L": {}, "R": {}}
    largest = {"L": {}, "R": {}}
    for g in groups:
        if g.violations:
            continue
        if g.left_kg is not None and g.right_kg is not None:
            closed["L"].setdefault(cluster[g.left_kg], set()).add(g.module_count)
            closed["R"].setdefault(cluster[g.right_kg], set()).add(g.module_count)
        elif g.left_kg is not None:
            c = cluster[g.left_kg]
            largest["L"][c] = max(largest["L"].get(c, 0), g.module_count)
        elif g.right_kg is not None:
            c = cluster[g.right_kg]
            largest["R"][c] = max(largest["R"].get(c, 0), g.module_count)
    for g in groups:
        if g.violations or (g.left_kg is None) == (g.right_kg is None):
            continue
        side, kg = ("L", g.left_kg) if g.left_kg is not None else ("R", g.right_kg)
        c = cluster[kg]
        known = closed[side].get(c)
        if known is not None:
            n = next(iter(known)) if len(known) == 1 else None
        else:
            n = largest[side].get(c)
        if n is not None and n > g.module_count:
            g.count_hint = n
            check_group(g, kg_of)


def merge_open_groups(groups: list[SectorGroup], kg_list: list[KeypointGroup],
                      kg_of: dict) -> list[SectorGroup]:
    """Join the two open halves of a sector no frame saw whole.

    All rows of a bench hold the same number of modules. A bench is identified
    by the clusters of its two gaps; consistent closed rows give its count. A
    group anchored only on the left and one anchored only on the right, of the
    same row position between the same two clusters, are one sector and get
    that count.
    """
    cluster = {g.group_id: g.cluster for g in kg_list}
    row_pos = {g.group_id: g.row_position for g in kg_list}
    bench_counts: dict[tuple, set] = {}
    for g in groups:
        if not g.violations and g.left_kg is not None and g.right_kg is not None:
            bench_counts.setdefault((cluster[g.left_kg], cluster[g.right_kg]), set()).add(
                g.module_count)
    counts = {k: next(iter(v)) for k, v in bench_counts.items() if len(v) == 1}
    left_cl = {cl for cl, _ in counts}
    right_cl = {cr for _, cr in counts}
    open_left = {}   # anchored on the left only, keyed by (cluster, row position)
    open_right = {}
    for g in groups:
        if g.violations:
            continue
        if g.left_kg is not None and g.right_kg is None and cluster[g.left_kg] in left_cl:
            open_left.setdefault((cluster[g.left_kg], row_pos[g.left_kg]), []).append(g)
        if g.right_kg is not None and g.left_kg is None and cluster[g.right_kg] in right_cl:
            open_right.setdefault((cluster[g.right_kg], row_pos[g.right_kg]), []).append(g)
    merged_away = set()
    for (cl, cr), n in sorted(counts.items()):
        rps = {rp for c, rp in open_left if c == cl} | {rp for c, rp in open_right if c == cr}
        for rp in sorted(rps):
            lg, rg = open_left.get((cl, rp), []), open_right.get((cr, rp), [])
            if len(lg) > 1 or len(rg) > 1:
                continue
            if lg and rg:
                a, b = lg[0], rg[0]
                if {m.frame_id for m in a.members} & {m.frame_id for m in b.members}:
                    continue
                a.members = a.members + b.members
                merged_away.add(b.sector_group_id)
                a.count_hint = n
                check_group(a, kg_of)
    out = [g for g in groups if g.sector_group_id not in merged_away]
    _share_bench_counts(out, cluster, kg_of)
    for k, g in enumerate(out):
        g.sector_group_id = k
    return out


def _split_sector(ws: WorkSector, s: ImageStructure, split, gid, kg_list, kg_of, placeholders,
                  serial):
    ia, ib, m, k = split
    key = (ws.frame_id, f"syn{serial}")
    kg_of[key] = gid
    kg_list[gid].members.append(key)
    ca = _entry_center(s, placeholders, ws.frame_id, ws.entries[ia])
    cb = _entry_center(s, placeholders, ws.frame_id, ws.entries[ib])
    step = s.rows[ws.row].d_med * (cb - ca) / np.hypot(*(cb - ca))

    def placeholder(center):
        pid = len(placeholders)
        placeholders[(ws.frame_id, pid)] = center
        return ("ph", pid)

    left = list(ws.entries[:ia + 1]) + [placeholder(ca + (j + 1) * step) for j in range(k)]
    right = [placeholder(cb - (m - k - j) * step) for j in range(m - k)] + list(ws.entries[ib:])
    return [WorkSector(ws.frame_id, ws.row, left, ws.left, key, ws.source),
            WorkSector(ws.frame_id, ws.row, right, key, ws.right, ws.source)]


# --------------------------------------------------------------------------
# alignment and IDs


def _align(g: SectorGroup, kg_of: dict):
    """Map each member entry to its position in the group's module sequence."""
    n_mod = g.module_count
    slots: dict[int, list] = {i: [] for i in range(n_mod)}
    for ws in g.members:
        n = len(ws.entries)
        if ws.left in kg_of:
            base = 0
        elif ws.right in kg_of:
            base = n_mod - n
        else:
            continue
        for j, e in enumerate(ws.entries):
            slots[base + j].append((ws.frame_id, e))
    return slots


def _principal_direction(pts: np.ndarray) -> np.ndarray:
    if len(pts) < 2:
        return np.array([1.0, 0.0, 0.0])
    c = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - c, full_matrices=False)
    d = vt[0]
    if d[0] < 0 or (d[0] == 0 and d[1] < 0):
        d = -d
    return d


def confirm_hypotheses_and_assign_ids(groups: list[SectorGroup], kg_list: list[KeypointGroup],
                                      kg_of: dict, lines: list[GlobalLine], row_to_line: dict,
                                      lifted: dict, gs: GlobalStructure) -> None:
    """Align members, keep positions backed by a real detection, number modules."""
    usable = [g for g in groups if not g.flagged]
    for g in usable:
        chains = {row_to_line.get((m.frame_id, m.row)) for m in g.members}
        chains.discard(None)
        g.line = min(chains) if len(chains) == 1 else -1
        if len(chains) != 1:
            g.flagged = True
            g.violations.append("line-ambiguous")
            gs.flags.append(f"sector group {g.sector_group_id} excluded: spans {len(chains)} lines")
    usable = [g for g in usable if not g.flagged]

    # per-group slots, observations and a representative position
    slots, centers = {}, {}
    for g in usable:
        sl = _align(g, kg_of)
        obs_by_slot = {}
        for idx, entries in sl.items():
            real = [(f, e) for f, e in entries if e[0] == "det"]
            if not real:
                continue
            obs = []
            for f, e in sorted(real, key=lambda x: _sort_key(x)):
                smp = lifted[f].modules.get(e[1]) if f in lifted else None
                if smp is not None:
                    obs.append((f, e[1], smp))
            if obs:
                obs_by_slot[idx] = obs
            else:
                gs.flags.append(f"sector group {g.sector_group_id} slot {idx}: no lifted observation")
        slots[g.sector_group_id] = obs_by_slot
        pts = [o[2].position for obs in obs_by_slot.values() for o in obs]
        centers[g.sector_group_id] = np.mean(pts, axis=0) if pts else None
    usable = [g for g in usable if centers[g.sector_group_id] is not None]

    # benches: groups sharing an unrefined keypoint cluster on the same side
    cluster_of = {kg.group_id: kg.cluster for kg in kg_list}
    dsu = _DSU()
    for g in usable:
        gid = ("g", g.sector_group_id)
        dsu.add(gid)
        if g.left_kg is not None:
            dsu.union(gid, ("L", cluster_of[g.left_kg]))
        if g.right_kg is not None:
            dsu.union(gid, ("R", cluster_of[g.right_kg]))
    bench_of = {}
    for b, cls in enumerate(dsu.classes()):
        for node in cls:
            if node[0] == "g":
                bench_of[node[1]] = b

    # plant lines: chains sharing a bench
    ldsu = _DSU()
    by_bench: dict[int, list] = {}
    for g in usable:
        ldsu.add(g.line)
        by_bench.setdefault(bench_of[g.sector_group_id], []).append(g)
    for members in by_bench.values():
        for g in members[1:]:
            ldsu.union(members[0].line, g.line)
    plant_lines = ldsu.classes()
    line_pts = {}
    for i, chain_ids in enumerate(plant_lines):
        pts = np.array([centers[g.sector_group_id] for g in usable if g.line in chain_ids])
        line_pts[i] = pts
    line_order = sorted(range(len(plant_lines)),
                        key=lambda i: (-float(line_pts[i][:, 1].mean()), i))
    chain_rowpos = {ln.line_id: ln.row_position for ln in lines}

    gid_counter, bench_counter, sector_counter = 0, 0, 0
    for new_line_id, i in enumerate(line_order):
        chain_ids = plant_lines[i]
        direction = _principal_direction(line_pts[i])
        groups_in = [g for g in usable if g.line in chain_ids]
        benches = sorted({bench_of[g.sector_group_id] for g in groups_in},
                         key=lambda b: (float(np.mean([centers[g.sector_group_id] @ direction
                                                       for g in groups_in
                                                       if bench_of[g.sector_group_id] == b])), b))
        bench_ids = {b: bench_counter + k for k, b in enumerate(benches)}
        bench_counter += len(benches)
        sector_ids = {}
        for b in benches:
            in_b = sorted((g for g in groups_in if bench_of[g.sector_group_id] == b),
                          key=lambda g: (chain_rowpos[g.line], g.sector_group_id))
            for g in in_b:
                sector_ids[g.sector_group_id] = sector_counter
                sector_counter += 1
        chains = sorted(chain_ids, key=lambda c: (chain_rowpos[c], c))
        for c in chains:
            chain_groups = sorted((g for g in groups_in if g.line == c),
                                  key=lambda g: (float(centers[g.sector_group_id] @ direction),
                                                 g.sector_group_id))
            gs.chains[c] = [g.sector_group_id for g in chain_groups]
            for g in chain_groups:
                for idx in sorted(slots[g.sector_group_id]):
                    gs.modules.append(GlobalModule(
                        gid_counter, new_line_id, bench_ids[bench_of[g.sector_group_id]],
                        sector_ids[g.sector_group_id], chain_rowpos[c], idx,
                        slots[g.sector_group_id][idx]))
                    gid_counter += 1


def fuse_structures(structures: dict[str, ImageStructure], lifted: dict[str, LiftedStructure],
                    cfg: MatchConfig = MatchConfig()) -> GlobalStructure:
    """Complete cross-image fusion of per-frame structures."""
    gs = GlobalStructure()
    kps = collect_keypoints(structures, lifted)
    coarse = group_keypoints(kps, cfg.dist_threshold)
    kgs = refine_by_row_position(coarse, kps)
    lines, row_to_line = assign_global_lines(kgs, kps)
    kg_of = {m: g.group_id for g in kgs for m in g.members}
    sectors = work_sectors(structures)
    placeholders: dict = {}
    groups, _ = verify_and_repair(sectors, kgs, kg_of, structures, lifted, cfg, gs.repairs,
                                  placeholders, kps)
    recluster_keypoint_groups(kgs, cfg.dist_threshold)
    # rows joined by repairs or by a consistent sector group are one physical row
    same_row = [[(m.frame_id, m.row) for m in g.members] for g in groups if not g.flagged]
    lines, row_to_line = assign_global_lines(kgs, kps, same_row)
    for g in groups:
        if g.flagged and g.violations != ["unanchored"]:
            gs.flags.append(f"sector group {g.sector_group_id} excluded: {', '.join(g.violations)} "
                            f"(members: {', '.join(f'{m.frame_id}/row{m.row}' for m in g.members)})")
    confirm_hypotheses_and_assign_ids(groups, kgs, kg_of, lines, row_to_line, lifted, gs)
    gs.keypoint_groups = kgs
    gs.lines = lines
    gs.sector_groups = groups
    for msg in gs.repairs:
        logger.info(msg)
    for msg in gs.flags:
        logger.warning(msg)
    return gs
