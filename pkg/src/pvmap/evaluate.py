"""Model evaluation: internal consistency, spacing, reference comparison, truth scores.

Quartiles use linear interpolation between order statistics (numpy's default
``percentile`` method). Statistics over an empty sample are reported as absent
(``None``) rather than as zeros.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from pvmap.optimize import PlantModel

logger = logging.getLogger(__name__)

AXES = ("x", "y", "z")


@dataclass(frozen=True)
class FivePointStats:
    min: float
    q1: float
    median: float
    q3: float
    max: float
    n: int = 0

    @classmethod
    def of(cls, values) -> "FivePointStats | None":
        """Five-point summary of a sample, or None when the sample is empty."""
        v = np.asarray(values, dtype=float).ravel()
        if v.size == 0:
            return None
        q = np.percentile(v, [0, 25, 50, 75, 100])
        return cls(*map(float, q), n=int(v.size))

    @property
    def iqr(self) -> float:
        return self.q3 - self.q1

    @property
    def range(self) -> float:
        return self.max - self.min

    def as_list(self) -> list[float]:
        return [self.min, self.q1, self.median, self.q3, self.max]


@dataclass
class ReferenceComparison:
    stats: FivePointStats | None
    deviations: dict  # global_id -> 3D distance after alignment
    unmatched: list  # global_ids whose tuple has no reference partner
    rotation: np.ndarray
    translation: np.ndarray


@dataclass
class TruthScores:
    recall: float
    tuple_accuracy: float
    rmse: float
    n_truth: int
    n_mapped: int
    n_spurious: int
    missed: list = field(default_factory=list)
    wrong_tuples: list = field(default_factory=list)
    line_map: dict = field(default_factory=dict)
    bench_map: dict = field(default_factory=dict)
    sector_map: dict = field(default_factory=dict)
    raw_median_abs: tuple | None = None
    opt_median_abs: tuple | None = None


@dataclass
class EvalReport:
    consistency: tuple | None = None  # per-axis FivePointStats of optimized - raw
    row_spacing: FivePointStats | None = None
    column_spacing: FivePointStats | None = None
    reference: FivePointStats | None = None
    truth: TruthScores | None = None

    def csv_rows(self) -> list[list]:
        """One row per statistic: section, name, n, min, q1, median, q3, max, value."""
        rows = [["section", "name", "n", "min", "q1", "median", "q3", "max", "value"]]

        def stat(section, name, s):
            if s is None:
                rows.append([section, name, 0, "", "", "", "", "", "absent"])
            else:
                rows.append([section, name, s.n, *map(repr, s.as_list()), ""])

        if self.consistency is not None:
            for ax, s in zip(AXES, self.consistency):
                stat("consistency", f"d{ax}", s)
        stat("spacing", "row", self.row_spacing)
        stat("spacing", "column", self.column_spacing)
        if self.reference is not None:
            stat("reference", "deviation", self.reference)
        t = self.truth
        if t is not None:
            for name in ("recall", "tuple_accuracy", "rmse", "n_truth", "n_mapped", "n_spurious"):
                rows.append(["truth", name, "", "", "", "", "", "", repr(getattr(t, name))])
            for label, med in (("raw", t.raw_median_abs), ("optimized", t.opt_median_abs)):
                if med is not None:
                    for ax, v in zip(AXES, med):
                        rows.append(["truth", f"{label}_median_abs_{ax}", "", "", "", "", "",
                                     "", repr(float(v))])
        return rows


# --------------------------------------------------------------------------
# internal consistency and spacing


def internal_consistency(raw: dict, optimized: dict) -> tuple:
    """Per-axis five-point summary of signed differences ``optimized - raw``.

    Args:
        raw: global_id -> position before optimisation.
        optimized: global_id -> position after optimisation.

    Raises:
        ValueError: when the two id sets differ.
    """
    if set(raw) != set(optimized):
        extra = sorted(set(raw) ^ set(optimized))[:5]
        raise ValueError(f"global_id sets differ (e.g. {extra})")
    ids = sorted(raw)
    if not ids:
        return (None, None, None)
    d = np.array([np.asarray(optimized[i], float) - np.asarray(raw[i], float) for i in ids])
    return tuple(FivePointStats.of(d[:, k]) for k in range(3))


def model_consistency(model: PlantModel) -> tuple:
    with_raw = [m for m in model.modules if m.raw_position is not None]
    return internal_consistency({m.global_id: m.raw_position for m in with_raw},
                                {m.global_id: m.position for m in with_raw})


def spacing_samples(model: PlantModel) -> tuple[np.ndarray, np.ndarray]:
    """Row distances (in-row neighbours of a sector) and column distances
    (same in-row index, adjacent rows of a bench)."""
    by_tuple = {}
    for m in model.modules:
        by_tuple[(m.bench_id, m.sector_id, m.row_index, m.in_row_index)] = m
    by_bench = {}
    for m in model.modules:
        by_bench[(m.bench_id, m.row_index, m.in_row_index)] = m
    row, col = [], []
    for (b, s, r, i), m in sorted(by_tuple.items()):
        nxt = by_tuple.get((b, s, r, i + 1))
        if nxt is not None:
            row.append(np.linalg.norm(nxt.position - m.position))
    for (b, r, i), m in sorted(by_bench.items()):
        nxt = by_bench.get((b, r + 1, i))
        if nxt is not None:
            col.append(np.linalg.norm(nxt.position - m.position))
    return np.array(row), np.array(col)


def spacing_stats(model: PlantModel) -> tuple:
    row, col = spacing_samples(model)
    return FivePointStats.of(row), FivePointStats.of(col)


# --------------------------------------------------------------------------
# reference comparison


def rigid_fit(src, dst) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rotation and translation with ``dst ~ R @ src + t`` (Kabsch)."""
    P = np.asarray(src, dtype=float)
    Q = np.asarray(dst, dtype=float)
    cp, cq = P.mean(axis=0), Q.mean(axis=0)
    H = (P - cp).T @ (Q - cq)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, cq - R @ cp


def compare_to_reference(model: PlantModel, reference: PlantModel,
                         anchors) -> ReferenceComparison:
    """Align ``model`` rigidly to ``reference`` over anchor modules, then pair by tuple.

    Args:
        model: the mapped plant.
        reference: a model in the same tuple schema.
        anchors: global_ids of model modules whose tuple partners anchor the fit.

    Raises:
        ValueError: fewer than three usable anchors, or collinear anchors.
    """
    ref_by_tuple = {m.tuple: m for m in reference.modules}
    by_id = {m.global_id: m for m in model.modules}
    src, dst = [], []
    for gid in anchors:
        m = by_id.get(gid)
        if m is None or m.tuple not in ref_by_tuple:
            raise ValueError(f"anchor {gid} has no partner in the reference")
        src.append(m.position)
        dst.append(ref_by_tuple[m.tuple].position)
    if len(src) < 3:
        raise ValueError("need at least three anchors")
    src = np.array(src)
    centred = src - src.mean(axis=0)
    sv = np.linalg.svd(centred, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1.0):
        raise ValueError("anchors are collinear")
    R, t = rigid_fit(src, dst)
    dev, unmatched = {}, []
    for m in model.modules:
        r = ref_by_tuple.get(m.tuple)
        if r is None:
            unmatched.append(m.global_id)
            continue
        dev[m.global_id] = float(np.linalg.norm(R @ m.position + t - r.position))
    if unmatched:
        logger.info("%d modules without a reference partner", len(unmatched))
    return ReferenceComparison(FivePointStats.of(list(dev.values())), dev, unmatched, R, t)


# --------------------------------------------------------------------------
# ground truth


def best_relabel(pairs) -> dict:
    """Bijection model label -> truth label maximising the number of agreeing pairs."""
    pairs = list(pairs)
    if not pairs:
        return {}
    ml = sorted({a for a, _ in pairs})
    tl = sorted({b for _, b in pairs})
    M = np.zeros((len(ml), len(tl)))
    mi = {a: i for i, a in enumerate(ml)}
    ti = {b: j for j, b in enumerate(tl)}
    for a, b in pairs:
        M[mi[a], ti[b]] += 1
    rows, cols = linear_sum_assignment(M, maximize=True)
    return {ml[r]: tl[c] for r, c in zip(rows, cols) if M[r, c] > 0}


def truth_ids(model: PlantModel, detections: dict) -> list:
    """Majority truth id per module over its observations (ties to the smaller id)."""
    out = []
    for m in model.modules:
        votes = Counter()
        for f, i in m.observations:
            ids = detections.get(f, [])
            if 0 <= i < len(ids) and ids[i] is not None:
                votes[int(ids[i])] += 1
        out.append(min(votes, key=lambda k: (-votes[k], k)) if votes else None)
    return out


def score_against_truth(model: PlantModel, truth: dict) -> TruthScores:
    """Recall, tuple accuracy (up to line, bench and sector relabelling) and position RMSE.

    Args:
        model: the mapped plant.
        truth: the dictionary written as truth.json by the simulator.
    """
    tmods = truth["modules"]
    n = len(tmods)
    tids = truth_ids(model, truth["detections"])
    seen, pairs, spurious = set(), [], 0
    for m, t in zip(model.modules, tids):
        if t is None or t in seen:
            spurious += 1
            continue
        seen.add(t)
        pairs.append((m, t))
    line_map = best_relabel((m.line_id, tmods[t]["line"]) for m, t in pairs)
    bench_map = best_relabel((m.bench_id, tmods[t]["bench"]) for m, t in pairs)
    sector_map = best_relabel((m.sector_id, tmods[t]["sector"]) for m, t in pairs)
    wrong, sq, raw_err, opt_err = [], [], [], []
    for m, t in pairs:
        tm = tmods[t]
        want = (tm["line"], tm["bench"], tm["sector"], tm["row"], tm["in_row"])
        got = (line_map.get(m.line_id), bench_map.get(m.bench_id), sector_map.get(m.sector_id),
               m.row_index, m.in_row_index)
        if got != want:
            wrong.append(m.global_id)
        tp = np.asarray(tm["position"], dtype=float)
        sq.append(float(np.sum((m.position - tp) ** 2)))
        opt_err.append(np.abs(m.position - tp))
        if m.raw_position is not None:
            raw_err.append(np.abs(m.raw_position - tp))
    k = len(pairs)
    return TruthScores(
        recall=k / n if n else 0.0,
        tuple_accuracy=(k - len(wrong)) / k if k else 0.0,
        rmse=float(np.sqrt(np.mean(sq))) if sq else float("nan"),
        n_truth=n, n_mapped=k, n_spurious=spurious,
        missed=sorted(set(range(n)) - seen), wrong_tuples=wrong,
        line_map=line_map, bench_map=bench_map, sector_map=sector_map,
        raw_median_abs=tuple(np.median(raw_err, axis=0).tolist()) if raw_err else None,
        opt_median_abs=tuple(np.median(opt_err, axis=0).tolist()) if opt_err else None,
    )


def evaluate_model(model: PlantModel, truth: dict | None = None,
                   reference: PlantModel | None = None, anchors=()) -> EvalReport:
    report = EvalReport(consistency=model_consistency(model))
    report.row_spacing, report.column_spacing = spacing_stats(model)
    if reference is not None:
        report.reference = compare_to_reference(model, reference, anchors).stats
    if truth is not None:
        report.truth = score_against_truth(model, truth)
    return report
