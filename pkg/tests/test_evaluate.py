import copy
import csv
import io
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from pvmap.evaluate import (EvalReport, FivePointStats, best_relabel, compare_to_reference,
                            evaluate_model, internal_consistency, rigid_fit, score_against_truth,
                            spacing_stats)
from pvmap.optimize import ModulePose, PlantModel


def _sorted_oracle(values):
    """Linear-interpolation quantiles from the sorted sample."""
    s = sorted(float(v) for v in values)
    n = len(s)

    def q(p):
        h = (n - 1) * p
        lo = int(np.floor(h))
        hi = min(lo + 1, n - 1)
        return s[lo] + (h - lo) * (s[hi] - s[lo])

    return [s[0], q(0.25), q(0.5), q(0.75), s[-1]]


def _grid_model(n_benches=2, rows=2, per_row=4, pitch=1.7, col=1.05, line_of=lambda b: 0):
    mods, gid = [], 0
    for b in range(n_benches):
        for r in range(rows):
            for i in range(per_row):
                p = np.array([b * 10.0 + i * pitch, -r * col, 0.1 * b])
                mods.append(ModulePose(gid, p, np.array([0.0, 0.0, 1.0]), line_of(b), b,
                                       b * rows + r, r, i, 1, p.copy(), np.array([0.0, 0.0, 1.0]),
                                       [("f", gid)]))
                gid += 1
    return PlantModel(mods)


def _truth_of(model):
    mods = [{"truth_id": m.global_id, "line": m.line_id, "bench": m.bench_id,
             "sector": m.sector_id, "row": m.row_index, "in_row": m.in_row_index,
             "position": m.position.tolist()} for m in model.modules]
    return {"modules": mods, "detections": {"f": list(range(len(mods)))}}


# -- five-point statistics -------------------------------------------------


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=60))
def test_five_point_matches_sort_oracle(vals):
    s = FivePointStats.of(vals)
    want = _sorted_oracle(vals)
    assert s.as_list() == pytest.approx(want, rel=1e-12, abs=1e-9)
    assert s.min <= s.q1 <= s.median <= s.q3 <= s.max
    assert s.n == len(vals)


def test_five_point_empty_absent():
    assert FivePointStats.of([]) is None


def test_five_point_known():
    s = FivePointStats.of([1, 2, 3, 4])
    assert s.as_list() == [1, 1.75, 2.5, 3.25, 4] and s.iqr == 1.5 and s.range == 3


# -- internal consistency --------------------------------------------------


def test_consistency_identical_zero():
    raw = {i: np.array([i, 2.0 * i, 1.0]) for i in range(5)}
    for s in internal_consistency(raw, copy.deepcopy(raw)):
        assert s.as_list() == [0.0] * 5


def test_consistency_example():
    raw = {i: np.zeros(3) for i in range(3)}
    opt = {0: np.array([-1.0, 0, 0]), 1: np.zeros(3), 2: np.array([1.0, 0, 0])}
    sx, _, _ = internal_consistency(raw, opt)
    assert (sx.min, sx.median, sx.max) == (-1.0, 0.0, 1.0)


def test_consistency_id_mismatch():
    with pytest.raises(ValueError):
        internal_consistency({0: np.zeros(3)}, {1: np.zeros(3)})


def test_consistency_empty():
    assert internal_consistency({}, {}) == (None, None, None)


def test_noisy_run_z_spread_largest(pp1_noisy):
    sx, sy, sz = evaluate_model(pp1_noisy.model).consistency
    assert sz.range > sx.range and sz.range > sy.range


# -- spacing ---------------------------------------------------------------


def test_spacing_grid():
    row, col = spacing_stats(_grid_model())
    assert row.as_list() == pytest.approx([1.7] * 5, abs=1e-12) and row.n == 2 * 2 * 3
    assert col.as_list() == pytest.approx([1.05] * 5, abs=1e-12) and col.n == 2 * 4


def test_single_module_rows_absent():
    row, col = spacing_stats(_grid_model(rows=1, per_row=1))
    assert row is None and col is None
    rows = evaluate_model(_grid_model(rows=1, per_row=1)).csv_rows()
    assert ["spacing", "row", 0, "", "", "", "", "", "absent"] in rows


def test_zero_noise_spacing_is_pitch(pp2_zero):
    p = pp2_zero.scene.plant.params
    row, col = spacing_stats(pp2_zero.model)
    assert row.median == pytest.approx(p.pitch, abs=1e-9)
    assert col.median == pytest.approx(p.across_pitch, abs=1e-9)


# -- reference comparison --------------------------------------------------


def _anchors(model):
    return [m.global_id for m in model.modules if m.in_row_index in (0, 3) and m.row_index == 0]


def test_reference_identity():
    model = _grid_model()
    cmp_ = compare_to_reference(model, copy.deepcopy(model), _anchors(model))
    assert cmp_.stats.max < 1e-12 and cmp_.unmatched == []


def test_reference_translation_recovered():
    model = _grid_model()
    ref = copy.deepcopy(model)
    for m in ref.modules:
        m.position = m.position + [1.0, 0.0, 0.0]
    cmp_ = compare_to_reference(model, ref, _anchors(model))
    assert cmp_.stats.max < 1e-12
    assert np.allclose(cmp_.translation, [1, 0, 0], atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.tuples(st.floats(-np.pi, np.pi), st.floats(-1, 1), st.floats(-np.pi, np.pi)),
       st.tuples(*[st.floats(-1000, 1000)] * 3))
def test_reference_rigid_invariance(angles, t):
    rng = np.random.default_rng(0)
    model = _grid_model()
    ref = copy.deepcopy(model)
    for m in ref.modules:
        m.position = m.position + rng.normal(0, 0.05, 3)
    base = compare_to_reference(model, ref, _anchors(model))
    R = Rotation.from_euler("zyx", angles).as_matrix()
    moved = copy.deepcopy(model)
    for m in moved.modules:
        m.position = R @ m.position + np.array(t)
    again = compare_to_reference(moved, ref, _anchors(model))
    for gid, d in base.deviations.items():
        assert again.deviations[gid] == pytest.approx(d, rel=1e-9, abs=1e-9)


def test_reference_unmatched_reported():
    model = _grid_model()
    ref = copy.deepcopy(model)
    ref.modules = ref.modules[:-1]
    cmp_ = compare_to_reference(model, ref, _anchors(model))
    assert cmp_.unmatched == [model.modules[-1].global_id]
    assert cmp_.stats.n == len(model.modules) - 1


def test_reference_anchor_errors():
    model = _grid_model()
    with pytest.raises(ValueError, match="three"):
        compare_to_reference(model, model, [0, 1])
    with pytest.raises(ValueError, match="collinear"):
        compare_to_reference(model, model, [0, 1, 2])


def test_rigid_fit_handles_reflection_case():
    P = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    R0 = Rotation.from_euler("xyz", [0.3, -0.2, 1.0]).as_matrix()
    R, t = rigid_fit(P, P @ R0.T + [1, 2, 3])
    assert np.allclose(R, R0) and np.allclose(t, [1, 2, 3]) and np.linalg.det(R) > 0


def test_bench_shifts_show_per_bench():
    model = _grid_model(n_benches=4)
    ref = copy.deepcopy(model)
    shift = {0: [0.0, 0, 0], 1: [0.3, 0, 0], 2: [0, -0.4, 0], 3: [0.0, 0, 0]}
    for m in ref.modules:
        m.position = m.position + shift[m.bench_id]
    anchors = [m.global_id for m in model.modules if m.bench_id in (0, 3) and m.in_row_index == 0]
    cmp_ = compare_to_reference(model, ref, anchors)
    per_bench = {}
    for m in model.modules:
        per_bench.setdefault(m.bench_id, []).append(cmp_.deviations[m.global_id])
    spreads = [np.ptp(v) for v in per_bench.values()]
    means = [np.mean(v) for v in per_bench.values()]
    assert max(spreads) < 0.25 * np.ptp(means)


# -- ground truth ----------------------------------------------------------


def _brute_relabel(pairs):
    ml = sorted({a for a, _ in pairs})
    tl = sorted({b for _, b in pairs})
    best = 0
    k = min(len(ml), len(tl))
    for sub in itertools.permutations(tl, k):
        for chosen in itertools.combinations(ml, k):
            agree = sum(1 for a, b in pairs if dict(zip(chosen, sub)).get(a) == b)
            best = max(best, agree)
    return best


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(10, 15)), min_size=1, max_size=30))
def test_relabel_matches_brute_force(pairs):
    mapping = best_relabel(pairs)
    assert len(set(mapping.values())) == len(mapping)
    got = sum(1 for a, b in pairs if mapping.get(a) == b)
    assert got == _brute_relabel(pairs)


def test_truth_perfect_and_relabelled():
    model = _grid_model(n_benches=3, line_of=lambda b: b)
    truth = _truth_of(model)
    for m in model.modules:
        m.line_id = 2 - m.line_id
        m.bench_id = {0: 7, 1: 5, 2: 6}[m.bench_id]
    s = score_against_truth(model, truth)
    assert (s.recall, s.tuple_accuracy, s.rmse, s.n_spurious) == (1.0, 1.0, 0.0, 0)


def test_one_module_deleted():
    model = _grid_model()
    truth = _truth_of(model)
    n = len(model.modules)
    model.modules = model.modules[1:]
    s = score_against_truth(model, truth)
    assert s.recall == (n - 1) / n and s.missed == [0]


def test_duplicate_is_spurious():
    model = _grid_model()
    truth = _truth_of(model)
    dup = copy.deepcopy(model.modules[3])
    dup.global_id = 99
    model.modules.append(dup)
    s = score_against_truth(model, truth)
    assert s.n_spurious == 1 and s.recall == 1.0


def test_zero_noise_scores(pp1_zero, pp2_zero):
    for run in (pp1_zero, pp2_zero):
        s = run.scores()
        assert s.recall == 1.0 and s.tuple_accuracy == 1.0 and s.rmse < 1e-6


def test_report_csv(pp1_noisy):
    rep = evaluate_model(pp1_noisy.model, pp1_noisy.truth)
    rows = rep.csv_rows()
    assert rows[0] == ["section", "name", "n", "min", "q1", "median", "q3", "max", "value"]
    buf = io.StringIO()
    csv.writer(buf).writerows(rows)
    back = list(csv.reader(io.StringIO(buf.getvalue())))
    assert len(back) == len(rows)
    names = {(r[0], r[1]) for r in rows}
    assert {("consistency", "dz"), ("spacing", "column"), ("truth", "recall")} <= names
    assert isinstance(rep, EvalReport)
