import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from helpers import dets_at, row_line
from pvmap.detect_fuse import OrientedBox
from pvmap.scene_io import AddKeypoint, AddModule, DeleteKeypoint, DeleteModule, ImageRaster
from pvmap.structure import (EDGE, GapKeypoint, RowLine, StructureConfig, apply_corrections,
                             build_structure, classify_gap, find_gap_candidates, fit_rows_ransac,
                             group_rows_into_benches, hausdorff_line_distance, hypothesize_missing,
                             missing_count, row_spacing, transition_patch)

REP = OrientedBox(0, 0, 40, 24, 0)


def _line(p, angle):
    return RowLine("f", np.array(p, float), np.array([math.cos(angle), math.sin(angle)]), [])


def _border_points(line, w, h):
    """Independent oracle: solve the four border equations and keep in-range hits."""
    (px, py), (dx, dy) = map(float, line.point), map(float, line.direction)
    hits = []
    if dx != 0:
        for x in (0.0, w):
            y = py + (x - px) / dx * dy
            if 0 <= y <= h:
                hits.append((x, y))
    if dy != 0:
        for y in (0.0, h):
            x = px + (y - py) / dy * dx
            if 0 <= x <= w:
                hits.append((x, y))
    hits = sorted(set((round(x, 9), round(y, 9)) for x, y in hits))
    return hits[0], hits[-1]


def _dist(q, line):
    (px, py), (dx, dy) = line.point, line.direction
    return abs((q[0] - px) * dy - (q[1] - py) * dx)


def _hausdorff_oracle(L, K, w, h):
    return max([_dist(q, K) for q in _border_points(L, w, h)]
               + [_dist(q, L) for q in _border_points(K, w, h)])


# -- RANSAC rows -----------------------------------------------------------


def test_collinear_one_row():
    pts = [(10 + 50 * i, 200) for i in range(10)]
    rows = fit_rows_ransac(pts, REP, seed=0)
    assert len(rows) == 1 and rows[0].inliers == list(range(10))


def test_two_rows():
    pts = [(10 + 50 * i, 0) for i in range(10)] + [(10 + 50 * i, 100) for i in range(10)]
    rows = fit_rows_ransac(pts, REP, seed=0)
    assert sorted(len(r.inliers) for r in rows) == [10, 10]
    assert {frozenset(r.inliers) for r in rows} == {frozenset(range(10)), frozenset(range(10, 20))}


def test_too_few_points():
    assert fit_rows_ransac([(0, 0), (50, 0), (100, 0)], REP, min_inliers=4) == []


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_ransac_deterministic_partition(seed, n_rows):
    rng = np.random.default_rng(seed)
    pts = np.array([(50 * i + rng.normal(0, 1), 80 * r + rng.normal(0, 1))
                    for r in range(n_rows) for i in range(8)])
    a = fit_rows_ransac(pts, REP, seed=seed)
    b = fit_rows_ransac(pts, REP, seed=seed)
    assert [r.inliers for r in a] == [r.inliers for r in b]
    flat = [i for r in a for i in r.inliers]
    assert len(flat) == len(set(flat))
    for r in a:
        t = [r.param(pts[i]) for i in r.inliers]
        assert t == sorted(t)


# -- Hausdorff line distance -----------------------------------------------


def test_hausdorff_same_line():
    L = _line((0, 50), 0.0)
    assert hausdorff_line_distance(L, L, 100, 100) == 0.0


def test_hausdorff_parallel_offset():
    assert hausdorff_line_distance(_line((0, 0), 0.0), _line((0, 5), 0.0), 100, 100) == pytest.approx(5)


def test_hausdorff_slope():
    K = _line((0, 0), math.atan(0.1))
    assert hausdorff_line_distance(_line((0, 0), 0.0), K, 100, 100) == pytest.approx(10.0, abs=1e-12)


def test_hausdorff_line_missing_image():
    with pytest.raises(ValueError):
        hausdorff_line_distance(_line((0, -50), 0.0), _line((0, 5), 0.0), 100, 100)


@settings(max_examples=200, deadline=None)
@given(st.floats(5, 95), st.floats(-1.2, 1.2), st.floats(5, 95), st.floats(-1.2, 1.2))
def test_hausdorff_symmetric_and_matches_oracle(y1, a1, y2, a2):
    L, K = _line((50, y1), a1), _line((50, y2), a2)
    h = hausdorff_line_distance(L, K, 100, 100)
    assert h == hausdorff_line_distance(K, L, 100, 100)
    assert h == pytest.approx(_hausdorff_oracle(L, K, 100, 100), abs=1e-9)


# -- bench grouping --------------------------------------------------------


def _rows_at(ys, n=6):
    rows, centers = [], {}
    for r, y in enumerate(ys):
        idx = list(range(r * n, (r + 1) * n))
        for k, i in enumerate(idx):
            centers[i] = np.array([100.0 + 50 * k, float(y)])
        rows.append(RowLine("f", np.array([0.0, float(y)]), np.array([1.0, 0.0]), idx))
    return rows, centers


def test_two_close_rows_one_bench():
    rows, centers = _rows_at([100, 130])
    (b,) = group_rows_into_benches(rows, REP, 800, 600, 2, centers)
    assert b.valid and [r.bench_position for r in b.rows] == [0, 1]


def test_isolated_row_invalid():
    rows, centers = _rows_at([100])
    (b,) = group_rows_into_benches(rows, REP, 800, 600, 2, centers)
    assert not b.valid


def test_six_row_bench():
    rows, centers = _rows_at([100 + 30 * i for i in range(6)][::-1])
    benches = group_rows_into_benches(rows, REP, 800, 600, 6, centers)
    assert len(benches) == 1 and benches[0].valid
    assert [float(centers[r.inliers[0]][1]) for r in benches[0].rows] == [100 + 30 * i for i in range(6)]


def test_benches_ordered_top_to_bottom():
    rows, centers = _rows_at([400, 430, 100, 130])
    benches = group_rows_into_benches(rows, REP, 800, 600, 2, centers)
    assert [b.valid for b in benches] == [True, True]
    assert benches[0].rows[0].point[1] == 100


# -- gaps (band equation) --------------------------------------------------


def _positions(spacings):
    return np.concatenate([[0.0], np.cumsum(spacings)])


def test_uniform_row_no_candidates():
    row, c = row_line(_positions([100] * 6))
    assert find_gap_candidates(row, c) == []
    assert row.d_med == 100


def test_candidate_inside_band():
    row, c = row_line(_positions([100, 100, 100, 150, 100, 100]))
    (k,) = find_gap_candidates(row, c)
    assert (k.left_module, k.right_module) == (3, 4)
    assert np.allclose(k.midpoint, [375.0, 0.0])


def test_candidate_above_band():
    row, c = row_line(_positions([100, 100, 100, 185, 100, 100]))
    assert find_gap_candidates(row, c) == []


@settings(max_examples=500, deadline=None)
@given(st.floats(0.0, 20.0))
def test_gap_and_missing_bands_disjoint(ratio):
    d = ratio * 100.0
    row, c = row_line(_positions([100.0] * 5 + [d]))
    is_gap = any(k.right_module == 6 for k in find_gap_candidates(row, c, 0.1))
    assert row.d_med == 100.0
    assert not (is_gap and missing_count(d, 100.0, 0.1) > 0)


def test_bands_adjacent_at_one_point_eight():
    row, c = row_line(_positions([100.0] * 5 + [179.999]))
    assert len(find_gap_candidates(row, c)) == 1
    assert missing_count(179.999, 100.0) == 0
    assert missing_count(180.001, 100.0) == 1
    row, c = row_line(_positions([100.0] * 5 + [180.0]))
    assert find_gap_candidates(row, c) == [] and missing_count(180.0, 100.0) == 0


def test_row_spacing_fallback():
    # two unequal gaps around one ordinary spacing: the median lacks support
    d = np.array([130.0, 100.0, 170.0])
    assert row_spacing(d, 0.1, fallback=100.0) == 100.0
    assert row_spacing(np.array([100.0, 101.0, 150.0]), 0.1, fallback=90.0) == 101.0
    assert row_spacing(np.array([150.0]), 0.1, fallback=100.0) == 100.0
    assert math.isnan(row_spacing(np.empty(0)))


# -- hypotheses (missing-count equation) -----------------------------------


def test_two_hypotheses():
    row, c = row_line([0, 300])
    hyps = hypothesize_missing(row, c, 100.0)
    assert [h.slot for h in hyps] == [1, 2]
    assert np.allclose([h.center[0] for h in hyps], [100, 200])


def test_no_hypothesis_for_normal_spacing():
    row, c = row_line([0, 100])
    assert hypothesize_missing(row, c, 100.0) == []


def test_no_hypothesis_beyond_cap():
    row, c = row_line([0, 1000])
    assert hypothesize_missing(row, c, 100.0, n_max=8) == []
    assert missing_count(1000, 100, 0.1, 9) == 9


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(60, 700), min_size=1, max_size=8))
def test_hypotheses_strictly_interior(spacings):
    xs = _positions(spacings)
    row, c = row_line(xs)
    for h in hypothesize_missing(row, c, 100.0):
        k = row.inliers.index(h.after)
        assert xs[k] < h.center[0] < xs[k + 1]
        assert all(abs(h.center[0] - x) > 1e-9 for x in xs)


# -- gap classification ----------------------------------------------------


def _gap_fixture(candidate_lum, normal_lum=140):
    """Row of boxes 50 px apart (10 px transitions) with one 75 px gap."""
    xs = [40, 90, 140, 190, 265, 315, 365]
    boxes = {i: OrientedBox(x, 50, 40, 24, 0) for i, x in enumerate(xs)}
    row, centers = row_line(xs, y=50)
    row.d_med = 50.0
    pix = np.full((100, 420, 3), normal_lum, np.uint8)
    center, u, half, hh = transition_patch(boxes[3], boxes[4], REP)
    x0, x1 = int(center[0] - half), int(math.ceil(center[0] + half))
    pix[:, x0:x1] = candidate_lum
    cand = GapKeypoint(0, 3, 4, 0.5 * (centers[3] + centers[4]))
    return cand, ImageRaster(420, 100, pix), row, boxes


def test_classify_without_image():
    cand, _, row, boxes = _gap_fixture(60)
    assert classify_gap(cand, None, row, boxes, REP) == "bench_gap"


def test_classify_dark_gap():
    cand, img, row, boxes = _gap_fixture(60)
    assert classify_gap(cand, img, row, boxes, REP, 0.7, [(3, 4)]) == "bench_gap"


def test_classify_bright_candidate_rejected():
    cand, img, row, boxes = _gap_fixture(130)
    assert classify_gap(cand, img, row, boxes, REP, 0.7, [(3, 4)]) == "rejected"


# -- full frame ------------------------------------------------------------


def test_empty_frame():
    s = build_structure("f", [], None, 800, 600, StructureConfig(rows_per_bench=2))
    assert s.benches == [] and s.sectors == [] and s.keypoints == []


def test_one_gap_two_sectors():
    xs = [20 + 50 * i for i in range(5)] + [20 + 50 * 4 + 72 + 50 * i for i in range(5)]
    ds = dets_at([(x, 300) for x in xs])
    s = build_structure("f", ds, OrientedBox(0, 0, 40, 24, 0), 800, 600,
                        StructureConfig(rows_per_bench=1))
    assert len(s.keypoints) == 1 and s.keypoints[0].kind == "bench_gap"
    assert [len(x.modules) for x in s.sectors] == [5, 5]
    assert s.sectors[0].left_bound == EDGE and s.sectors[0].right_bound == 0
    assert s.sectors[1].left_bound == 0 and s.sectors[1].right_bound == EDGE


def test_zero_noise_frames_match_truth(pp1_zero):
    tuples = pp1_zero.scene.plant.tuples
    for fid, s in pp1_zero.structures.items():
        truth = pp1_zero.scene.det_truth[fid]
        assert s.hypothesized == []
        gaps = {(k.row, k.left_module) for k in s.keypoints if k.kind == "bench_gap"}
        for r_idx, row in enumerate(s.rows):
            t = [tuples[truth[i]] for i in row.inliers]
            assert len({(x[0], x[3]) for x in t}) == 1  # one physical row
            for k, (a, b) in enumerate(zip(t[:-1], t[1:])):
                new_bench = a[1] != b[1]
                assert new_bench == ((r_idx, row.inliers[k]) in gaps)
                if not new_bench:
                    assert b[4] == a[4] + 1
        for sec in s.sectors:
            ids = {tuple(tuples[truth[i]][:4]) for _, i in sec.modules}
            assert len(ids) == 1


def test_sector_members_between_bounds(pp1_noisy):
    for s in pp1_noisy.structures.values():
        rows = s.rows
        for sec in s.sectors:
            row = rows[sec.row]
            t = [row.param(s.entry_center(e)) for e in sec.modules]
            assert t == sorted(t)
            if sec.left_bound != EDGE:
                assert row.param(s.keypoints[sec.left_bound].midpoint) < t[0]
            if sec.right_bound != EDGE:
                assert row.param(s.keypoints[sec.right_bound].midpoint) > t[-1]


# -- corrections -----------------------------------------------------------


def _corr_frame():
    xs = [20 + 50 * i for i in range(8)]
    ds = dets_at([(x, 300) for x in xs])
    s = build_structure("f", ds, OrientedBox(0, 0, 40, 24, 0), 800, 600,
                        StructureConfig(rows_per_bench=1))
    return {"f": s}


def test_manual_keypoint_splits_sector():
    st_ = _corr_frame()
    apply_corrections(st_, [AddKeypoint("f", 0, 2)])
    s = st_["f"]
    assert [len(x.modules) for x in s.sectors] == [3, 5]
    assert s.keypoints[-1].origin == "manual"


def test_delete_keypoint_merges():
    st_ = _corr_frame()
    apply_corrections(st_, [AddKeypoint("f", 0, 2), DeleteKeypoint("f", 0)])
    assert [len(x.modules) for x in st_["f"].sectors] == [8]


def test_add_and_delete_module():
    st_ = _corr_frame()
    apply_corrections(st_, [DeleteModule("f", 3)])
    assert [i for _, i in st_["f"].sectors[0].modules] == [0, 1, 2, 4, 5, 6, 7]
    apply_corrections(st_, [AddModule("f", (170.0, 300.0), 0)])
    s = st_["f"]
    assert s.sources[8] == "manual"
    assert [i for _, i in s.sectors[0].modules] == [0, 1, 2, 8, 4, 5, 6, 7]


def test_correction_bad_index():
    with pytest.raises(IndexError):
        apply_corrections(_corr_frame(), [AddKeypoint("f", 3, 0)])


def test_structure_roundtrip(pp1_noisy):
    from pvmap.structure import ImageStructure

    for s in list(pp1_noisy.structures.values())[:5]:
        assert ImageStructure.from_dict(s.to_dict()).to_dict() == s.to_dict()


@settings(max_examples=50, deadline=None)
@given(st.floats(50, 400), st.floats(1.1, 1.79))
def test_synthetic_gap_found_at_any_scale(pitch, gap):
    assume(1.1 + 1e-6 < gap < 1.8 - 1e-6)
    xs = list(_positions([pitch] * 4 + [gap * pitch] + [pitch] * 4))
    row, c = row_line(xs)
    (k,) = find_gap_candidates(row, c)
    assert (k.left_module, k.right_module) == (4, 5)
