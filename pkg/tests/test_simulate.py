import json
import math
from dataclasses import replace

import numpy as np
import pytest
from shapely.geometry import box

from pvmap import scene_io
from pvmap.simulate import (GAP_RGB, MODULE_RGB, PAPER_NOISE, PP1_DESK, PP2_DESK, CameraParams,
                            NoiseProfile, PlantParams, exact_boxes, export_scene, generate_plant,
                            plan_cameras, projection_counts, simulate_preset, truth_dict,
                            visible_modules, warp_field)

TINY = PlantParams(n_lines=1, benches_per_line=1, rows_per_bench=1, modules_per_row=3,
                   terrain_slope=(0.0, 0.0), terrain_amplitude=0.0)


@pytest.fixture(scope="module")
def zero_scene():
    return simulate_preset("pp1-desk", seed=0, noise="zero-noise")


# -- plant -----------------------------------------------------------------


def test_tiny_plant_collinear():
    plant = generate_plant(TINY)
    assert len(plant) == 3
    d = np.diff(plant.positions, axis=0)
    assert np.allclose(np.linalg.norm(d, axis=1), TINY.pitch)
    assert np.linalg.norm(np.cross(d[0], d[1])) < 1e-12


def test_preset_shapes():
    pp1, pp2 = generate_plant(PP1_DESK), generate_plant(PP2_DESK)
    assert (PP1_DESK.n_lines, PP1_DESK.benches_per_line, PP1_DESK.rows_per_bench) == (3, 9, 2)
    assert PP2_DESK.rows_per_bench == 6
    for plant in (pp1, pp2):
        p = plant.params
        assert len(plant) == p.n_lines * p.benches_per_line * p.rows_per_bench * p.modules_per_row
        assert len({tuple(t) for t in plant.tuples}) == len(plant)


def test_gap_width_rule():
    for gf in (1.05, 1.1, 1.8, 2.5):
        with pytest.raises(ValueError):
            generate_plant(replace(TINY, gap_factor=gf))
    generate_plant(replace(TINY, gap_factor=1.45))


def test_bad_counts():
    with pytest.raises(ValueError):
        generate_plant(replace(TINY, modules_per_row=0))
    with pytest.raises(ValueError):
        generate_plant(replace(TINY, module_along=0.0))


def test_noise_profile_validation():
    with pytest.raises(ValueError):
        NoiseProfile(dropout=1.5)
    with pytest.raises(ValueError):
        NoiseProfile(warp_amplitude=(0.1, -0.1, 0.0))


def test_modules_on_tilted_planes():
    plant = generate_plant(PP1_DESK)
    tilt = math.degrees(math.acos(plant.normals[0] @ [0, 0, 1]))
    assert tilt == pytest.approx(PP1_DESK.tilt_deg, abs=1e-9)
    assert np.allclose(np.linalg.norm(plant.normals, axis=1), 1.0)


# -- cameras ---------------------------------------------------------------


def test_small_plant_one_frame():
    assert len(plan_cameras(generate_plant(TINY))) == 1


def test_footprint_width():
    cam = CameraParams(altitude=80.0, focal=3000.0, width=4000, height=3000)
    (f,) = plan_cameras(generate_plant(TINY), cam)
    half = 4000 * 80.0 / 3000.0 / 2
    assert 2 * half == pytest.approx(106.6667, abs=1e-3)
    ground = f.center[2] - 80.0
    u_lo = f.project(np.array([f.center[0] - half, f.center[1], ground]))[0]
    u_hi = f.project(np.array([f.center[0] + half, f.center[1], ground]))[0]
    assert u_lo == pytest.approx(0.0, abs=1e-9) and u_hi == pytest.approx(4000.0, abs=1e-9)


@pytest.mark.parametrize("overlap", [0.5, 0.6, 0.8])
def test_adjacent_overlap(overlap):
    cam = CameraParams(overlap=overlap)
    frames = plan_cameras(generate_plant(replace(PP1_DESK, n_lines=6)), cam)
    fw, fh = cam.width * cam.altitude / cam.focal, cam.height * cam.altitude / cam.focal

    def rect(f):
        x, y = f.center[:2]
        return box(x - fw / 2, y - fh / 2, x + fw / 2, y + fh / 2)

    xs = sorted({round(float(f.center[0]), 6) for f in frames})
    ys = sorted({round(float(f.center[1]), 6) for f in frames})
    assert len(xs) > 1 and len(ys) > 1
    by_pos = {(round(float(f.center[0]), 6), round(float(f.center[1]), 6)): f for f in frames}
    for (x, y), f in by_pos.items():
        for nb in ((_next(xs, x), y), (x, _next(ys, y))):
            if None in nb:
                continue
            share = rect(f).intersection(rect(by_pos[nb])).area / rect(f).area
            assert share >= overlap - 1e-9


def _next(vals, v):
    k = vals.index(v)
    return vals[k + 1] if k + 1 < len(vals) else None


def test_frames_north_up_and_ordered():
    frames = plan_cameras(generate_plant(PP1_DESK))
    assert all(np.array_equal(f.rotation, np.eye(3)) for f in frames)
    ys = [f.center[1] for f in frames]
    assert ys == sorted(ys, reverse=True)
    assert [f.frame_id for f in frames] == [f"f{k:03d}" for k in range(len(frames))]


def test_bad_overlap():
    with pytest.raises(ValueError):
        plan_cameras(generate_plant(TINY), CameraParams(overlap=1.0))


def test_every_module_covered():
    scene = simulate_preset("pp1-desk", images=False)
    assert projection_counts(scene.plant, scene.frames).min() >= 2


# -- rendering -------------------------------------------------------------


def test_zero_noise_boxes_exact(zero_scene):
    for f in zero_scene.frames[:6]:
        ctr, w, h, _ = exact_boxes(zero_scene.plant, f)
        ids = zero_scene.det_truth[f.frame_id]
        for d, t in zip(zero_scene.detections[f.frame_id], ids):
            assert (d.box.cx, d.box.cy) == (ctr[t, 0], ctr[t, 1])
            assert (d.box.w, d.box.h) == (w[t], h[t])


def test_zero_noise_cloud_on_surfaces(zero_scene):
    lab = zero_scene.cloud_labels
    pts = zero_scene.cloud.positions
    mod = lab >= 0
    rel = pts[mod] - zero_scene.plant.positions[lab[mod]]
    dist = np.abs(np.einsum("ij,ij->i", rel, zero_scene.plant.normals[lab[mod]]))
    assert dist.max() < 1e-12
    ter = lab == -1
    z = zero_scene.plant.terrain(pts[ter, 0], pts[ter, 1])
    assert np.abs(pts[ter, 2] - z).max() < 1e-12


def test_every_detection_has_one_truth():
    scene = simulate_preset("pp1-desk", seed=4, noise="paper-noise", images=False)
    n = len(scene.plant)
    for fid, dets in scene.detections.items():
        ids = scene.det_truth[fid]
        assert len(ids) == len(dets)
        assert all(isinstance(t, int) and 0 <= t < n for t in ids)
        f = next(fr for fr in scene.frames if fr.frame_id == fid)
        vis = visible_modules(scene.plant, f)
        assert all(vis[t] for t in ids)


def test_dropout_rate():
    hit = total = 0
    for seed in range(3):
        scene = simulate_preset("pp1-desk", seed=seed, noise="paper-noise", images=False)
        for f in scene.frames:
            vis = int(visible_modules(scene.plant, f).sum())
            total += vis
            hit += len(set(scene.det_truth[f.frame_id]))
    rate = hit / total
    sigma = math.sqrt(0.985 * 0.015 / total)
    assert abs(rate - 0.985) < 4 * sigma


def test_images_have_dark_gaps(zero_scene):
    f = zero_scene.frames[0]
    img = zero_scene.images[f.frame_id].pixels
    quads = [q for q, _ in zero_scene.plant.gap_quads()]
    centers = [f.project(q.mean(axis=0)) for q in quads]
    inside = [c for c in centers if 0 <= c[0] < f.width and 0 <= c[1] < f.height]
    assert inside
    for u, v in inside:
        assert tuple(img[int(v), int(u)]) == GAP_RGB
    ctr, *_ = exact_boxes(zero_scene.plant, f)
    t = zero_scene.det_truth[f.frame_id][0]
    assert tuple(img[int(ctr[t, 1]), int(ctr[t, 0])]) == MODULE_RGB


# -- warp ------------------------------------------------------------------


def test_warp_bound_and_z_dominant():
    amp = (0.2, 0.2, 0.6)
    rng = np.random.default_rng(0)
    xy = rng.uniform(-500, 500, (20000, 2))
    worst = []
    for seed in range(5):
        w = warp_field(np.random.default_rng(seed), amp, 100.0)(xy)
        assert (np.abs(w) <= np.array(amp) + 1e-12).all()
        assert np.linalg.norm(w, axis=1).max() <= 0.69
        worst.append(np.abs(w).max(axis=0))
    worst = np.mean(worst, axis=0)
    assert worst[2] > worst[0] and worst[2] > worst[1]


def test_warp_smooth():
    amp, lam, h = np.array([0.2, 0.2, 0.6]), 100.0, 0.1
    w = warp_field(np.random.default_rng(3), amp, lam)
    xy = np.random.default_rng(1).uniform(-200, 200, (5000, 2))
    step = w(xy + [h, 0.0]) - w(xy)
    lip = 2 * math.pi * np.sum(np.array([0.5, 0.3, 0.2]) / (lam * np.array([1.0, 1.6, 2.3])))
    assert (np.abs(step) <= amp * lip * h + 1e-12).all()


def test_paper_noise_cloud_displacement():
    scene = simulate_preset("pp1-desk", seed=2, noise="paper-noise", images=False)
    lab = scene.cloud_labels
    ter = lab == -1
    pts = scene.cloud.positions[ter]
    dz = pts[:, 2] - scene.plant.terrain(pts[:, 0], pts[:, 1])
    # warp plus 4-sigma point noise
    assert np.abs(dz).max() <= 0.6 + 4 * PAPER_NOISE.cloud_noise[2] + 0.2


# -- export ----------------------------------------------------------------


def test_export_deterministic(tmp_path):
    a = export_scene(simulate_preset("pp2-desk", seed=3), tmp_path / "a")
    b = export_scene(simulate_preset("pp2-desk", seed=3), tmp_path / "b")
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_export_roundtrip(tmp_path):
    scene = simulate_preset("pp1-desk", seed=1, noise="paper-noise")
    out = export_scene(scene, tmp_path)
    frames = scene_io.load_camera_frames(out / "cameras.json")
    assert [f.frame_id for f in frames] == [f.frame_id for f in scene.frames]
    cloud = scene_io.load_point_cloud(out / "cloud.txt")
    assert np.array_equal(cloud.positions, scene.cloud.positions)
    dets = scene_io.load_detections(out / "detections.json")
    for fid, ds in scene.detections.items():
        assert [d.box for d in dets.get(fid, [])] == [d.box for d in ds]
    f0 = scene.frames[0].frame_id
    img = scene_io.load_image(out / "images" / f"{f0}.ppm")
    assert np.array_equal(img.pixels, scene.images[f0].pixels)
    truth = json.loads((out / "truth.json").read_text())
    assert len(truth["modules"]) == len(scene.plant)
    assert truth == json.loads(json.dumps(truth_dict(scene)))
    assert "structure.rows_per_bench = 2" in (out / "pipeline.cfg").read_text()


def test_unknown_preset():
    with pytest.raises(ValueError):
        simulate_preset("pp3")
    with pytest.raises(ValueError):
        simulate_preset("pp1-desk", noise="loud")
