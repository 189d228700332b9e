import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from pvmap.lift3d import (CloudIndex, LiftedStructure, NoIntersection, Ray, lift_structure,
                          pixel_ray, raycast_cloud)
from pvmap.scene_io import CameraFrame, PointCloud
from pvmap.spatial import brute_ray_nearest
from pvmap.structure import ImageStructure, Sector


def _frame(R=np.eye(3), center=(0.0, 0.0, 100.0), f=500.0):
    return CameraFrame("f", 400, 300, f, 200.0, 150.0, R, np.array(center))


def _cloud(pos, normals=None):
    pos = np.asarray(pos, float).reshape(-1, 3)
    nrm = np.tile([0.0, 0.0, 1.0], (len(pos), 1)) if normals is None else normals
    return PointCloud(pos, nrm, np.zeros((len(pos), 3)))


def test_principal_point_ray():
    r = pixel_ray(_frame(), (200.0, 150.0))
    assert np.allclose(r.direction, [0, 0, -1]) and np.array_equal(r.origin, [0, 0, 100])


def test_focal_offset_is_45_degrees():
    r = pixel_ray(_frame(), (200.0 + 500.0, 150.0))
    assert np.allclose(r.direction, [1 / math.sqrt(2), 0, -1 / math.sqrt(2)], atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.floats(-0.3, 0.3), st.floats(-0.3, 0.3), st.floats(-math.pi, math.pi),
       st.floats(-20, 20), st.floats(-20, 20), st.floats(-3, 3))
def test_projection_roundtrip(rx, ry, rz, x, y, z):
    R = Rotation.from_euler("xyz", [rx, ry, rz]).as_matrix()
    fr = _frame(R, (1.0, -2.0, 80.0), 3000.0)
    X = np.array([x, y, z])
    uv = fr.project(X)
    ray = pixel_ray(fr, uv)
    rel = X - ray.origin
    perp = rel - np.dot(rel, ray.direction) * ray.direction
    assert np.linalg.norm(perp) < 1e-9
    assert np.linalg.norm(ray.direction) == pytest.approx(1.0, abs=1e-15)


def test_single_point_cloud():
    idx = CloudIndex(_cloud([[0.0, 0.0, 0.0]]))
    s = raycast_cloud(Ray(np.array([0, 0, 10.0]), np.array([0, 0, -1.0])), idx, k=5)
    assert np.array_equal(s.position, [0, 0, 0]) and s.residual == 0.0 and s.support == 1


def test_k1_is_minimum_distance_point():
    rng = np.random.default_rng(1)
    pts = rng.uniform(-5, 5, (3000, 3))
    idx = CloudIndex(_cloud(pts))
    for _ in range(50):
        o = np.array([*rng.uniform(-2, 2, 2), 30.0])
        d = np.array([*rng.normal(0, 0.05, 2), -1.0])
        d /= np.linalg.norm(d)
        want, dist, _ = brute_ray_nearest(pts, o, d, 0.5)
        if want < 0:
            with pytest.raises(NoIntersection):
                raycast_cloud(Ray(o, d), idx, k=1)
            continue
        s = raycast_cloud(Ray(o, d), idx, k=1)
        assert np.array_equal(s.position, pts[want]) and s.residual == pytest.approx(dist, abs=0)


def test_plane_with_jitter():
    rng = np.random.default_rng(2)
    g = np.arange(-3, 3, 0.1)
    xx, yy = np.meshgrid(g, g)
    n_true = np.array([0.0, -math.sin(0.35), math.cos(0.35)])
    pts = np.column_stack([xx.ravel(), yy.ravel(), np.tan(0.35) * yy.ravel()])
    pts += rng.normal(0, 0.02, pts.shape)
    nrm = np.tile(n_true, (len(pts), 1)) + rng.normal(0, 0.01, pts.shape)
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    idx = CloudIndex(_cloud(pts, nrm))
    for x, y in [(0, 0), (1.3, -0.7), (-2, 2)]:
        s = raycast_cloud(Ray(np.array([x, y, 50.0]), np.array([0, 0, -1.0])), idx)
        assert abs(s.position[2] - math.tan(0.35) * s.position[1]) < 0.02
        assert math.degrees(math.acos(min(1.0, float(np.dot(s.normal, n_true))))) < 2.0


def test_ray_missing_cloud():
    idx = CloudIndex(_cloud([[3.0, 0.0, 0.0]]))
    with pytest.raises(NoIntersection):
        raycast_cloud(Ray(np.array([0, 0, 10.0]), np.array([0, 0, -1.0])), idx, max_residual=0.5)


def test_points_behind_camera_ignored():
    idx = CloudIndex(_cloud([[0.0, 0.0, 20.0]]))
    with pytest.raises(NoIntersection):
        raycast_cloud(Ray(np.array([0, 0, 10.0]), np.array([0, 0, -1.0])), idx)


@settings(max_examples=25, deadline=None)
@given(st.floats(-math.pi, math.pi), st.floats(-1, 1), st.floats(-1, 1),
       st.tuples(st.floats(-50, 50), st.floats(-50, 50), st.floats(-50, 50)))
def test_raycast_rigid_invariance(a, b, c, t):
    rng = np.random.default_rng(7)
    pts = rng.uniform(-5, 5, (800, 3))
    nrm = rng.normal(size=(800, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    o, d = np.array([0.3, -0.2, 20.0]), np.array([0.01, 0.02, -1.0])
    d /= np.linalg.norm(d)
    R = Rotation.from_euler("zyx", [a, b, c]).as_matrix()
    t = np.array(t)
    s0 = raycast_cloud(Ray(o, d), CloudIndex(_cloud(pts, nrm)), max_residual=2.0)
    s1 = raycast_cloud(Ray(R @ o + t, R @ d), CloudIndex(_cloud(pts @ R.T + t, nrm @ R.T)),
                       max_residual=2.0)
    assert np.allclose(s1.position, R @ s0.position + t, atol=1e-9 * 60)
    assert np.allclose(s1.normal, R @ s0.normal, atol=1e-9)
    assert s1.residual == pytest.approx(s0.residual, rel=1e-9, abs=1e-12)


def test_zero_noise_lift_matches_truth(pp1_zero):
    truth = pp1_zero.scene.plant.positions
    worst = 0.0
    for fid, lf in pp1_zero.lifted.items():
        ids = pp1_zero.scene.det_truth[fid]
        assert lf.unlifted == []
        for i, s in lf.modules.items():
            worst = max(worst, float(np.linalg.norm(s.position - truth[ids[i]])))
    assert worst < 1e-6


def test_keypoint_lift_is_midpoint_raycast(pp1_zero):
    fid, s = next((k, v) for k, v in pp1_zero.structures.items() if v.keypoints)
    frame = next(f for f in pp1_zero.scene.frames if f.frame_id == fid)
    idx = CloudIndex(pp1_zero.scene.cloud)
    lf = pp1_zero.lifted[fid]
    for k_idx, kp in enumerate(s.keypoints):
        want = raycast_cloud(pixel_ray(frame, kp.midpoint), idx)
        assert np.array_equal(lf.keypoints[k_idx].position, want.position)


def test_unlifted_recorded():
    frame = _frame()
    s = ImageStructure("f", 400, 300)
    s.centers = {0: np.array([200.0, 150.0])}
    s.sectors = []

    s.sectors = [Sector(0, [("det", 0)], None, None)]
    lf = lift_structure(s, frame, CloudIndex(_cloud([[10.0, 10.0, 0.0]])))
    assert lf.unlifted == [("det", 0)] and lf.modules == {}


def test_lift_order_independent(pp1_noisy):
    fid = next(iter(pp1_noisy.structures))
    s = pp1_noisy.structures[fid]
    frame = next(f for f in pp1_noisy.scene.frames if f.frame_id == fid)
    idx = CloudIndex(pp1_noisy.scene.cloud)
    s2 = ImageStructure.from_dict(s.to_dict())
    s2.sectors = s2.sectors[::-1]
    s2.keypoints = list(s2.keypoints)
    a, b = lift_structure(s, frame, idx), lift_structure(s2, frame, idx)
    assert a.to_dict() == b.to_dict()
    assert LiftedStructure.from_dict(a.to_dict()).to_dict() == a.to_dict()


def test_frame_mismatch():
    with pytest.raises(ValueError):
        lift_structure(ImageStructure("g", 4, 3), _frame(), CloudIndex(_cloud([[0, 0, 0]])))
