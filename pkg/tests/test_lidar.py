import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cadtwin.geometry import Pose6D, TriMesh, icosphere, rot6d_to_matrix
from cadtwin.lidar import (LidarPattern, PointCloud, build_bvh, cast_ray, cast_rays, cast_rays_brute, default_pattern,
                           load_cloud, occluded_by, retrieve_intensity, save_cloud, simulate_sweep, voxel_downsample)

from conftest import random_mesh


def plane_x(x0=1.0, half=100.0):
    v = [[x0, -half, -half], [x0, half, -half], [x0, half, half], [x0, -half, half]]
    return TriMesh(v, [[0, 1, 2], [0, 2, 3]])


def test_cast_ray_plane():
    hit = cast_ray(build_bvh(plane_x(1.0)), [0, 0, 0], [1, 0, 0])
    assert hit is not None and hit[0] == pytest.approx(1.0, abs=1e-12)
    assert hit[2].sum() == pytest.approx(1.0)


def test_cast_ray_parallel_and_behind_miss():
    bvh = build_bvh(plane_x(1.0))
    assert cast_ray(bvh, [0, 0, 0], [0, 1, 0]) is None
    assert cast_ray(bvh, [0, 0, 0], [-1, 0, 0]) is None
    assert cast_ray(bvh, [0, 0, 0], [1, 0, 0], max_range=0.5) is None


def test_bvh_matches_brute_force():
    rng = np.random.default_rng(0)
    m = random_mesh(rng, level=3, noise=0.2)
    o = rng.standard_normal((10_000, 3)) * 3
    d = rng.standard_normal((10_000, 3)) * 0.7 - o  # aim roughly at the mesh
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    a = cast_rays(build_bvh(m), o, d)
    b = cast_rays_brute(m.vertices[m.faces], o, d)
    assert np.array_equal(a.face, b.face)
    h = a.hit
    assert h.sum() > 3000
    assert np.allclose(a.t[h], b.t[h], atol=1e-12) and np.isinf(a.t[~h]).all()


def test_empty_mesh_gives_empty_sweep():
    empty = TriMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    pat = LidarPattern(np.radians([-5.0, 5.0]), np.radians(10.0))
    assert len(simulate_sweep(empty, pat)) == 0


def test_plane_ranges():
    pat = LidarPattern(np.radians(np.linspace(-20, 10, 16)), np.radians(2.0))
    cloud = simulate_sweep(plane_x(10.0, 1000.0), pat)
    d = cloud.points - cloud.ray_origin
    rng_ = np.linalg.norm(d, axis=1)
    u = d / rng_[:, None]
    # range to a plane at distance 10 is 10 / cos of the angle to its normal
    assert np.abs(rng_ - 10.0 / u[:, 0]).max() < 1e-6
    assert np.abs(cloud.points[:, 0] - 10.0).max() < 1e-9
    # every direction reaching the plane within the sensor range hits
    assert len(cloud) == int((pat.local_directions()[:, 0] > 10.0 / pat.max_range).sum())


def test_sweep_points_lie_on_surface():
    m = icosphere(3)
    pat = LidarPattern(np.radians(np.linspace(-30, 30, 12)), np.radians(3.0), [Pose6D(translation=[-4.0, 0, 0.3])])
    cloud = simulate_sweep(m, pat)
    r = np.linalg.norm(cloud.points, axis=1)
    assert len(cloud) > 30
    assert r.max() <= 1.0 + 1e-9 and r.min() > 0.98  # inscribed polyhedron
    assert (cloud.frame_id == 0).all()


def test_occlusion_drops_hidden_background():
    # sensor at origin, actor sphere at x=5, background wall points at x=10
    sphere = icosphere(2).with_vertices(icosphere(2).vertices + [5.0, 0, 0])
    ys, zs = np.meshgrid(np.linspace(-3, 3, 13), np.linspace(-3, 3, 13))
    wall = np.c_[np.full(ys.size, 10.0), ys.ravel(), zs.ravel()]
    bg = PointCloud(wall, np.full(len(wall), 0.5), np.zeros(3))
    hidden = occluded_by(build_bvh(sphere), bg)
    ang = np.arctan2(np.hypot(wall[:, 1], wall[:, 2]), wall[:, 0])
    assert hidden[ang < np.arcsin(0.9 / 5.0)].all()
    assert not hidden[ang > np.arcsin(1.0 / 5.0)].any()
    pat = LidarPattern(np.radians([0.0]), np.radians(1.0))
    merged = simulate_sweep(sphere, pat, background=bg)
    assert len(merged) == int((merged.frame_id == 0).sum()) + int((~hidden).sum())
    assert (merged.frame_id[merged.frame_id < 0] == -1).all()


def test_default_pattern_shape():
    pat = default_pattern(azimuth_step_deg=1.0)
    assert len(pat.beams) == 64 and pat.n_azimuth == 360
    assert LidarPattern.from_dict(pat.to_dict()).beams == pytest.approx(pat.beams)


def test_retrieve_intensity_uniform():
    rng = np.random.default_rng(1)
    cloud = PointCloud(rng.standard_normal((100, 3)), np.full(100, 0.7))
    assert np.allclose(retrieve_intensity(icosphere(1), cloud), 0.7)


def test_retrieve_intensity_knn_oracle():
    rng = np.random.default_rng(2)
    m = icosphere(1)
    pts = rng.standard_normal((300, 3))
    it = rng.random(300)
    got = retrieve_intensity(m, PointCloud(pts, it), k=10)
    for i, v in enumerate(m.vertices):
        near = np.argsort(np.linalg.norm(pts - v, axis=1))[:10]
        assert got[i] == pytest.approx(it[near].mean(), abs=1e-12)


def test_retrieve_intensity_fewer_points_than_k():
    cloud = PointCloud([[1, 0, 0], [0, 1, 0], [0, 0, 5.0], [1, 1, 1], [2, 2, 2]], [0.1, 0.2, 0.3, 0.4, 0.5])
    assert np.allclose(retrieve_intensity(icosphere(0), cloud, k=10), 0.3)


def test_retrieve_intensity_empty_errors():
    with pytest.raises(ValueError):
        retrieve_intensity(icosphere(0), PointCloud.empty())


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_retrieve_intensity_rigid_invariant(seed):
    rng = np.random.default_rng(seed)
    m = icosphere(1)
    cloud = PointCloud(rng.standard_normal((80, 3)), rng.random(80))
    pose = Pose6D(rot6d_to_matrix(rng.standard_normal(6))[:, :2].T.reshape(-1), rng.standard_normal(3))
    moved = m.with_vertices(pose.apply(m.vertices))
    assert np.allclose(retrieve_intensity(m, cloud), retrieve_intensity(moved, cloud.transformed(pose)), atol=1e-12)


def test_voxel_downsample_examples():
    c = PointCloud([[0.1, 0.1, 0.1], [0.2, 0.3, 0.1], [1.5, 0, 0]], [0.2, 0.4, 1.0])
    down, held = voxel_downsample(c, 1.0)
    assert len(down) == 2 and held.tolist() == [1]
    assert np.allclose(down.points[0], [0.15, 0.2, 0.1]) and down.intensity[0] == pytest.approx(0.3)
    assert len(voxel_downsample(c, 100.0)[0]) == 1
    with pytest.raises(ValueError):
        voxel_downsample(c, 0.0)


def test_voxel_downsample_hash_oracle():
    rng = np.random.default_rng(3)
    pts = rng.random((2000, 3)) * 5
    down, held = voxel_downsample(PointCloud(pts), 0.5)
    groups = {}
    for i, p in enumerate(pts):
        groups.setdefault(tuple(np.floor(p / 0.5).astype(int)), []).append(i)
    assert len(down) == len(groups)
    cent = {tuple(np.floor(pts[g[0]] / 0.5).astype(int)): pts[g].mean(0) for g in groups.values()}
    for p in down.points:
        assert np.allclose(p, cent[tuple(np.floor(p / 0.5).astype(int))], atol=1e-12)
    assert len(held) == len(pts) - len(groups)


def test_cloud_ply_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    c = PointCloud(rng.standard_normal((20, 3)), rng.random(20), rng.standard_normal((20, 3)), np.arange(20))
    save_cloud(tmp_path / "c.ply", c, {"note": 1})
    back = load_cloud(tmp_path / "c.ply")
    assert np.array_equal(back.points, c.points) and np.array_equal(back.intensity, c.intensity)
    assert np.array_equal(back.ray_origin, c.ray_origin) and np.array_equal(back.frame_id, c.frame_id)


def test_cloud_validation():
    with pytest.raises(ValueError):
        PointCloud([[0, 0, np.nan]])
    with pytest.raises(ValueError):
        PointCloud([[0, 0, 0]], [1.5])
