import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cadtwin.geometry import Pose6D, icosphere, rot6d_to_matrix
from cadtwin.lidar import LidarPattern, PointCloud, simulate_sweep
from cadtwin.metrics import (ImageMetrics, gaussian_window, hausdorff, lidar_eval, masked_image_metrics, mean_metrics,
                             psnr_from_mse, ssim_naive, symmetric_chamfer)


def test_identical_images():
    rng = np.random.default_rng(0)
    img = rng.random((24, 24, 3))
    m = masked_image_metrics(img, img, np.ones((24, 24)))
    assert m.mse == 0.0 and math.isinf(m.psnr) and m.ssim == pytest.approx(1.0, abs=1e-12)
    assert m.to_dict()["psnr"] == "inf"


def test_psnr_known_value():
    a, b = np.zeros((8, 8, 3)), np.full((8, 8, 3), 0.5)
    m = masked_image_metrics(a, b, np.ones((8, 8)))
    assert m.mse == 0.25 and m.psnr == pytest.approx(10 * math.log10(4), abs=1e-12)
    assert psnr_from_mse(0.01) == pytest.approx(20.0)


def test_metrics_only_see_the_mask():
    rng = np.random.default_rng(1)
    a = rng.random((20, 20, 3))
    b = a.copy()
    b[:, :10] = 0.0
    mask = np.zeros((20, 20))
    mask[:, 12:] = 1
    assert masked_image_metrics(a, b, mask).mse == 0.0


def test_ssim_matches_naive_windows():
    rng = np.random.default_rng(2)
    a = rng.random((30, 28, 3))
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    mask = np.zeros((30, 28))
    mask[5:25, 8:22] = 1
    assert masked_image_metrics(a, b, mask).ssim == pytest.approx(ssim_naive(a, b, mask), abs=1e-6)


def test_window_normalized():
    w = gaussian_window()
    assert w.shape == (11, 11) and w.sum() == pytest.approx(1.0) and np.allclose(w, w.T)


def test_metric_errors():
    with pytest.raises(ValueError):
        masked_image_metrics(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), np.zeros((4, 4)))
    with pytest.raises(ValueError):
        masked_image_metrics(np.zeros((4, 4, 3)), np.zeros((5, 4, 3)), np.ones((4, 4)))
    with pytest.raises(ValueError):
        mean_metrics([])


def test_mean_metrics():
    m = mean_metrics([ImageMetrics(0.1, 10.0, 0.5), ImageMetrics(0.3, 20.0, 0.7)])
    assert (m.mse, m.psnr, m.ssim) == pytest.approx((0.2, 15.0, 0.6))


def _sphere_sweep(mesh):
    pat = LidarPattern(np.radians(np.linspace(-12, 12, 20)), np.radians(1.0), [Pose6D(translation=[-5.0, 0, 0])])
    return simulate_sweep(mesh, pat)


def test_lidar_eval_on_generating_surface():
    m = icosphere(3)
    cloud = _sphere_sweep(m)
    r = lidar_eval(m, cloud)
    assert r.hit_rate == 1.0 and r.l2_error < 1e-6 and r.n_rays == len(cloud)
    assert r.chamfer < 1e-12 and r.hausdorff < 1e-6


def test_lidar_eval_shrunk_sphere_hit_rate():
    # rays aimed at the unit sphere hit a sphere of radius s iff their distance to the centre is below s
    big = icosphere(4)
    cloud = _sphere_sweep(big)
    s = 0.8
    small = big.with_vertices(big.vertices * s)
    o, p = cloud.ray_origin, cloud.points
    d = (p - o) / np.linalg.norm(p - o, axis=1, keepdims=True)
    perp = np.linalg.norm(np.cross(-o, d), axis=1)
    expect = (perp < s).mean()
    r = lidar_eval(small, cloud)
    assert 0.2 < expect < 0.9
    assert r.hit_rate == pytest.approx(expect, abs=0.02)
    assert r.l2_error > 0.05


def test_lidar_eval_needs_origins():
    with pytest.raises(ValueError):
        lidar_eval(icosphere(1), PointCloud([[1.0, 0, 0]]))
    empty = lidar_eval(icosphere(1), PointCloud.empty())
    assert empty.hit_rate == 0.0 and empty.n_rays == 0


def test_chamfer_hausdorff_self_zero():
    p = np.random.default_rng(3).standard_normal((100, 3))
    assert symmetric_chamfer(p, p) == 0.0 and hausdorff(p, p) == 0.0
    assert math.isinf(symmetric_chamfer(p, np.zeros((0, 3))))


def test_chamfer_hausdorff_example():
    a, b = np.zeros((1, 3)), np.array([[1.0, 0, 0], [3.0, 0, 0]])
    # a->b: 1; b->a: (1 + 9) / 2
    assert symmetric_chamfer(a, b) == pytest.approx(0.5 * (1 + 5))
    assert hausdorff(a, b) == 3.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_point_metrics_symmetric_and_rigid_invariant(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((30, 3)), rng.standard_normal((25, 3))
    r = rot6d_to_matrix(rng.standard_normal(6))
    tr = rng.standard_normal(3)
    assert symmetric_chamfer(a, b) == pytest.approx(symmetric_chamfer(b, a), rel=1e-12)
    assert hausdorff(a, b) == hausdorff(b, a)
    assert symmetric_chamfer(a @ r.T + tr, b @ r.T + tr) == pytest.approx(symmetric_chamfer(a, b), rel=1e-9)
    assert symmetric_chamfer(a, b) >= 0 and hausdorff(a, b) ** 2 >= symmetric_chamfer(a, b)
