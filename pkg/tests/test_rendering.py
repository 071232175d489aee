import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cadtwin.geometry import Pose6D, TriMesh, icosphere
from cadtwin.rendering import (AppearanceParams, Camera, Intrinsics, fibonacci_directions, project, rasterize,
                               render, render_torch, shade, shade_fused, shade_torch, specular_color, unproject)


def cam_identity(res=64, f=64.0):
    return Camera(Intrinsics(f, f, res / 2, res / 2, res, res))


def facing_triangle(pts) -> TriMesh:
    """Triangle oriented towards an identity camera (looking down +z)."""
    p = np.asarray(pts, dtype=np.float64)
    n = np.cross(p[1] - p[0], p[2] - p[0])
    faces = [[0, 1, 2]] if -(n @ p[0]) > 0 else [[0, 2, 1]]
    return TriMesh(p, faces)


def single_light(direction=(0.0, 0.0, -1.0), radiance=1.0, kd=0.8, roughness=1.0, metalness=0.0):
    d = np.asarray(direction, dtype=np.float64)
    tex = np.broadcast_to(np.asarray(kd, dtype=np.float64), (4, 4, 3)).copy()
    orm = np.zeros((4, 4, 3))
    orm[..., 1], orm[..., 2] = roughness, metalness
    return AppearanceParams(tex, orm, (d / np.linalg.norm(d))[None], np.full((1, 3), radiance))


# ---------------------------------------------------------------------------
# projection


def test_project_examples():
    c = Camera(Intrinsics(100.0, 100.0, 32.0, 24.0, 64, 48))
    pix, depth, ok = project(c, [0, 0, 1])
    assert np.array_equal(pix, [32.0, 24.0]) and depth == 1.0 and ok
    pix, depth, _ = project(c, [1, 0, 2])
    assert np.allclose(pix, [82.0, 24.0]) and depth == 2.0
    _, _, ok = project(c, [0, 0, -1])
    assert not ok


def test_unproject_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        c = Camera(Intrinsics(80.0, 90.0, 31.0, 29.0, 64, 64), Pose6D(rng.standard_normal(6), rng.standard_normal(3)))
        p = rng.standard_normal(3)
        xc = c.extrinsics.apply(p[None])[0]
        if xc[2] < 0.1:
            continue
        pix, depth, ok = project(c, p)
        assert np.abs(unproject(c, pix, depth) - p).max() < 1e-9


def test_intrinsics_validated():
    with pytest.raises(ValueError):
        Intrinsics(0.0, 1.0, 1.0, 1.0, 4, 4)
    with pytest.raises(ValueError):
        Intrinsics(1.0, 1.0, 5.0, 1.0, 4, 4)


# ---------------------------------------------------------------------------
# rasterization


def test_rasterize_inside_and_miss():
    tri = facing_triangle([[-0.5, -0.5, 2], [0.5, -0.5, 2], [0, 0.5, 2]])
    out = rasterize(tri, cam_identity(), tau=0.0)
    assert out.face_id[32, 32] == 0 and out.coverage[32, 32] == 1.0
    assert np.allclose(out.barycentric[32, 32].sum(), 1.0)
    assert out.face_id[0, 0] == -1 and out.coverage[0, 0] == 0 and out.depth[0, 0] == 0
    assert out.depth[32, 32] == pytest.approx(2.0)


def test_rasterize_large_triangle_matches_point_in_polygon():
    rng = np.random.default_rng(5)
    c = cam_identity(64)
    for _ in range(5):
        # screen-space vertices mapped back to z=3
        s = rng.uniform(-10, 74, (3, 2))
        pts = np.concatenate([(s - 32) / 64 * 3, np.full((3, 1), 3.0)], 1)
        tri = facing_triangle(pts)
        out = rasterize(tri, c, tau=0.0)
        a, b, q = s[tri.faces[0]]
        yy, xx = np.mgrid[0:64, 0:64] + 0.5
        # scanline oracle: same-sign edge functions
        e = [(b[0] - a[0]) * (yy - a[1]) - (b[1] - a[1]) * (xx - a[0]),
             (q[0] - b[0]) * (yy - b[1]) - (q[1] - b[1]) * (xx - b[0]),
             (a[0] - q[0]) * (yy - q[1]) - (a[1] - q[1]) * (xx - q[0])]
        inside = ((e[0] >= 0) & (e[1] >= 0) & (e[2] >= 0)) | ((e[0] <= 0) & (e[1] <= 0) & (e[2] <= 0))
        assert np.array_equal(out.coverage == 1.0, inside)
        assert np.array_equal(out.face_id >= 0, inside)


def test_backface_culled():
    p = np.array([[-1, -1, 2], [1, -1, 2], [0, 1, 2]], dtype=float)
    tri = facing_triangle(p)
    back = TriMesh(tri.vertices, tri.faces[:, ::-1])
    assert (rasterize(back, cam_identity(), 0.0).face_id == -1).all()


def test_depth_ties_lowest_face_id():
    p = [[-1, -1, 2], [1, -1, 2], [0, 1, 2]]
    tri = facing_triangle(p)
    two = TriMesh(np.concatenate([tri.vertices, tri.vertices]), np.concatenate([tri.faces, tri.faces + 3]))
    fid = rasterize(two, cam_identity(), 0.0).face_id
    assert set(np.unique(fid)) == {-1, 0}


def test_nearer_face_wins():
    far = facing_triangle([[-1, -1, 3], [1, -1, 3], [0, 1, 3]])
    near = facing_triangle([[-1, -1, 2], [1, -1, 2], [0, 1, 2]])
    m = TriMesh(np.concatenate([far.vertices, near.vertices]), np.concatenate([far.faces, near.faces + 3]))
    out = rasterize(m, cam_identity(), 0.0)
    assert out.face_id[32, 32] == 1 and out.depth[32, 32] == pytest.approx(2.0)


def test_mask_zero_where_depth_zero_at_tau0():
    m = icosphere(2)
    c = Camera.look_at(Intrinsics(50.0, 50.0, 24.0, 24.0, 48, 48), [0, -4, 1], [0, 0, 0])
    out = render(m, None, c, tau=0.0)
    assert np.array_equal(out.mask == 0, out.depth == 0)


def test_soft_mask_tau_consistency():
    m = icosphere(3)
    c = Camera.look_at(Intrinsics(60.0, 60.0, 32.0, 32.0, 64, 64), [0, -5, 0.5], [0, 0, 0])
    hard = render(m, None, c, tau=0.0).mask
    perim = np.pi * 2 * math.sqrt(hard.sum() / np.pi)
    for tau in (0.5, 1.0, 2.0):
        soft = render(m, None, c, tau=tau).mask
        assert ((soft >= 0) & (soft <= 1)).all()
        ratio = np.abs(soft - hard).sum() / (perim * tau)
        # a sigmoid profile integrates to 2 ln 2 tau per unit length of outline
        assert 0.5 < ratio < 2.5, ratio


def test_empty_mesh_renders_nothing():
    out = render(TriMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64)), None, cam_identity())
    assert (out.mask == 0).all() and (out.depth == 0).all()


def test_render_deterministic_across_threads():
    m = icosphere(3)
    c = Camera.look_at(Intrinsics(60.0, 60.0, 32.0, 32.0, 64, 64), [1, -5, 1.5], [0, 0, 0])
    app = AppearanceParams.uniform((0.6, 0.3, 0.2), 0.4, 0.3, n_dirs=16)
    prev = torch.get_num_threads()
    try:
        torch.set_num_threads(1)
        a = render(m, app, c, tau=1.0)
        torch.set_num_threads(2)
        b = render(m, app, c, tau=1.0)
    finally:
        torch.set_num_threads(prev)
    assert a.color.tobytes() == b.color.tobytes() and a.mask.tobytes() == b.mask.tobytes()


# ---------------------------------------------------------------------------
# shading


def test_shade_lambert_limit():
    kd = np.array([0.8, 0.5, 0.2])
    app = single_light((0, 0, 1), kd=kd)
    w = app.solid_angle
    n = np.array([[0.0, 0.0, 1.0]])
    out = shade(n, n, app, kd=kd, roughness=1.0, metalness=0.0, specular=False)
    assert np.allclose(out[0], kd / np.pi * w, atol=1e-15)
    # r = 1 GGX: D = 1/pi, G = 1, F = 0.04 at normal incidence -> 0.04 / (4 pi)
    out = shade(n, n, app, kd=kd, roughness=1.0, metalness=0.0)
    assert np.allclose(out[0], (kd / np.pi + 0.04 / (4 * np.pi)) * w, atol=1e-15)


def test_shade_black_without_light():
    app = AppearanceParams.uniform(radiance=(0, 0, 0))
    rng = np.random.default_rng(0)
    n = rng.standard_normal((10, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    assert (shade(n, n, app, kd=0.7, roughness=0.3, metalness=0.5) == 0).all()


def test_shade_metal_has_no_diffuse():
    kd = np.array([0.9, 0.6, 0.1])
    app = single_light((0, 0, 1), kd=kd)
    n = np.array([[0.0, 0.0, 1.0]])
    assert (shade(n, n, app, kd=kd, roughness=0.5, metalness=1.0, specular=False) == 0).all()
    f0 = specular_color(torch.tensor(kd), torch.tensor(1.0)).numpy()
    assert np.array_equal(f0, kd)
    assert np.allclose(specular_color(np.array([kd]), np.array([0.0]))[0], 0.04)
    # r = 1, normal incidence: spec = F0 * D G / (4 nv) = kd / (4 pi)
    out = shade(n, n, app, kd=kd, roughness=1.0, metalness=1.0)
    assert np.allclose(out[0], kd / (4 * np.pi) * app.solid_angle, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_lambert_energy_bound(seed):
    rng = np.random.default_rng(seed)
    n = rng.standard_normal((32, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    rad = rng.uniform(0, 3, (16, 3))
    app = AppearanceParams(np.ones((2, 2, 3)), np.zeros((2, 2, 3)), fibonacci_directions(16), rad)
    out = shade(n, n, app, kd=rng.uniform(0, 1, 3), roughness=0.5, metalness=rng.uniform(), specular=False)
    assert (out <= rad.sum(0) * app.solid_angle + 1e-12).all()


def test_fused_shading_matches_reference():
    rng = np.random.default_rng(1)
    p, e = 40, 12
    n = torch.tensor(rng.standard_normal((p, 3)))
    n = n / n.norm(dim=1, keepdim=True)
    v = n + 0.5 * torch.tensor(rng.standard_normal((p, 3)))
    v = v / v.norm(dim=1, keepdim=True)
    kd = torch.tensor(rng.uniform(0, 1, (p, 3)))
    r = torch.tensor(rng.uniform(0.1, 1, p))
    m = torch.tensor(rng.uniform(0, 1, p))
    d = torch.tensor(fibonacci_directions(e))
    rad = torch.tensor(rng.uniform(0, 2, (e, 3)))
    args = [x.clone().requires_grad_(True) for x in (n, v, kd, r, m, rad)]
    args2 = [x.clone().requires_grad_(True) for x in (n, v, kd, r, m, rad)]
    w = torch.tensor(rng.standard_normal((p, 3)))
    a = shade_torch(*args[:5], d, args[5], 0.3)
    b = shade_fused(*args2[:5], d, args2[5], 0.3)
    assert torch.allclose(a, b, atol=1e-13, rtol=0)
    ga = torch.autograd.grad((a * w).sum(), args)
    gb = torch.autograd.grad((b * w).sum(), args2)
    for x, y in zip(ga, gb):
        assert torch.allclose(x, y, atol=1e-12, rtol=1e-10)


def test_fused_shading_gradcheck():
    rng = np.random.default_rng(2)
    p, e = 5, 6
    n = torch.tensor(rng.standard_normal((p, 3)))
    n = (n / n.norm(dim=1, keepdim=True)).requires_grad_(True)
    v = torch.tensor(rng.standard_normal((p, 3)))
    v = (v / v.norm(dim=1, keepdim=True)).requires_grad_(True)
    kd = torch.tensor(rng.uniform(0, 1, (p, 3)), requires_grad=True)
    r = torch.tensor(rng.uniform(0.2, 1, p), requires_grad=True)
    m = torch.tensor(rng.uniform(0, 1, p), requires_grad=True)
    rad = torch.tensor(rng.uniform(0, 2, (e, 3)), requires_grad=True)
    d = torch.tensor(fibonacci_directions(e))
    assert torch.autograd.gradcheck(lambda *a: shade_fused(*a[:5], d, a[5], 0.5), (n, v, kd, r, m, rad))


# ---------------------------------------------------------------------------
# full render


def _sphere_scene(res=64):
    m = icosphere(3, radius=1.0)
    c = Camera.look_at(Intrinsics(1.2 * res, 1.2 * res, res / 2, res / 2, res, res), [0, -3.0, 0], [0, 0, 0])
    return m, c


def test_sphere_shading_closed_form():
    m, c = _sphere_scene()
    app = single_light((0.0, -1.0, 0.0), radiance=2.0, kd=0.7)  # light from the camera
    out = render(m, app, c, tau=0.0, specular=False)
    fid = out.face_id
    hit = fid >= 0
    n = m.face_normals()[fid[hit]]
    expected = 0.7 / np.pi * np.maximum(n @ app.env_dirs[0], 0) * 2.0 * app.solid_angle
    assert np.abs(out.color[hit][:, 0] - expected).max() < 1e-6
    lum = out.color[..., 0]
    assert lum[32, 32] >= 0.99 * lum.max()
    # brightness falls off with the cosine to the light
    cos = n @ app.env_dirs[0]
    assert np.corrcoef(cos, out.color[hit][:, 0])[0, 1] > 0.999


def test_white_furnace():
    m, c = _sphere_scene()
    app = AppearanceParams.uniform((1.0, 1.0, 1.0), 0.5, 0.0, n_dirs=128)
    out = render(m, app, c, tau=0.0, specular=False)
    hit = out.face_id >= 0
    n = m.face_normals()[out.face_id[hit]]
    # per-pixel value is the direction-summed irradiance of its normal
    irr = np.maximum(n @ app.env_dirs.T, 0).sum(1) * app.solid_angle / np.pi
    assert np.abs(out.color[hit] - irr[:, None]).max() < 1e-6
    # a flat patch sees one normal, so the furnace output is constant over it
    plane = facing_triangle([[-3, -3, 2], [3, -3, 2], [0, 3, 2]])
    pout = render(plane, app, cam_identity(), tau=0.0, specular=False)
    vals = pout.color[pout.face_id >= 0]
    assert np.ptp(vals) < 1e-6
    # and the discrete sum is close to the continuous furnace value of 1
    assert abs(vals.mean() - 1.0) < 0.02


def test_mask_gradient_silhouette_vertex():
    m = icosphere(2)
    c = Camera.look_at(Intrinsics(50.0, 50.0, 24.0, 24.0, 48, 48), [0, -4, 0.3], [0, 0, 0])
    out = render(m, None, c, tau=1.0)
    # the outline vertex shared by the most softened pixels
    vid = int(np.bincount(out.visibility.band_edges.ravel()).argmax())
    verts = torch.tensor(np.array(m.vertices), requires_grad=True)
    rot6 = torch.tensor(np.array(c.extrinsics.rot6))
    tr = torch.tensor(np.array(c.extrinsics.translation))
    ro = render_torch(verts, m.faces, c.intrinsics, rot6, tr, 1.0, shading=False)
    ro.mask.sum().backward()
    g = verts.grad[vid].numpy()
    vis = ro.visibility
    eps = 1e-4 * 4 / 50  # ~1e-4 px at this depth
    fd = np.zeros(3)
    for k in range(3):
        vals = []
        for s in (1, -1):
            v = np.array(m.vertices)
            v[vid, k] += s * eps
            r = render_torch(torch.tensor(v), m.faces, c.intrinsics, rot6, tr, 1.0, shading=False, visibility=vis)
            vals.append(float(r.mask.sum()))
        fd[k] = (vals[0] - vals[1]) / (2 * eps)
    assert np.linalg.norm(g) > 1e-3
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-2
