import numpy as np
import pytest
import torch

from cadtwin.geometry import TriMesh, axis_angle_matrix, cylinder, icosphere
from cadtwin.library import cube_sphere, synthetic_library, wheel_template
from cadtwin.rendering import AppearanceParams, Camera, Intrinsics, render
from cadtwin.shape_space import (AlignmentConfig, TopologyError, align_template, build_shape_space, decode,
                                 decode_vertices, encode, load_shape_space, reconstruction_error, save_shape_space)
from cadtwin.vehicle import (TopologyMismatch, VehicleMesh, animate, assemble, assemble_vertices_torch,
                             layout_digest, transfer_texture)


def make_vehicle(wheel=None, **kw) -> VehicleMesh:
    body = cube_sphere(2)
    wheel = cylinder(8) if wheel is None else wheel
    poses = np.tile(np.eye(4), (4, 1, 1))
    return VehicleMesh(body, wheel, poses, np.array([1.0, -1.0, 1.0, -1.0]), **kw)


def wheel_copies(vm: VehicleMesh, mesh=None) -> np.ndarray:
    mesh = assemble(vm) if mesh is None else mesh
    nb, nw = vm.body.n_vertices, vm.wheel_template.n_vertices
    return mesh.vertices[nb:].reshape(vm.n_wheels, nw, 3)


def test_assemble_identity_copies_template():
    vm = make_vehicle()
    copies = wheel_copies(vm)
    for c in copies:
        assert np.array_equal(c, vm.wheel_template.vertices)
    m = assemble(vm)
    assert np.array_equal(m.vertices[:vm.body.n_vertices], vm.body.vertices)
    assert m.n_faces == vm.body.n_faces + 4 * vm.wheel_template.n_faces


def test_steer_rotates_front_only():
    vm = make_vehicle(steer_yaw=np.pi / 2)
    copies = wheel_copies(vm)
    rz = axis_angle_matrix([0, 0, 1], np.pi / 2)
    tmpl = vm.wheel_template.vertices
    for k in (0, 1):
        assert np.allclose(copies[k], tmpl @ rz.T, atol=1e-12)
    for k in (2, 3):
        assert np.array_equal(copies[k], tmpl)


def test_wheel_scale_bbox():
    vm = make_vehicle(wheel=cylinder(64), wheel_scale=np.array([2.0, 1.0, 2.0]))
    c = wheel_copies(vm)[2]
    ext = c.max(0) - c.min(0)
    # the 64-gon reaches +-1 along x exactly and along z up to cos(pi/64)
    assert np.allclose(ext, [4.0, 1.0, 4.0], atol=4 * (1 - np.cos(np.pi / 64)) + 1e-12)
    assert abs(ext[0] - 4.0) < 1e-12 and abs(ext[1] - 1.0) < 1e-12


def test_assemble_rigid_equivariance():
    rng = np.random.default_rng(0)
    poses = np.tile(np.eye(4), (4, 1, 1))
    poses[:, :3, 3] = rng.standard_normal((4, 3))
    vm = make_vehicle(steer_yaw=0.3, wheel_scale=np.array([0.4, 0.2, 0.4]), axle_offset_front=[0.1, 0.05, 0.0],
                      axle_offset_back=[-0.1, 0.02, 0.03]).replace(wheel_poses=poses)
    g = np.eye(4)
    g[:3, :3] = axis_angle_matrix(rng.standard_normal(3), 0.7)
    g[:3, 3] = rng.standard_normal(3)
    moved = vm.replace(body=vm.body.with_vertices(vm.body.vertices @ g[:3, :3].T + g[:3, 3]),
                       wheel_poses=np.einsum("ij,kjl->kil", g, vm.wheel_poses))
    assert np.allclose(assemble(moved).vertices, assemble(vm).vertices @ g[:3, :3].T + g[:3, 3], atol=1e-12)


def test_rho_affects_only_front_wheels():
    vm = make_vehicle(axle_offset_front=[0.2, 0.1, 0.0])
    a = assemble(vm).vertices
    for rho in (0.1, -0.4, 1.3):
        b = assemble(vm.replace(steer_yaw=rho)).vertices
        nb, nw = vm.body.n_vertices, vm.wheel_template.n_vertices
        changed = np.nonzero((a != b).any(1))[0]
        assert changed.min() >= nb and changed.max() < nb + 2 * nw
        assert np.array_equal(a[nb + 2 * nw:], b[nb + 2 * nw:])


def test_axle_parameters_shared_structurally():
    # one scale vector and one offset per axle exist; both wheels of an axle read the same tensor
    fields = set(VehicleMesh.__dataclass_fields__)
    assert {"wheel_scale", "axle_offset_front", "axle_offset_back"} <= fields
    assert not any(f.startswith("wheel_scale_") or f.startswith("axle_offset_") and f not in
                   ("axle_offset_front", "axle_offset_back") for f in fields)
    vm = make_vehicle()
    t_front = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    r_w = torch.tensor(1.0, dtype=torch.float64, requires_grad=True)
    body = torch.tensor(np.array(vm.body.vertices))
    wheel = torch.tensor(np.array(vm.wheel_template.vertices))
    v = assemble_vertices_torch(body, wheel, vm, r_w=r_w, t_front=t_front)
    nb, nw = vm.body.n_vertices, vm.wheel_template.n_vertices
    gl = torch.autograd.grad(v[nb:nb + nw, 0].sum(), t_front, retain_graph=True)[0]
    gr = torch.autograd.grad(v[nb + nw:nb + 2 * nw, 0].sum(), t_front, retain_graph=True)[0]
    assert torch.equal(gl, gr)
    gl = torch.autograd.grad(v[nb:nb + nw].abs().sum(), r_w, retain_graph=True)[0]
    gr = torch.autograd.grad(v[nb + nw:nb + 2 * nw].abs().sum(), r_w)[0]
    assert torch.equal(gl, gr)


def test_axle_offset_mirrors_lateral_component():
    vm = make_vehicle(axle_offset_front=[0.1, 0.2, 0.3], axle_offset_back=[0.0, -0.05, 0.0])
    c = wheel_copies(vm)
    tm = vm.wheel_template.vertices
    assert np.allclose(c[0] - tm, [0.1, 0.2, 0.3]) and np.allclose(c[1] - tm, [0.1, -0.2, 0.3])
    assert np.allclose(c[2] - tm, [0.0, -0.05, 0.0]) and np.allclose(c[3] - tm, [0.0, 0.05, 0.0])


def test_spin_two_pi_returns_wheel():
    vm = make_vehicle(wheel=wheel_template(), wheel_scale=np.array([0.35, 0.25, 0.35]), steer_yaw=0.2)
    spun = vm.replace(spin_angle=np.full(4, 2 * np.pi))
    assert np.abs(assemble(spun).vertices - assemble(vm).vertices).max() < 1e-9


def test_animate_full_turn():
    vm = make_vehicle(wheel=wheel_template(), wheel_scale=np.array([0.33, 0.2, 0.33]))
    out = animate(vm, 2 * np.pi * 0.33, steer=0.1)
    assert np.allclose(out.spin_angle, 2 * np.pi, rtol=0, atol=1e-15)
    assert out.steer_yaw == 0.1
    assert np.abs(assemble(out.replace(steer_yaw=0.0)).vertices - assemble(vm).vertices).max() < 1e-9


def test_animate_zero_distance_unchanged():
    vm = make_vehicle(steer_yaw=0.25)
    out = animate(vm, 0.0, steer=0.25)
    assert np.array_equal(assemble(out).vertices, assemble(vm).vertices)


def test_animate_half_turn_antipodal():
    vm = make_vehicle(wheel=wheel_template(), wheel_scale=np.array([0.4, 0.2, 0.4]))
    out = animate(vm, np.pi * 0.4, steer=0.0)
    a, b = wheel_copies(vm)[3], wheel_copies(out)[3]
    i = int(np.argmax(vm.wheel_template.vertices[:, 0]))  # rim vertex at +x
    # rotating a rim point by pi about the axle (+y) negates x and z
    assert np.allclose(b[i], [-a[i, 0], a[i, 1], -a[i, 2]], atol=1e-12)


def test_vehicle_invariants():
    with pytest.raises(ValueError):
        make_vehicle(wheel_scale=np.array([1.0, -1.0, 1.0]))
    with pytest.raises(ValueError):
        make_vehicle(front_wheel_indices=(0, 7))
    with pytest.raises(ValueError):
        VehicleMesh(cube_sphere(2), cylinder(8), np.eye(4)[None], np.array([1.0]))


# ---------------------------------------------------------------------------
# shape space


def test_two_exemplars_one_component(library):
    sp = build_shape_space(library[:2], 1)
    for ex in library[:2]:
        v = assemble(ex).vertices
        assert np.abs(decode_vertices(sp, encode(sp, ex)) - v).max() < 1e-9


def test_single_direction_basis():
    rng = np.random.default_rng(0)
    mu = rng.standard_normal((20, 3))
    d = rng.standard_normal((20, 3))
    m = icosphere(0)
    exs = [TriMesh(np.zeros((12, 3)) + x[:12], m.faces) for x in (mu + d, mu - d)]
    sp = build_shape_space(exs, 1)
    dd = d[:12].reshape(-1) / np.linalg.norm(d[:12])
    assert min(np.abs(sp.basis[:, 0] - dd).max(), np.abs(sp.basis[:, 0] + dd).max()) < 1e-12


def test_pca_roundtrip_and_svd_oracle(library):
    exs = library[:10]
    sp = build_shape_space(exs, 10)
    x = np.stack([assemble(e).vertices.reshape(-1) for e in exs])
    assert np.abs(sp.basis.T @ sp.basis - np.eye(sp.k)).max() < 1e-8
    for e in exs:
        v = assemble(e).vertices
        assert np.linalg.norm(decode_vertices(sp, encode(sp, e)) - v) / np.linalg.norm(v) < 1e-9
    # independent oracle: dense SVD of the centred data, projection error with k components
    xc = x - x.mean(0)
    u, s, vt = np.linalg.svd(xc, full_matrices=False)
    for k in range(1, 10):
        proj = xc @ vt[:k].T @ vt[:k]
        oracle = np.sqrt(((proj - xc) ** 2).sum() / xc.size)
        assert abs(reconstruction_error(sp, exs, k) - oracle) < 1e-9
    errs = [reconstruction_error(sp, exs, k) for k in range(0, 11)]
    assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))


def test_k_clamped(library):
    sp = build_shape_space(library[:4], 25)
    assert sp.k == 4


def test_topology_mismatch_named(library):
    other = synthetic_library(1, seed=1, resolution=4)[0]
    with pytest.raises(TopologyError, match="exemplar 2"):
        build_shape_space([library[0], library[1], other], 2)


def test_decode_examples(space, library):
    assert np.array_equal(decode_vertices(space, np.zeros(space.k)), space.mean)
    z = encode(space, library[3])
    v = assemble(library[3]).vertices
    assert np.abs(decode_vertices(space, z) - v).max() < 1e-6 * np.abs(v).max()
    assert np.allclose(decode_vertices(space, 2 * z), 2 * v - space.mean, atol=1e-9)


def test_decode_parts(space, library):
    vm = decode(space, encode(space, library[5]))
    assert np.abs(assemble(vm).vertices - assemble(library[5]).vertices).max() < 1e-9
    assert vm.n_wheels == 4 and vm.front_wheel_indices == (0, 1)


def test_shape_space_archive(tmp_path, space):
    p = tmp_path / "s.css"
    save_shape_space(p, space)
    back = load_shape_space(p)
    assert back.mean.tobytes() == space.mean.tobytes() and back.basis.tobytes() == space.basis.tobytes()
    assert np.array_equal(back.faces, space.faces) and np.array_equal(back.part_labels, space.part_labels)
    assert np.array_equal(decode_vertices(back, space.codes[0]), decode_vertices(space, space.codes[0]))
    data = p.read_bytes()
    (tmp_path / "t.css").write_bytes(data[:-100])
    with pytest.raises(ValueError, match="checksum|not a shape"):
        load_shape_space(tmp_path / "t.css")


# ---------------------------------------------------------------------------
# alignment


def test_align_fixed_point():
    m = icosphere(2)
    trace = []
    out = align_template(m, m.vertices, AlignmentConfig(), trace)
    assert np.linalg.norm(out.vertices - m.vertices, axis=1).max() < 1e-6
    assert np.array_equal(out.faces, m.faces)


def test_align_sphere_growth():
    m = icosphere(2)
    target = icosphere(3, radius=1.5).vertices
    trace = []
    out = align_template(m, target, AlignmentConfig(iterations=400), trace)
    assert abs(np.linalg.norm(out.vertices, axis=1).mean() - 1.5) < 0.02
    assert all(b <= a for a, b in zip(trace, trace[1:]))
    assert trace[-1] <= trace[0]
    assert out.faces.tobytes() == m.faces.tobytes()


def test_align_stiff_regularizer_keeps_source():
    m = icosphere(2)
    target = icosphere(3, radius=1.5).vertices
    out = align_template(m, target, AlignmentConfig(lambda_shape=1e9, iterations=100))
    assert np.linalg.norm(out.vertices - m.vertices, axis=1).max() < 1e-3


def test_align_errors():
    with pytest.raises(ValueError):
        AlignmentConfig(lambda_shape=-1)
    with pytest.raises(ValueError):
        align_template(icosphere(1), np.zeros((2, 3)))


# ---------------------------------------------------------------------------
# texture transfer


def _cam(res=48):
    return Camera.look_at(Intrinsics(60.0, 60.0, res / 2, res / 2, res, res), [6.0, -4.0, 2.5], [0, 0, 0.6])


def _textured(seed):
    rng = np.random.default_rng(seed)
    app = AppearanceParams(rng.random((16, 16, 3)), np.stack([np.zeros((16, 16)), np.full((16, 16), 0.5),
                                                              np.zeros((16, 16))], -1),
                           np.eye(3), np.ones((3, 3)))
    return app


def test_transfer_to_self_pixel_exact(small_space):
    vm = decode(small_space, small_space.codes[0])
    app = _textured(0).with_layout(layout_digest(vm))
    dst, app2 = transfer_texture(app, vm)
    a = render(assemble(vm), app, _cam(), tau=0)
    b = render(assemble(dst), app2, _cam(), tau=0)
    assert np.array_equal(a.color, b.color) and np.array_equal(a.mask, b.mask)


def test_transfer_involution(small_space):
    va, vb = decode(small_space, small_space.codes[0]), decode(small_space, small_space.codes[1])
    ta, tb = _textured(1), _textured(2)
    _, tb_on_a = transfer_texture(tb, va)
    _, ta_on_b = transfer_texture(ta, vb)
    _, back_a = transfer_texture(ta_on_b, va)
    _, back_b = transfer_texture(tb_on_a, vb)
    assert np.array_equal(back_a.kd, ta.kd) and np.array_equal(back_b.kd, tb.kd)


def test_transfer_scaled_wheels_keeps_uv(small_space):
    vm = decode(small_space, small_space.codes[2])
    big = vm.replace(wheel_scale=vm.wheel_scale * 1.2)
    dst, app = transfer_texture(_textured(3), big)
    assert np.array_equal(assemble(dst).uv, assemble(vm).uv)
    assert np.array_equal(dst.part_labels(), vm.part_labels())
    assert dst is big


def test_transfer_topology_mismatch(small_space, space):
    vm_small = decode(small_space, np.zeros(small_space.k))
    vm_big = decode(space, np.zeros(space.k))
    app = _textured(4).with_layout(layout_digest(vm_small))
    with pytest.raises(TopologyMismatch):
        transfer_texture(app, vm_big)
