import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy import stats
from scipy.spatial import ConvexHull

from cadtwin.geometry import (MeshError, Pose6D, TriMesh, build_adjacency, concatenate, cylinder,
                              euler_characteristic, graph_laplacian, icosphere, rot6d_to_matrix,
                              sample_surface)
from cadtwin.meshio import load_mesh, parse_ply, ply_bytes, save_mesh

from conftest import random_mesh

TRI = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
QUAD = TriMesh([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], [[0, 1, 2], [0, 2, 3]])


def test_trimesh_rejects_bad_faces():
    with pytest.raises(MeshError) as e:
        TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 3]])
    assert e.value.kind == "index"
    with pytest.raises(MeshError) as e:
        TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 1]])
    assert e.value.kind == "degenerate"


def test_adjacency_single_triangle():
    adj = build_adjacency(TRI)
    assert adj.n_face_pairs == 0 and adj.n_edges == 3


def test_adjacency_two_triangles():
    adj = build_adjacency(QUAD)
    assert adj.n_face_pairs == 1 and adj.n_edges == 5
    assert sorted(adj.one_ring(0).tolist()) == [1, 2, 3]


def test_adjacency_icosphere_level1():
    m = icosphere(1)
    adj = build_adjacency(m)
    assert m.n_faces == 80
    assert adj.n_face_pairs == 120 and adj.n_edges == 120
    assert m.n_vertices - adj.n_edges + m.n_faces == 2


def test_non_manifold_edge_named():
    m = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1]], [[0, 1, 2], [0, 1, 3], [0, 1, 4]])
    with pytest.raises(MeshError) as e:
        build_adjacency(m)
    assert e.value.kind == "non_manifold" and e.value.detail == (0, 1)


@pytest.mark.parametrize("mesh,chi", [(icosphere(0), 2), (icosphere(2), 2), (cylinder(12), 2)])
def test_euler_characteristic_closed(mesh, chi):
    assert euler_characteristic(mesh) == chi


def test_laplacian_small_graphs():
    # a single-edge "mesh" is not expressible with triangles, so check the edge graph directly
    tri = graph_laplacian(TRI).toarray()
    assert np.array_equal(tri, [[2, -1, -1], [-1, 2, -1], [-1, -1, 2]])
    lq = graph_laplacian(QUAD).toarray()
    assert np.array_equal(lq[1], [-1, 2, -1, 0])


def test_laplacian_two_vertex_block():
    # the (0,1) edge contributes the [[1,-1],[-1,1]] block
    from cadtwin.geometry import Adjacency
    adj = Adjacency(np.array([[0, 1]]), np.array([[0, -1]]), np.zeros((0, 2), np.int64),
                    np.array([0, 1, 2]), np.array([1, 0]))
    two = TriMesh(np.zeros((2, 3)), np.zeros((0, 3), np.int64))
    assert np.array_equal(graph_laplacian(two, adj).toarray(), [[1, -1], [-1, 1]])


def test_laplacian_spectrum_random_mesh():
    rng = np.random.default_rng(0)
    pts = rng.standard_normal((50, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    m = TriMesh(pts, ConvexHull(pts).simplices)
    assert m.n_vertices == 50
    lap = graph_laplacian(m)
    dense = lap.toarray()
    assert np.allclose(dense, dense.T)
    assert np.allclose(dense.sum(1), 0)
    assert np.array_equal(np.diag(dense), build_adjacency(m).degree())
    ev = np.linalg.eigvalsh(dense)
    assert abs(ev.min()) < 1e-9 and (ev >= -1e-9).all()


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_laplacian_quadratic_form_nonnegative(seed):
    rng = np.random.default_rng(seed)
    m = random_mesh(rng, level=1)
    v = rng.standard_normal(m.n_vertices)
    assert v @ (graph_laplacian(m) @ v) >= -1e-12


def test_sample_single_triangle():
    s = sample_surface(TRI, 4, seed=1)
    assert len(s) == 4 and (s.face_index == 0).all()
    assert (s.barycentric >= 0).all() and np.allclose(s.barycentric.sum(1), 1)
    assert np.allclose(s.positions, s.barycentric @ TRI.vertices)


def test_sample_area_proportional():
    # areas 1 and 3
    m = TriMesh([[0, 0, 0], [1, 0, 0], [0, 2, 0], [5, 0, 0], [8, 0, 0], [5, 2, 0]], [[0, 1, 2], [3, 4, 5]])
    s = sample_surface(m, 40000, seed=7)
    assert abs((s.face_index == 1).mean() - 0.75) < 0.01


def test_sample_deterministic():
    m = icosphere(2)
    a, b = sample_surface(m, 1000, 3), sample_surface(m, 1000, 3)
    assert a.positions.tobytes() == b.positions.tobytes()
    assert a.face_index.tobytes() == b.face_index.tobytes()


def test_sample_zero_area_errors():
    flat = TriMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])
    with pytest.raises(MeshError):
        sample_surface(flat, 10, 0)


def test_sample_chi_square():
    rng = np.random.default_rng(1)
    m = random_mesh(rng, level=1, noise=0.3)
    s = sample_surface(m, 100_000, seed=11)
    counts = np.bincount(s.face_index, minlength=m.n_faces)
    expected = m.face_areas() / m.face_areas().sum() * len(s)
    assert stats.chisquare(counts, expected).pvalue > 0.01


def test_sample_positions_on_faces():
    m = icosphere(2)
    s = sample_surface(m, 500, 0)
    tri = m.vertices[m.faces[s.face_index]]
    assert np.allclose(np.einsum("nk,nkd->nd", s.barycentric, tri), s.positions, atol=1e-12)
    assert s[3].face_index == int(s.face_index[3])


def test_rot6d_examples():
    assert np.array_equal(rot6d_to_matrix([1, 0, 0, 0, 1, 0]), np.eye(3))
    assert np.allclose(rot6d_to_matrix([2, 0, 0, 0, 3, 0]), np.eye(3), atol=0)
    r = rot6d_to_matrix([0, 1, 0, -1, 0, 0])
    rz = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]], dtype=float)
    assert np.allclose(r, rz, atol=1e-15)
    assert np.abs(r.T @ r - np.eye(3)).max() < 1e-12


@pytest.mark.parametrize("bad", [[0, 0, 0, 0, 1, 0], [1, 0, 0, 2, 0, 0]])
def test_rot6d_degenerate(bad):
    with pytest.raises(ValueError):
        rot6d_to_matrix(bad)
    with pytest.raises(ValueError):
        rot6d_to_matrix(torch.tensor(bad, dtype=torch.float64))


vec = st.floats(-10, 10, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(st.lists(vec, min_size=9, max_size=9))
def test_rot6d_orthonormal_and_norm_preserving(xs):
    a, b, p = np.array(xs[:3]), np.array(xs[3:6]), np.array(xs[6:])
    na = np.linalg.norm(a)
    if na < 1e-3 or np.linalg.norm(np.cross(a / na, b)) < 1e-3:
        return
    r = rot6d_to_matrix(np.concatenate([a, b]))
    assert np.abs(r.T @ r - np.eye(3)).max() < 1e-12
    assert abs(np.linalg.det(r) - 1) < 1e-12
    assert abs(np.linalg.norm(r @ p) - np.linalg.norm(p)) <= 1e-12 * max(1.0, np.linalg.norm(p))


def test_rot6d_torch_matches_numpy():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((5, 6))
    assert np.allclose(rot6d_to_matrix(torch.tensor(x)).numpy(), rot6d_to_matrix(x), atol=1e-14)


def test_pose_inverse_compose():
    rng = np.random.default_rng(4)
    p = Pose6D(rng.standard_normal(6), rng.standard_normal(3))
    q = Pose6D(rng.standard_normal(6), rng.standard_normal(3))
    x = rng.standard_normal((10, 3))
    assert np.allclose(p.inverse().apply(p.apply(x)), x, atol=1e-12)
    assert np.allclose(p.compose(q).apply(x), p.apply(q.apply(x)), atol=1e-12)
    assert np.allclose(Pose6D.from_dict(p.to_dict()).apply(x), p.apply(x), atol=0)


def test_concatenate_offsets():
    m = concatenate([TRI, QUAD])
    assert m.n_vertices == 7 and m.faces.max() == 6


def test_ply_roundtrip_bitexact(tmp_path):
    rng = np.random.default_rng(0)
    m = random_mesh(rng)
    m = TriMesh(m.vertices, m.faces, rng.random((m.n_vertices, 2)))
    save_mesh(tmp_path / "a.ply", m)
    back = load_mesh(tmp_path / "a.ply")
    assert back.vertices.tobytes() == m.vertices.tobytes()
    assert np.array_equal(back.faces, m.faces) and back.uv.tobytes() == m.uv.tobytes()


def test_obj_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    m = random_mesh(rng)
    save_mesh(tmp_path / "a.obj", m)
    back = load_mesh(tmp_path / "a.obj")
    assert np.array_equal(back.vertices, m.vertices) and np.array_equal(back.faces, m.faces)


def test_ply_extra_properties():
    props, faces = parse_ply(ply_bytes({"x": np.arange(3.0), "part": np.array([0, 1, 2])}, None))
    assert faces is None and props["part"].tolist() == [0, 1, 2]
