"""Triangle meshes, adjacency, graph Laplacian, surface sampling and rigid transforms."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np
import scipy.sparse as sp
import torch


class MeshError(ValueError):
    """Raised for structurally invalid meshes.

    ``kind`` is a short machine-readable tag (``"index"``, ``"degenerate"``,
    ``"non_manifold"``, ``"zero_area"``) and ``detail`` carries the offending
    element (face index, edge tuple, ...).
    """

    def __init__(self, kind: str, message: str, detail=None):
        super().__init__(message)
        self.kind = kind
        self.detail = detail


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Indexed triangle mesh with float64 vertices and optional per-vertex UVs."""

    vertices: np.ndarray
    faces: np.ndarray
    uv: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            bad = int(np.nonzero((f < 0).any(1) | (f >= len(v)).any(1))[0][0])
            raise MeshError("index", f"face {bad} references a vertex outside [0, {len(v)})", bad)
        degenerate = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if degenerate.any():
            bad = int(np.nonzero(degenerate)[0][0])
            raise MeshError("degenerate", f"face {bad} repeats a vertex index: {f[bad].tolist()}", bad)
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "faces", _frozen(f))
        if self.uv is not None:
            uv = np.asarray(self.uv, dtype=np.float64).reshape(-1, 2)
            if len(uv) != len(v):
                raise MeshError("index", f"uv has {len(uv)} rows for {len(v)} vertices")
            object.__setattr__(self, "uv", _frozen(uv))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices: np.ndarray) -> "TriMesh":
        return TriMesh(vertices, self.faces, self.uv)

    def face_areas(self) -> np.ndarray:
        return face_areas(self.vertices, self.faces)

    def face_normals(self) -> np.ndarray:
        tri = self.vertices[self.faces]
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(norm > 0, norm, 1.0)

    def same_topology(self, other: "TriMesh") -> bool:
        return self.n_vertices == other.n_vertices and np.array_equal(self.faces, other.faces)


def face_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    tri = np.asarray(vertices)[np.asarray(faces)]
    return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)


def concatenate(meshes: list[TriMesh]) -> TriMesh:
    verts, faces, uvs = [], [], []
    offset = 0
    with_uv = all(m.uv is not None for m in meshes)
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        if with_uv:
            uvs.append(m.uv)
        offset += m.n_vertices
    return TriMesh(
        np.concatenate(verts) if verts else np.zeros((0, 3)),
        np.concatenate(faces) if faces else np.zeros((0, 3), dtype=np.int64),
        np.concatenate(uvs) if with_uv and uvs else None,
    )


# ---------------------------------------------------------------------------
# adjacency and Laplacian


@dataclass(frozen=True, eq=False)
class Adjacency:
    """Edge and neighbourhood structure of a :class:`TriMesh`.

    ``edges`` are sorted vertex pairs (i < j), ``edge_faces`` holds the one or
    two incident faces per edge (-1 for a missing second face) and
    ``face_pairs`` lists each pair of faces sharing an edge exactly once.
    """

    edges: np.ndarray
    edge_faces: np.ndarray
    face_pairs: np.ndarray
    ring_ptr: np.ndarray
    ring_idx: np.ndarray

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def n_face_pairs(self) -> int:
        return len(self.face_pairs)

    def one_ring(self, v: int) -> np.ndarray:
        return self.ring_idx[self.ring_ptr[v]:self.ring_ptr[v + 1]]

    def degree(self) -> np.ndarray:
        return np.diff(self.ring_ptr)


def build_adjacency(mesh: TriMesh) -> Adjacency:
    f = mesh.faces
    nf = len(f)
    # three directed half-edges per face, canonicalised to (min, max)
    he = np.stack([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=1).reshape(-1, 2)
    he = np.sort(he, axis=1)
    he_face = np.repeat(np.arange(nf), 3)
    order = np.lexsort((he_face, he[:, 1], he[:, 0]))
    he, he_face = he[order], he_face[order]
    if len(he):
        new = np.ones(len(he), dtype=bool)
        new[1:] = (he[1:] != he[:-1]).any(axis=1)
        starts = np.nonzero(new)[0]
        counts = np.diff(np.append(starts, len(he)))
    else:
        starts = counts = np.zeros(0, dtype=np.int64)
    if (counts > 2).any():
        e = he[starts[np.argmax(counts > 2)]]
        raise MeshError("non_manifold", f"edge ({e[0]}, {e[1]}) is shared by more than two faces", (int(e[0]), int(e[1])))
    edges = he[starts]
    edge_faces = np.full((len(edges), 2), -1, dtype=np.int64)
    edge_faces[:, 0] = he_face[starts]
    two = counts == 2
    edge_faces[two, 1] = he_face[starts[two] + 1]
    face_pairs = edge_faces[two]

    nv = mesh.n_vertices
    both = np.concatenate([edges, edges[:, ::-1]])
    order = np.lexsort((both[:, 1], both[:, 0]))
    both = both[order]
    ring_ptr = np.zeros(nv + 1, dtype=np.int64)
    np.add.at(ring_ptr, both[:, 0] + 1, 1)
    ring_ptr = np.cumsum(ring_ptr)
    return Adjacency(_frozen(edges), _frozen(edge_faces), _frozen(face_pairs), _frozen(ring_ptr), _frozen(both[:, 1]))


def euler_characteristic(mesh: TriMesh, adj: Optional[Adjacency] = None) -> int:
    adj = adj or build_adjacency(mesh)
    return mesh.n_vertices - adj.n_edges + mesh.n_faces


def graph_laplacian(mesh: TriMesh, adj: Optional[Adjacency] = None) -> sp.csr_matrix:
    """Combinatorial Laplacian ``D - A`` of the mesh edge graph."""
    adj = adj or build_adjacency(mesh)
    n = mesh.n_vertices
    i, j = adj.edges[:, 0], adj.edges[:, 1]
    ones = np.ones(len(i))
    a = sp.coo_matrix((np.concatenate([ones, ones]), (np.concatenate([i, j]), np.concatenate([j, i]))), shape=(n, n))
    deg = np.asarray(a.sum(axis=1)).ravel()
    return (sp.diags(deg) - a).tocsr()


# alias under the name used by the public API listing
cotangent_free_laplacian = graph_laplacian


# ---------------------------------------------------------------------------
# surface sampling


@dataclass(frozen=True)
class SurfaceSample:
    position: np.ndarray
    face_index: int
    barycentric: np.ndarray


@dataclass(frozen=True, eq=False)
class SurfaceSamples:
    """Struct-of-arrays batch of :class:`SurfaceSample`."""

    positions: np.ndarray
    face_index: np.ndarray
    barycentric: np.ndarray

    def __len__(self) -> int:
        return len(self.face_index)

    def __iter__(self) -> Iterator[SurfaceSample]:
        for p, f, b in zip(self.positions, self.face_index, self.barycentric):
            yield SurfaceSample(p, int(f), b)

    def __getitem__(self, i: int) -> SurfaceSample:
        return SurfaceSample(self.positions[i], int(self.face_index[i]), self.barycentric[i])


def sample_faces(areas: np.ndarray, count: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted face indices and uniform barycentrics.

    Uses the counter-based Philox generator so a given ``(seed, count)``
    reproduces bit-for-bit on every platform.
    """
    areas = np.asarray(areas, dtype=np.float64)
    total = float(areas.sum())
    if not total > 0:
        raise MeshError("zero_area", "cannot sample a mesh with zero total area")
    rng = np.random.Generator(np.random.Philox(seed))
    u = rng.random((count, 3))
    cdf = np.cumsum(areas)
    cdf /= cdf[-1]
    fi = np.searchsorted(cdf, u[:, 0], side="right")
    fi = np.minimum(fi, len(areas) - 1)
    # skip zero-area faces that searchsorted can land on at cdf plateaus
    while True:
        bad = areas[fi] <= 0
        if not bad.any():
            break
        fi[bad] += 1
        fi = np.minimum(fi, len(areas) - 1)
    s = np.sqrt(u[:, 1])
    bary = np.stack([1.0 - s, s * (1.0 - u[:, 2]), s * u[:, 2]], axis=1)
    return fi, bary


def sample_surface(mesh: TriMesh, count: int, seed: int) -> SurfaceSamples:
    fi, bary = sample_faces(mesh.face_areas(), count, seed)
    tri = mesh.vertices[mesh.faces[fi]]
    pos = np.einsum("nk,nkd->nd", bary, tri)
    return SurfaceSamples(pos, fi, bary)


# ---------------------------------------------------------------------------
# rotations and poses


def rot6d_to_matrix(rot6, eps: float = 1e-12):
    """Gram-Schmidt map from two 3-vectors to a rotation matrix (columns).

    Accepts a numpy array or a torch tensor of shape ``(..., 6)``. Degenerate
    input (zero first vector, parallel second vector) raises ``ValueError``.
    """
    if isinstance(rot6, torch.Tensor):
        a, b = rot6[..., :3], rot6[..., 3:6]
        na = torch.linalg.norm(a, dim=-1, keepdim=True)
        if bool((na <= eps).any()):
            raise ValueError("rot6d: first vector is zero")
        c1 = a / na
        b_perp = b - (b * c1).sum(-1, keepdim=True) * c1
        nb = torch.linalg.norm(b_perp, dim=-1, keepdim=True)
        if bool((nb <= eps * torch.linalg.norm(b, dim=-1, keepdim=True).clamp_min(1.0)).any()):
            raise ValueError("rot6d: second vector is parallel to the first")
        c2 = b_perp / nb
        c3 = torch.cross(c1, c2, dim=-1)
        return torch.stack([c1, c2, c3], dim=-1)
    r = np.asarray(rot6, dtype=np.float64)
    a, b = r[..., :3], r[..., 3:6]
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    if (na <= eps).any():
        raise ValueError("rot6d: first vector is zero")
    c1 = a / na
    b_perp = b - (b * c1).sum(-1, keepdims=True) * c1
    nb = np.linalg.norm(b_perp, axis=-1, keepdims=True)
    if (nb <= eps * np.maximum(np.linalg.norm(b, axis=-1, keepdims=True), 1.0)).any():
        raise ValueError("rot6d: second vector is parallel to the first")
    c2 = b_perp / nb
    c3 = np.cross(c1, c2)
    return np.stack([c1, c2, c3], axis=-1)


def matrix_to_rot6d(rot: np.ndarray) -> np.ndarray:
    rot = np.asarray(rot, dtype=np.float64)
    return np.concatenate([rot[..., :, 0], rot[..., :, 1]], axis=-1)


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    k = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    return np.eye(3) + s * k + (1 - c) * (k @ k)


@dataclass(frozen=True, eq=False)
class Pose6D:
    """Rigid transform ``x -> R(rot6) x + translation``."""

    rot6: np.ndarray = field(default_factory=lambda: np.array([1.0, 0, 0, 0, 1.0, 0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rot6", _frozen(np.asarray(self.rot6, dtype=np.float64).reshape(6)))
        object.__setattr__(self, "translation", _frozen(np.asarray(self.translation, dtype=np.float64).reshape(3)))

    @classmethod
    def identity(cls) -> "Pose6D":
        return cls()

    @classmethod
    def from_matrix(cls, rot: np.ndarray, translation=(0.0, 0.0, 0.0)) -> "Pose6D":
        return cls(matrix_to_rot6d(rot), translation)

    @classmethod
    def from_homogeneous(cls, m: np.ndarray) -> "Pose6D":
        m = np.asarray(m, dtype=np.float64)
        return cls.from_matrix(m[:3, :3], m[:3, 3])

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "Pose6D":
        return cls.from_matrix(axis_angle_matrix([0, 0, 1], yaw), translation)

    def rotation(self) -> np.ndarray:
        return rot6d_to_matrix(self.rot6)

    def homogeneous(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation()
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation().T + self.translation

    def inverse(self) -> "Pose6D":
        r = self.rotation()
        return Pose6D.from_matrix(r.T, -r.T @ self.translation)

    def compose(self, other: "Pose6D") -> "Pose6D":
        """``self ∘ other``: apply ``other`` first."""
        r1, r2 = self.rotation(), other.rotation()
        return Pose6D.from_matrix(r1 @ r2, r1 @ other.translation + self.translation)

    def to_dict(self) -> dict:
        return {"rot6": self.rot6.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose6D":
        if "rot6" in d:
            return cls(d["rot6"], d.get("translation", (0, 0, 0)))
        if "matrix" in d:
            return cls.from_homogeneous(d["matrix"])
        return cls.from_yaw(float(d.get("yaw", 0.0)), d.get("translation", (0, 0, 0)))


def pose_apply_torch(rot6: torch.Tensor, translation: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    return points @ rot6d_to_matrix(rot6).transpose(-1, -2) + translation


# ---------------------------------------------------------------------------
# primitive meshes used by fixtures and tests


def icosphere(level: int = 1, radius: float = 1.0) -> TriMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    v = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
         [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
         [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
         [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in v]
    faces = f
    for _ in range(level):
        cache: dict[tuple[int, int], int] = {}

        def mid(a: int, b: int) -> int:
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = nf
    return TriMesh(np.array(verts) * radius, np.array(faces))


def cylinder(segments: int = 16, radius: float = 1.0, width: float = 1.0) -> TriMesh:
    """Closed cylinder with its axis along +y, centred at the origin."""
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.cos(ang), np.zeros(segments), radius * np.sin(ang)], axis=1)
    left = ring + [0, -width / 2, 0]
    right = ring + [0, width / 2, 0]
    verts = np.concatenate([left, right, [[0, -width / 2, 0], [0, width / 2, 0]]])
    cl, cr = 2 * segments, 2 * segments + 1
    faces = []
    for i in range(segments):
        j = (i + 1) % segments
        a, b, c, d = i, j, segments + i, segments + j
        faces += [[a, b, d], [a, d, c]]
        faces += [[cl, b, a], [cr, c, d]]
    m = TriMesh(verts, np.array(faces))
    return orient_outward(m)


def orient_outward(mesh: TriMesh) -> TriMesh:
    """Flip all faces if the signed volume of a closed mesh is negative."""
    tri = mesh.vertices[mesh.faces]
    vol = np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum()
    if vol < 0:
        return TriMesh(mesh.vertices, mesh.faces[:, ::-1], mesh.uv)
    return mesh


def signed_volume(vertices: np.ndarray, faces: np.ndarray) -> float:
    tri = np.asarray(vertices)[faces]
    return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)
