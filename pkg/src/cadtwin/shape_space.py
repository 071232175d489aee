"""PCA shape space over vertex-aligned vehicle exemplars and template alignment.

Exemplars are assembled meshes at their default articulation (wheels placed
by a pure translation to the hub, unit scale, no steering). Body and wheel
copies therefore all live in the space, so wheelbase, track and tyre size are
latent directions while ``r``, ``t_front``, ``t_back`` and ``rho`` stay
articulation parameters on top of the decoded mesh.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
from scipy.spatial import cKDTree

from .geometry import TriMesh, build_adjacency
from .vehicle import VehicleMesh, assemble

log = logging.getLogger(__name__)

MAGIC = b"CADSHAPE"
VERSION = (1, 0)


class TopologyError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PartStructure:
    """How an assembled vertex array splits into body and wheel copies."""

    n_body: int
    body_faces: np.ndarray
    wheel_faces: np.ndarray
    n_wheels: int
    wheel_sides: np.ndarray
    front_wheel_indices: tuple = (0, 1)
    body_uv: Optional[np.ndarray] = None
    wheel_uv: Optional[np.ndarray] = None

    @property
    def n_wheel_vertices(self) -> int:
        return int(self.wheel_faces.max()) + 1

    @property
    def n_vertices(self) -> int:
        return self.n_body + self.n_wheels * self.n_wheel_vertices

    def labels(self) -> np.ndarray:
        nw = self.n_wheel_vertices
        return np.concatenate([np.zeros(self.n_body, np.int64)] + [np.full(nw, k + 1, np.int64) for k in range(self.n_wheels)])

    def faces(self) -> np.ndarray:
        nw = self.n_wheel_vertices
        return np.concatenate([self.body_faces] + [self.wheel_faces + self.n_body + k * nw for k in range(self.n_wheels)])

    def uv(self) -> Optional[np.ndarray]:
        if self.body_uv is None or self.wheel_uv is None:
            return None
        return np.concatenate([self.body_uv] + [self.wheel_uv] * self.n_wheels)

    @classmethod
    def from_vehicle(cls, vm: VehicleMesh) -> "PartStructure":
        return cls(vm.body.n_vertices, vm.body.faces, vm.wheel_template.faces, vm.n_wheels, np.array(vm.wheel_sides),
                   vm.front_wheel_indices, vm.body.uv, vm.wheel_template.uv)

    @classmethod
    def from_labels(cls, mesh: TriMesh, labels: np.ndarray, front_wheel_indices=None) -> "PartStructure":
        """Infer the structure of an assembled mesh from per-vertex part labels.

        Vertices must be ordered body first, then wheel copies; faces likewise.
        Sides come from the sign of each hub's lateral coordinate and, unless
        given, the front wheels are the two with the largest forward coordinate.
        """
        labels = np.asarray(labels, dtype=np.int64)
        if len(labels) != mesh.n_vertices or (np.diff(labels) < 0).any():
            raise TopologyError("part labels must be sorted and cover every vertex")
        n_body = int((labels == 0).sum())
        k = int(labels.max())
        counts = np.bincount(labels, minlength=k + 1)[1:]
        if k < 2 or (counts != counts[0]).any():
            raise TopologyError("wheel parts must be at least two copies of equal size")
        nw = int(counts[0])
        fb = mesh.faces[(mesh.faces < n_body).all(1)]
        first = mesh.faces[((mesh.faces >= n_body) & (mesh.faces < n_body + nw)).all(1)] - n_body
        hubs = np.stack([mesh.vertices[n_body + i * nw:n_body + (i + 1) * nw].mean(0) for i in range(k)])
        sides = np.where(hubs[:, 1] >= 0, 1.0, -1.0)
        if front_wheel_indices is None:
            front_wheel_indices = tuple(sorted(np.argsort(-hubs[:, 0], kind="stable")[:2].tolist()))
        st = cls(n_body, fb, first, k, sides, tuple(front_wheel_indices),
                 None if mesh.uv is None else mesh.uv[:n_body], None if mesh.uv is None else mesh.uv[n_body:n_body + nw])
        if not np.array_equal(st.faces(), mesh.faces):
            raise TopologyError("face list is not body faces followed by identical wheel copies")
        return st

    def to_dict(self) -> dict:
        return {"n_body": self.n_body, "n_wheels": self.n_wheels, "wheel_sides": np.asarray(self.wheel_sides).tolist(),
                "front_wheel_indices": list(self.front_wheel_indices), "n_body_faces": len(self.body_faces),
                "n_wheel_faces": len(self.wheel_faces), "has_uv": self.body_uv is not None}


@dataclass(frozen=True, eq=False)
class ShapeSpace:
    mean: np.ndarray  # (V, 3)
    basis: np.ndarray  # (3V, k) orthonormal columns
    codes: np.ndarray  # (n_exemplars, k)
    sigma: np.ndarray  # (k,) per-component standard deviation of the codes
    faces: np.ndarray
    part_labels: np.ndarray
    symmetry_axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    uv: Optional[np.ndarray] = None
    structure: Optional[PartStructure] = None
    metadata: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.basis.shape[1]

    @property
    def n_vertices(self) -> int:
        return len(self.mean)

    def mesh(self, vertices: np.ndarray) -> TriMesh:
        return TriMesh(vertices, self.faces, self.uv)

    def body_faces(self) -> np.ndarray:
        return self.structure.body_faces if self.structure is not None else self.faces


def _as_vertices(x) -> np.ndarray:
    if isinstance(x, VehicleMesh):
        return assemble(x).vertices
    if isinstance(x, TriMesh):
        return x.vertices
    return np.asarray(x, dtype=np.float64).reshape(-1, 3)


def _faces_of(x) -> np.ndarray:
    return x.faces() if isinstance(x, VehicleMesh) else x.faces


def build_shape_space(exemplars: Sequence[Union[VehicleMesh, TriMesh]], k_pca: int = 25,
                      structure: Optional[PartStructure] = None, symmetry_axis=(0.0, 1.0, 0.0)) -> ShapeSpace:
    """Principal components of the stacked exemplar vertex arrays.

    ``k_pca`` is clamped to the number of exemplars (and to 3V). Basis signs are
    fixed so the largest-magnitude entry of each column is positive.
    """
    if len(exemplars) < 2:
        raise ValueError("a shape space needs at least two exemplars")
    if structure is None and isinstance(exemplars[0], VehicleMesh):
        structure = PartStructure.from_vehicle(exemplars[0])
    faces = _faces_of(exemplars[0])
    nv = len(_as_vertices(exemplars[0]))
    rows = []
    for i, ex in enumerate(exemplars):
        v = _as_vertices(ex)
        if len(v) != nv or not np.array_equal(_faces_of(ex), faces):
            raise TopologyError(f"exemplar {i} does not share the topology of exemplar 0")
        rows.append(v.reshape(-1))
    x = np.stack(rows)
    mean = x.mean(0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    k = int(min(k_pca, vt.shape[0]))
    if k < k_pca:
        log.info("k_pca clamped from %d to %d", k_pca, k)
    basis = vt[:k].T.copy()
    pivot = np.argmax(np.abs(basis), axis=0)
    basis *= np.sign(basis[pivot, np.arange(k)])
    codes = (x - mean) @ basis
    sigma = s[:k] / np.sqrt(max(len(x) - 1, 1))
    if structure is not None:
        labels = structure.labels()
        uv = structure.uv()
    else:
        labels = np.zeros(nv, np.int64)
        uv = exemplars[0].uv if isinstance(exemplars[0], TriMesh) else None
    axis = np.asarray(symmetry_axis, dtype=np.float64)
    return ShapeSpace(mean.reshape(-1, 3), basis, codes, sigma, np.asarray(faces), labels, axis / np.linalg.norm(axis), uv,
                      structure, {"canonical_frame": "x forward, y left, z up; wheel axle +y", "n_exemplars": len(x)})


def encode(space: ShapeSpace, exemplar) -> np.ndarray:
    return space.basis.T @ (_as_vertices(exemplar) - space.mean).reshape(-1)


def decode_vertices(space: ShapeSpace, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if len(z) > space.k:
        raise ValueError(f"latent has {len(z)} entries but the space has {space.k} components")
    return space.mean + (space.basis[:, :len(z)] @ z).reshape(-1, 3)


def decode_vertices_torch(mean: torch.Tensor, basis: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    return mean + (basis[:, :z.shape[0]] @ z).reshape(-1, 3)


def split_parts(space: ShapeSpace, vertices):
    """Body vertices, wheel template and hub centres from an assembled array.

    Works for numpy arrays and torch tensors. The template is the mean of the
    hub-centred copies; for decoded vertices the copies are exact translates.
    """
    st = space.structure
    if st is None:
        raise ValueError("shape space carries no part structure")
    nb, nw = st.n_body, st.n_wheel_vertices
    body = vertices[:nb]
    copies = vertices[nb:].reshape(st.n_wheels, nw, 3)
    hubs = copies.mean(1)
    template = (copies - hubs[:, None, :]).mean(0)
    return body, template, hubs


def decode(space: ShapeSpace, z) -> VehicleMesh:
    v = decode_vertices(space, z)
    body, template, hubs = split_parts(space, v)
    st = space.structure
    poses = np.tile(np.eye(4), (st.n_wheels, 1, 1))
    poses[:, :3, 3] = hubs
    return VehicleMesh(TriMesh(body, st.body_faces, st.body_uv), TriMesh(template, st.wheel_faces, st.wheel_uv), poses,
                       st.wheel_sides, front_wheel_indices=st.front_wheel_indices)


def reconstruction_error(space: ShapeSpace, exemplars, k: Optional[int] = None) -> float:
    """Root-mean-square vertex error of projecting ``exemplars`` onto the first ``k`` components."""
    k = space.k if k is None else k
    err = 0.0
    count = 0
    for ex in exemplars:
        v = _as_vertices(ex)
        z = encode(space, v)[:k]
        err += float(((decode_vertices(space, z) - v) ** 2).sum())
        count += v.size
    return (err / count) ** 0.5


# ---------------------------------------------------------------------------
# persistence


def save_shape_space(path, space: ShapeSpace) -> None:
    meta = dict(space.metadata)
    meta.update({
        "n_vertices": space.n_vertices, "k": space.k, "n_codes": len(space.codes), "n_faces": len(space.faces),
        "symmetry_axis": space.symmetry_axis.tolist(), "has_uv": space.uv is not None,
        "structure": None if space.structure is None else space.structure.to_dict(),
    })
    blob = json.dumps(meta, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<HHQ", VERSION[0], VERSION[1], len(blob)), blob]
    for a, dt in ((space.mean, "<f8"), (space.basis, "<f8"), (space.codes, "<f8"), (space.sigma, "<f8"),
                  (space.part_labels, "<i4"), (space.faces, "<i4")):
        parts.append(np.ascontiguousarray(a, dtype=dt).tobytes())
    if space.uv is not None:
        parts.append(np.ascontiguousarray(space.uv, dtype="<f8").tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_shape_space(path) -> ShapeSpace:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 12 + 32 or not data.startswith(MAGIC):
        raise ValueError(f"{path}: not a shape-space archive")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ValueError(f"{path}: checksum mismatch (truncated or corrupt)")
    major, minor, n = struct.unpack_from("<HHQ", body, len(MAGIC))
    if major != VERSION[0]:
        raise ValueError(f"{path}: unsupported shape-space version {major}.{minor}")
    off = len(MAGIC) + 12
    meta = json.loads(body[off:off + n])
    off += n

    def take(count, dt, shape):
        nonlocal off
        a = np.frombuffer(body, dtype=dt, count=count, offset=off).reshape(shape)
        off += a.nbytes
        return a.astype(np.float64 if dt == "<f8" else np.int64)

    nv, k, nc, nf = meta["n_vertices"], meta["k"], meta["n_codes"], meta["n_faces"]
    mean = take(nv * 3, "<f8", (nv, 3))
    basis = take(nv * 3 * k, "<f8", (nv * 3, k))
    codes = take(nc * k, "<f8", (nc, k))
    sigma = take(k, "<f8", (k,))
    labels = take(nv, "<i4", (nv,))
    faces = take(nf * 3, "<i4", (nf, 3))
    uv = take(nv * 2, "<f8", (nv, 2)) if meta["has_uv"] else None
    st = None
    if meta.get("structure"):
        sd = meta["structure"]
        nb = sd["n_body"]
        nwf = sd["n_wheel_faces"]
        fb = faces[:sd["n_body_faces"]]
        fw = faces[sd["n_body_faces"]:sd["n_body_faces"] + nwf] - nb
        nw = int(fw.max()) + 1
        st = PartStructure(nb, fb, fw, sd["n_wheels"], np.array(sd["wheel_sides"]), tuple(sd["front_wheel_indices"]),
                           None if uv is None else uv[:nb], None if uv is None else uv[nb:nb + nw])
    extra = {key: meta[key] for key in meta if key not in ("n_vertices", "k", "n_codes", "n_faces", "has_uv", "structure", "symmetry_axis")}
    return ShapeSpace(mean, basis, codes, sigma, faces, labels, np.array(meta["symmetry_axis"]), uv, st, extra)


# ---------------------------------------------------------------------------
# template alignment


@dataclass(frozen=True)
class AlignmentConfig:
    lambda_shape: float = 0.1
    iterations: int = 300
    step_size: float = 1.0  # initial step; adapted by backtracking
    anchored: bool = True  # regularize the displacement from the source instead of the raw shape
    tol: float = 1e-12

    def __post_init__(self):
        if self.lambda_shape < 0:
            raise ValueError("lambda_shape must be non-negative")


def _shape_reg(v, v0, edges, face_pairs, faces, n0_dot, anchored):
    if anchored:
        d = v - v0
        e_edge = ((d[edges[:, 0]] - d[edges[:, 1]]) ** 2).sum(1).mean()
        e_tr = (d.mean(0) ** 2).sum()
    else:
        e_edge = ((v[edges[:, 0]] - v[edges[:, 1]]) ** 2).sum(1).mean()
        e_tr = 0.0
    if len(face_pairs) == 0:
        return e_edge + e_tr
    tri = v[faces]
    n = torch.linalg.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    n = n / torch.linalg.norm(n, dim=1, keepdim=True)
    dot = (n[face_pairs[:, 0]] * n[face_pairs[:, 1]]).sum(1)
    e_normal = ((dot - n0_dot) ** 2).mean() if anchored else ((1.0 - dot) ** 2).mean()
    return e_normal + e_edge + e_tr


def align_template(source: TriMesh, target_points, cfg: AlignmentConfig = AlignmentConfig(),
                   trace: Optional[list] = None) -> TriMesh:
    """Deform ``source`` onto a CAD point set, keeping its topology.

    Minimizes symmetric Chamfer(V, P) + lambda * R(V) by gradient descent with
    Armijo backtracking, so the recorded energies never increase. In anchored
    mode R penalizes changes of edge vectors, dihedral cosines and the
    centroid relative to the source, which makes an already aligned source a
    fixed point.
    """
    pts = np.array(target_points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 3:
        raise ValueError("alignment needs at least three target points")
    adj = build_adjacency(source)
    edges = torch.tensor(np.array(adj.edges))
    pairs = torch.tensor(np.array(adj.face_pairs)).reshape(-1, 2)
    faces = torch.tensor(np.array(source.faces))
    v0 = torch.tensor(np.array(source.vertices))
    tree_p = cKDTree(pts)
    pt = torch.from_numpy(pts)
    with torch.no_grad():
        tri = v0[faces]
        n = torch.linalg.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        n = n / torch.linalg.norm(n, dim=1, keepdim=True)
        n0_dot = (n[pairs[:, 0]] * n[pairs[:, 1]]).sum(1) if len(pairs) else None

    def energy(v, grad=False):
        vn = v.detach().numpy()
        _, i_vp = tree_p.query(vn)
        _, i_pv = cKDTree(vn).query(pts)
        cd = ((v - pt[i_vp]) ** 2).sum(1).mean() + ((pt - v[i_pv]) ** 2).sum(1).mean()
        e = cd + cfg.lambda_shape * _shape_reg(v, v0, edges, pairs, faces, n0_dot, cfg.anchored)
        if not torch.isfinite(e):
            raise FloatingPointError(f"non-finite alignment energy at iteration {it}")
        return e

    it = 0
    v = v0.clone().requires_grad_(True)
    e = energy(v)
    step = cfg.step_size
    if trace is not None:
        trace.append(float(e.detach()))
    for it in range(1, cfg.iterations + 1):
        (g,) = torch.autograd.grad(e, v)
        gg = float((g * g).sum())
        if gg <= cfg.tol ** 2:
            break
        accepted = False
        while step > 1e-12:
            with torch.no_grad():
                cand = (v - step * g).requires_grad_(True)
            e_new = energy(cand)
            if float(e_new.detach()) <= float(e.detach()) - 1e-4 * step * gg:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        v, e = cand, e_new
        step *= 2.0
        if trace is not None:
            trace.append(float(e.detach()))
    return source.with_vertices(v.detach().numpy())
