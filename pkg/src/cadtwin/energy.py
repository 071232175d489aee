"""Fitting energy: photometric, silhouette, LiDAR, shape, appearance and symmetry terms.

Every term is a torch scalar so gradients come from autograd in float64.
Discrete choices (z-buffer winners, silhouette edges, nearest neighbours,
surface sample faces) can be captured in an :class:`EnergyFreeze` and replayed,
which turns each term into a smooth function for finite-difference checks.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial import cKDTree

from .geometry import Adjacency, TriMesh, build_adjacency, pose_apply_torch, sample_faces
from .rendering import render_torch, specular_color
from .shape_space import ShapeSpace, decode_vertices_torch
from .vehicle import wheel_vertices_torch

log = logging.getLogger(__name__)

TERMS = ("color", "mask", "lidar", "normal", "edge", "app_mat", "app_light", "sym")


class EnergyError(FloatingPointError):
    def __init__(self, term: str, message: str):
        super().__init__(message)
        self.term = term


@dataclass(frozen=True)
class EnergyWeights:
    lambda_color: float = 1.0
    lambda_mask: float = 0.5
    lambda_lidar: float = 0.5
    lambda_shape: float = 0.1
    lambda_sym: float = 0.5
    lambda_app: float = 1.0
    lambda_mat: float = 1e-9
    lambda_light: float = 1e-2
    trim_fraction: float = 0.95
    sample_count: int = 10_000
    huber_delta: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")
        if not 0 < self.trim_fraction <= 1:
            raise ValueError("trim_fraction must lie in (0, 1]")
        if self.sample_count < 1:
            raise ValueError("sample_count must be at least 1")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "EnergyWeights":
        return cls(**d)


@dataclass(frozen=True)
class StageFlags:
    color: bool = True
    mask: bool = True
    lidar: bool = True
    shape: bool = True
    app: bool = True
    sym: bool = True


@dataclass
class EnergyReport:
    terms: dict
    total: float
    gradients: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"terms": self.terms, "total": self.total, "warnings": self.warnings}, sort_keys=True)


# ---------------------------------------------------------------------------
# data terms


def color_clip_pattern(color: torch.Tensor, mask: torch.Tensor) -> np.ndarray:
    """Which foreground channels the [0, 1] clip saturates: -1 low, +1 high, 0 passed through."""
    c = color.detach().reshape(-1, 3)[mask.reshape(-1) > 0.5].numpy()
    return np.where(c > 1.0, 1, np.where(c < 0.0, -1, 0)).astype(np.int8)


def e_color(color: torch.Tensor, image: torch.Tensor, mask: torch.Tensor, delta: float = 0.1,
            clip: Optional[np.ndarray] = None) -> torch.Tensor:
    """Mean Huber residual over observed foreground pixels (and channels).

    The render is clipped to [0, 1] first, like the camera that produced
    ``image``; ``clip`` pins which channels saturate (see
    :func:`color_clip_pattern`), otherwise the current values decide.
    An empty foreground yields 0; callers flag it.
    """
    fg = mask.reshape(-1) > 0.5
    if not bool(fg.any()):
        return color.sum() * 0.0
    c = color.reshape(-1, 3)[fg]
    pat = torch.from_numpy(color_clip_pattern(color, mask) if clip is None else clip)
    c = torch.where(pat > 0, torch.ones_like(c), torch.where(pat < 0, torch.zeros_like(c), c))
    return F.huber_loss(c, image.reshape(-1, 3)[fg], delta=delta)


def e_mask(mask_pred: torch.Tensor, mask_obs: torch.Tensor) -> torch.Tensor:
    return ((mask_pred - mask_obs) ** 2).mean()


@dataclass(frozen=True, eq=False)
class NearestAssignment:
    """Nearest sample for every cloud point, and which pairs survive trimming."""

    nearest: np.ndarray
    kept: np.ndarray


def lidar_assignment(cloud: np.ndarray, samples: np.ndarray, trim: float) -> NearestAssignment:
    d2, idx = cKDTree(samples).query(cloud)
    d2 = np.asarray(d2) ** 2
    n_keep = max(1, int(math.floor(trim * len(cloud) + 1e-9)))
    kept = np.sort(np.argsort(d2, kind="stable")[:n_keep])
    return NearestAssignment(np.asarray(idx, dtype=np.int64), kept)


def e_lidar(cloud, samples: torch.Tensor, trim: float = 0.95,
            assignment: Optional[NearestAssignment] = None) -> torch.Tensor:
    """Trimmed one-sided Chamfer from the cloud to the surface samples.

    Each cloud point is paired with its nearest sample; the ``floor(p |P|)``
    smallest squared distances are averaged.
    """
    cloud_t = torch.as_tensor(np.asarray(cloud, dtype=np.float64)) if not isinstance(cloud, torch.Tensor) else cloud
    if assignment is None:
        assignment = lidar_assignment(cloud_t.detach().numpy(), samples.detach().numpy(), trim)
    k = torch.from_numpy(assignment.kept)
    d = cloud_t[k] - samples[torch.from_numpy(assignment.nearest[assignment.kept])]
    return (d * d).sum(1).mean()


def e_lidar_brute(cloud: np.ndarray, samples: np.ndarray, trim: float) -> float:
    """O(|P| |P_s|) reference used by the tests."""
    d2 = ((cloud[:, None, :] - samples[None]) ** 2).sum(-1).min(1)
    n_keep = max(1, int(math.floor(trim * len(cloud) + 1e-9)))
    return float(np.sort(d2)[:n_keep].mean())


# ---------------------------------------------------------------------------
# regularizers


def shape_terms(vertices: torch.Tensor, faces, adjacency: Adjacency) -> tuple[torch.Tensor, torch.Tensor]:
    """(E_normal, E_edge): mean (1 - n.n')^2 over adjacent face pairs and mean squared edge length."""
    f = torch.tensor(np.array(faces))
    tri = vertices[f]
    n = torch.linalg.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    norm = torch.linalg.norm(n, dim=1, keepdim=True)
    if bool((norm.detach() <= 1e-300).any()):
        bad = int(torch.nonzero(norm.detach().reshape(-1) <= 1e-300)[0])
        raise EnergyError("normal", f"face {bad} has zero area; its normal is undefined")
    n = n / norm
    fp = torch.tensor(np.array(adjacency.face_pairs)).reshape(-1, 2)
    if len(fp):
        e_normal = ((1.0 - (n[fp[:, 0]] * n[fp[:, 1]]).sum(1)) ** 2).mean()
    else:
        e_normal = vertices.sum() * 0.0
    e = torch.tensor(np.array(adjacency.edges))
    e_edge = ((vertices[e[:, 0]] - vertices[e[:, 1]]) ** 2).sum(1).mean() if len(e) else vertices.sum() * 0.0
    return e_normal, e_edge


def e_shape(vertices: torch.Tensor, faces, adjacency: Adjacency) -> torch.Tensor:
    n, e = shape_terms(vertices, faces, adjacency)
    return n + e


SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]], dtype=torch.float64)


def sobel(tex: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Valid-region Sobel responses of an (H, W, C) texture, each (C, H-2, W-2)."""
    x = tex.permute(2, 0, 1)[:, None]
    kx = SOBEL_X.to(tex.dtype)[None, None]
    ky = SOBEL_X.T.to(tex.dtype)[None, None]
    return F.conv2d(x, kx)[:, 0], F.conv2d(x, ky)[:, 0]


def gradient_l1(tex: torch.Tensor) -> torch.Tensor:
    gx, gy = sobel(tex)
    return gx.abs().sum() + gy.abs().sum()


def app_terms(kd: torch.Tensor, orm: torch.Tensor, env_radiance: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(material sparsity, gray light) before weighting."""
    if kd.shape[0] < 3 or kd.shape[1] < 3:
        raise ValueError("textures must be at least 3x3")
    ks = specular_color(kd, orm[..., 2])
    mat = gradient_l1(kd) + gradient_l1(ks)
    light = (env_radiance - env_radiance.mean(1, keepdim=True)).abs().sum()
    return mat, light


def e_app(kd, orm, env_radiance, lambda_mat: float = 1e-9, lambda_light: float = 1e-2) -> torch.Tensor:
    mat, light = app_terms(kd, orm, env_radiance)
    return lambda_mat * mat + lambda_light * light


@dataclass(frozen=True, eq=False)
class SymAssignment:
    to_mirror: np.ndarray  # nearest mirrored vertex for each vertex
    from_mirror: np.ndarray  # nearest vertex for each mirrored vertex


def mirror(vertices, axis):
    a = torch.as_tensor(np.asarray(axis, dtype=np.float64)).to(vertices.dtype)
    a = a / torch.linalg.norm(a)
    return vertices - 2.0 * (vertices @ a)[:, None] * a


def sym_assignment(vertices: np.ndarray, axis) -> SymAssignment:
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    m = vertices - 2.0 * (vertices @ a)[:, None] * a
    _, i = cKDTree(m).query(vertices)
    _, j = cKDTree(vertices).query(m)
    return SymAssignment(np.asarray(i, np.int64), np.asarray(j, np.int64))


def e_sym(vertices: torch.Tensor, axis=(0.0, 1.0, 0.0), assignment: Optional[SymAssignment] = None) -> torch.Tensor:
    """Bidirectional Chamfer between the vertex set and its mirror image (mean of both directions)."""
    m = mirror(vertices, axis)
    if assignment is None:
        assignment = sym_assignment(vertices.detach().numpy(), axis)
    d1 = ((vertices - m[torch.from_numpy(assignment.to_mirror)]) ** 2).sum(1).mean()
    d2 = ((m - vertices[torch.from_numpy(assignment.from_mirror)]) ** 2).sum(1).mean()
    return 0.5 * (d1 + d2)


def chamfer_brute(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric squared Chamfer, mean of the two directions, by double loop over pairs."""
    d2 = ((a[:, None, :] - b[None]) ** 2).sum(-1)
    return 0.5 * (float(d2.min(1).mean()) + float(d2.min(0).mean()))


# ---------------------------------------------------------------------------
# scene state


@dataclass(eq=False)
class ModelTopology:
    """Static mesh structure shared by all iterations of a fit."""

    faces: np.ndarray  # assembled
    body_faces: np.ndarray
    wheel_faces: np.ndarray
    n_wheels: int
    wheel_sides: torch.Tensor
    front: tuple
    uv: Optional[torch.Tensor]
    adjacency: Adjacency  # assembled
    part_faces: np.ndarray  # body + template as one disjoint mesh
    part_adjacency: Adjacency
    mean: torch.Tensor
    basis: torch.Tensor
    symmetry_axis: np.ndarray
    n_body: int

    @classmethod
    def from_space(cls, space: ShapeSpace) -> "ModelTopology":
        st = space.structure
        if st is None:
            raise ValueError("fitting needs a shape space with part structure")
        nb = st.n_body
        part_faces = np.concatenate([st.body_faces, st.wheel_faces + nb])
        nparts = nb + st.n_wheel_vertices
        part_adj = build_adjacency(TriMesh(np.zeros((nparts, 3)), part_faces))
        adj = build_adjacency(TriMesh(np.zeros((space.n_vertices, 3)), space.faces))
        uv = None if space.uv is None else torch.tensor(np.array(space.uv))
        return cls(np.array(space.faces), np.array(st.body_faces), np.array(st.wheel_faces), st.n_wheels,
                   torch.tensor(np.array(st.wheel_sides, dtype=np.float64)), tuple(st.front_wheel_indices), uv, adj,
                   part_faces, part_adj, torch.tensor(np.array(space.mean)), torch.tensor(np.array(space.basis)),
                   np.array(space.symmetry_axis), nb)


GROUPS = ("z", "body", "wheel", "wheel_params", "object_pose", "camera_poses", "kd", "orm", "env")


@dataclass(eq=False)
class SceneState:
    """All free variables of a fit as float64 torch tensors.

    The mesh is either driven by the latent ``z`` (stage 1) or by explicit
    ``body`` / ``wheel`` template vertices with fixed ``hubs``.
    """

    r_w: torch.Tensor
    r_h: torch.Tensor
    t_front: torch.Tensor
    t_back: torch.Tensor
    rho: torch.Tensor
    obj_rot6: torch.Tensor
    obj_trans: torch.Tensor
    cam_rot6: torch.Tensor  # (N, 6)
    cam_trans: torch.Tensor  # (N, 3)
    kd: torch.Tensor
    orm: torch.Tensor
    env_dirs: torch.Tensor
    env_radiance: torch.Tensor
    z: Optional[torch.Tensor] = None
    body: Optional[torch.Tensor] = None
    wheel: Optional[torch.Tensor] = None
    hubs: Optional[torch.Tensor] = None

    def group(self, name: str) -> list[torch.Tensor]:
        g = {
            "z": [self.z], "body": [self.body], "wheel": [self.wheel],
            "wheel_params": [self.r_w, self.r_h, self.t_front, self.t_back, self.rho],
            "object_pose": [self.obj_rot6, self.obj_trans], "camera_poses": [self.cam_rot6, self.cam_trans],
            "kd": [self.kd], "orm": [self.orm], "env": [self.env_radiance],
        }[name]
        return [t for t in g if t is not None]

    def parts(self, topo: ModelTopology):
        """(body, wheel template, hubs) in the object frame."""
        if self.z is not None:
            v = decode_vertices_torch(topo.mean, topo.basis, self.z)
            nb = topo.n_body
            copies = v[nb:].reshape(topo.n_wheels, -1, 3)
            hubs = copies.mean(1)
            return v[:nb], (copies - hubs[:, None]).mean(0), hubs
        return self.body, self.wheel, self.hubs

    def object_vertices(self, topo: ModelTopology) -> torch.Tensor:
        body, wheel, hubs = self.parts(topo)
        k = topo.n_wheels
        poses = torch.eye(4, dtype=torch.float64).repeat(k, 1, 1)
        poses = torch.cat([torch.cat([poses[:, :3, :3], hubs[:, :, None]], 2), poses[:, 3:]], 1)
        wheels = wheel_vertices_torch(wheel, poses, topo.wheel_sides, self.r_w, self.r_h, self.t_front, self.t_back,
                                      self.rho, None, topo.front)
        return torch.cat([body, wheels.reshape(-1, 3)])

    def part_vertices(self, topo: ModelTopology) -> torch.Tensor:
        body, wheel, _ = self.parts(topo)
        return torch.cat([body, wheel])

    def world_vertices(self, topo: ModelTopology) -> torch.Tensor:
        return pose_apply_torch(self.obj_rot6, self.obj_trans, self.object_vertices(topo))


@dataclass(eq=False)
class Targets:
    """Observations as tensors: per-view image/mask/intrinsics plus the LiDAR cloud (box frame)."""

    images: list
    masks: list
    intrinsics: list
    cloud: np.ndarray

    @property
    def n_views(self) -> int:
        return len(self.masks)


@dataclass(eq=False)
class EnergyFreeze:
    visibility: list = field(default_factory=list)
    sample_faces: Optional[np.ndarray] = None
    sample_bary: Optional[np.ndarray] = None
    lidar: Optional[NearestAssignment] = None
    sym: Optional[SymAssignment] = None
    color_clip: list = field(default_factory=list)


def energy_terms(state: SceneState, targets: Targets, topo: ModelTopology, w: EnergyWeights,
                 flags: StageFlags = StageFlags(), tau: float = 1.0, seed: int = 0, specular: bool = True,
                 freeze: Optional[EnergyFreeze] = None, views=None) -> tuple[torch.Tensor, dict, EnergyFreeze, list]:
    """Weighted total, raw per-term tensors, the discrete decisions used, and warnings."""
    terms: dict[str, torch.Tensor] = {}
    warns: list[str] = []
    record = EnergyFreeze()
    v_world = state.world_vertices(topo)
    views = range(targets.n_views) if views is None else views

    if (flags.color or flags.mask) and targets.n_views:
        col_sum, mask_sum, n = 0.0, 0.0, 0
        for j, i in enumerate(views):
            vis = freeze.visibility[j] if freeze is not None and freeze.visibility else None
            out = render_torch(v_world, topo.faces, targets.intrinsics[i], state.cam_rot6[i], state.cam_trans[i], tau,
                               adjacency=topo.adjacency, uv=topo.uv, kd=state.kd, orm=state.orm,
                               env_dirs=state.env_dirs, env_radiance=state.env_radiance, shading=flags.color,
                               specular=specular, visibility=vis)
            record.visibility.append(out.visibility)
            if flags.mask:
                mask_sum = mask_sum + e_mask(out.mask, targets.masks[i])
            if flags.color:
                if not bool((targets.masks[i] > 0.5).any()):
                    warns.append(f"view {i}: empty foreground, color term is 0")
                clip = freeze.color_clip[j] if freeze is not None and freeze.color_clip else \
                    color_clip_pattern(out.color, targets.masks[i])
                record.color_clip.append(clip)
                col_sum = col_sum + e_color(out.color, targets.images[i], targets.masks[i], w.huber_delta, clip)
            n += 1
        if flags.mask:
            terms["mask"] = mask_sum / n
        if flags.color:
            terms["color"] = col_sum / n

    if flags.lidar and len(targets.cloud):
        if freeze is not None and freeze.sample_faces is not None:
            fi, bary = freeze.sample_faces, freeze.sample_bary
        else:
            areas = _face_areas_np(v_world.detach().numpy(), topo.faces)
            fi, bary = sample_faces(areas, w.sample_count, seed)
        record.sample_faces, record.sample_bary = fi, bary
        tri = v_world[torch.from_numpy(topo.faces[fi])]
        samples = (torch.from_numpy(bary)[:, :, None] * tri).sum(1)
        assign = freeze.lidar if freeze is not None and freeze.lidar is not None else \
            lidar_assignment(targets.cloud, samples.detach().numpy(), w.trim_fraction)
        record.lidar = assign
        terms["lidar"] = e_lidar(targets.cloud, samples, w.trim_fraction, assign)

    if flags.shape:
        terms["normal"], terms["edge"] = shape_terms(state.part_vertices(topo), topo.part_faces, topo.part_adjacency)

    if flags.app:
        terms["app_mat"], terms["app_light"] = app_terms(state.kd, state.orm, state.env_radiance)

    if flags.sym:
        v_obj = state.object_vertices(topo)
        assign = freeze.sym if freeze is not None and freeze.sym is not None else \
            sym_assignment(v_obj.detach().numpy(), topo.symmetry_axis)
        record.sym = assign
        terms["sym"] = e_sym(v_obj, topo.symmetry_axis, assign)

    for name, val in terms.items():
        if not bool(torch.isfinite(val)):
            raise EnergyError(name, f"energy term '{name}' is not finite")
    total = combine(terms, w)
    return total, terms, record, warns


def combine(terms: dict, w: EnergyWeights):
    total = 0.0
    weight = {"color": w.lambda_color, "mask": w.lambda_mask, "lidar": w.lambda_lidar, "normal": w.lambda_shape,
              "edge": w.lambda_shape, "app_mat": w.lambda_app * w.lambda_mat, "app_light": w.lambda_app * w.lambda_light,
              "sym": w.lambda_sym}
    for name, val in terms.items():
        total = total + weight[name] * val
    return total


def _face_areas_np(v, faces):
    tri = v[faces]
    return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)


def total_energy(state: SceneState, targets: Targets, topo: ModelTopology, w: EnergyWeights,
                 flags: StageFlags = StageFlags(), tau: float = 1.0, seed: int = 0,
                 freeze: Optional[EnergyFreeze] = None, groups=GROUPS) -> EnergyReport:
    """Evaluate the energy and its gradient for every requested variable group."""
    leaves = {g: state.group(g) for g in groups}
    leaves = {g: ts for g, ts in leaves.items() if ts}
    saved = {}
    for ts in leaves.values():
        for t in ts:
            saved[id(t)] = t.requires_grad
            t.requires_grad_(True)
    try:
        total, terms, _, warns = energy_terms(state, targets, topo, w, flags, tau, seed, freeze=freeze)
        flat = [t for ts in leaves.values() for t in ts]
        grads = torch.autograd.grad(total, flat, allow_unused=True) if torch.is_tensor(total) and total.requires_grad else [None] * len(flat)
    finally:
        for ts in leaves.values():
            for t in ts:
                t.requires_grad_(saved[id(t)])
    out, pos = {}, 0
    for g, ts in leaves.items():
        gs = []
        for t in ts:
            gr = grads[pos]
            pos += 1
            gs.append(np.zeros(tuple(t.shape)) if gr is None else gr.numpy())
        if any(not np.isfinite(x).all() for x in gs):
            raise EnergyError(g, f"gradient for group '{g}' is not finite")
        out[g] = gs[0] if len(gs) == 1 else gs
    return EnergyReport({k: float(v.detach()) for k, v in terms.items()}, float(total.detach()) if torch.is_tensor(total) else float(total), out, warns)
