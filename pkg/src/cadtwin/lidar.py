"""LiDAR simulation: BVH ray casting, spinning-sensor patterns, occlusion editing."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional

import numba
import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose6D, TriMesh
from .meshio import read_ply, write_ply

OCCLUSION_MARGIN = 0.05


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    intensity: Optional[np.ndarray] = None
    ray_origin: Optional[np.ndarray] = None
    frame_id: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(pts).all():
            raise ValueError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)
        n = len(pts)
        if self.intensity is not None:
            it = np.asarray(self.intensity, dtype=np.float64).reshape(n)
            if ((it < 0) | (it > 1)).any():
                raise ValueError("intensity must lie in [0, 1]")
            object.__setattr__(self, "intensity", it)
        if self.ray_origin is not None:
            object.__setattr__(self, "ray_origin", np.broadcast_to(np.asarray(self.ray_origin, dtype=np.float64), (n, 3)).copy())
        if self.frame_id is not None:
            object.__setattr__(self, "frame_id", np.asarray(self.frame_id, dtype=np.int64).reshape(n))

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)), np.zeros(0, dtype=np.int64))

    def subset(self, idx) -> "PointCloud":
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return PointCloud(self.points[idx], pick(self.intensity), pick(self.ray_origin), pick(self.frame_id))

    def transformed(self, pose: Pose6D) -> "PointCloud":
        ro = None if self.ray_origin is None else pose.apply(self.ray_origin)
        return replace(self, points=pose.apply(self.points), ray_origin=ro)

    @staticmethod
    def concatenate(clouds: list["PointCloud"]) -> "PointCloud":
        clouds = [c for c in clouds if len(c)]
        if not clouds:
            return PointCloud.empty()

        def cat(name, width):
            parts = [getattr(c, name) for c in clouds]
            if any(p is None for p in parts):
                return None
            return np.concatenate(parts)

        return PointCloud(cat("points", 3), cat("intensity", 1), cat("ray_origin", 3), cat("frame_id", 1))


def save_cloud(path, cloud: PointCloud, sidecar: Optional[dict] = None) -> None:
    props = {"x": cloud.points[:, 0], "y": cloud.points[:, 1], "z": cloud.points[:, 2]}
    props["intensity"] = cloud.intensity if cloud.intensity is not None else np.zeros(len(cloud))
    if cloud.ray_origin is not None:
        props.update({"ox": cloud.ray_origin[:, 0], "oy": cloud.ray_origin[:, 1], "oz": cloud.ray_origin[:, 2]})
    if cloud.frame_id is not None:
        props["frame"] = cloud.frame_id.astype(np.int32)
    write_ply(path, props)
    if sidecar is not None:
        Path(path).with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_cloud(path) -> PointCloud:
    props, _ = read_ply(path)
    pts = np.stack([props["x"], props["y"], props["z"]], 1).astype(np.float64)
    it = props.get("intensity")
    ro = None
    if all(k in props for k in ("ox", "oy", "oz")):
        ro = np.stack([props["ox"], props["oy"], props["oz"]], 1).astype(np.float64)
    fr = props.get("frame")
    return PointCloud(pts, None if it is None else it.astype(np.float64), ro, fr)


# ---------------------------------------------------------------------------
# BVH


@dataclass(frozen=True, eq=False)
class Bvh:
    """Flattened AABB hierarchy. Leaves reference ``tri_index[start:start+count]``."""

    node_min: np.ndarray
    node_max: np.ndarray
    node_left: np.ndarray  # child index, -1 for leaves
    node_right: np.ndarray
    node_start: np.ndarray
    node_count: np.ndarray
    tri_index: np.ndarray
    triangles: np.ndarray  # (F, 3, 3)


def build_bvh(mesh_or_triangles, leaf_size: int = 4) -> Bvh:
    """Median-split BVH on triangle centroids along the widest axis."""
    if isinstance(mesh_or_triangles, TriMesh):
        tris = mesh_or_triangles.vertices[mesh_or_triangles.faces]
    else:
        tris = np.asarray(mesh_or_triangles, dtype=np.float64).reshape(-1, 3, 3)
    tris = np.ascontiguousarray(tris)
    n = len(tris)
    cent = tris.mean(1)
    tmin, tmax = tris.min(1), tris.max(1)
    order = np.arange(n)
    nmin, nmax, left, right, start, count = [], [], [], [], [], []

    def new_node(lo, hi):
        idx = order[lo:hi]
        nmin.append(tmin[idx].min(0) if len(idx) else np.zeros(3))
        nmax.append(tmax[idx].max(0) if len(idx) else np.zeros(3))
        left.append(-1)
        right.append(-1)
        start.append(lo)
        count.append(hi - lo)
        return len(nmin) - 1

    root = new_node(0, n)
    stack = [(root, 0, n)]
    while stack:
        node, lo, hi = stack.pop()
        if hi - lo <= leaf_size:
            continue
        idx = order[lo:hi]
        ext = cent[idx].max(0) - cent[idx].min(0)
        axis = int(np.argmax(ext))
        if ext[axis] <= 0:
            continue
        sub = np.argsort(cent[idx, axis], kind="stable")
        order[lo:hi] = idx[sub]
        mid = (lo + hi) // 2
        l_node = new_node(lo, mid)
        r_node = new_node(mid, hi)
        left[node], right[node] = l_node, r_node
        count[node] = 0
        stack.append((r_node, mid, hi))
        stack.append((l_node, lo, mid))
    return Bvh(np.array(nmin).reshape(-1, 3), np.array(nmax).reshape(-1, 3), np.array(left, dtype=np.int64),
               np.array(right, dtype=np.int64), np.array(start, dtype=np.int64), np.array(count, dtype=np.int64),
               order.astype(np.int64), tris)


@numba.njit(cache=True)
def _intersect_tri(o, d, kz, kx, ky, sx, sy, sz, tri):
    """Watertight ray/triangle test (shear + scale to a ray-aligned frame).

    Returns (t, b0, b1, b2) with t = inf on a miss.
    """
    ax = tri[0, kx] - o[kx]
    ay = tri[0, ky] - o[ky]
    az = tri[0, kz] - o[kz]
    bx = tri[1, kx] - o[kx]
    by = tri[1, ky] - o[ky]
    bz = tri[1, kz] - o[kz]
    cx = tri[2, kx] - o[kx]
    cy = tri[2, ky] - o[ky]
    cz = tri[2, kz] - o[kz]
    ax = ax - sx * az
    ay = ay - sy * az
    bx = bx - sx * bz
    by = by - sy * bz
    cx = cx - sx * cz
    cy = cy - sy * cz
    u = cx * by - cy * bx
    v = ax * cy - ay * cx
    w = bx * ay - by * ax
    if (u < 0.0 or v < 0.0 or w < 0.0) and (u > 0.0 or v > 0.0 or w > 0.0):
        return np.inf, 0.0, 0.0, 0.0
    det = u + v + w
    if det == 0.0:
        return np.inf, 0.0, 0.0, 0.0
    t_scaled = u * sz * az + v * sz * bz + w * sz * cz
    t = t_scaled / det
    return t, u / det, v / det, w / det


@numba.njit(cache=True)
def _ray_setup(d):
    kz = 0
    if abs(d[1]) > abs(d[kz]):
        kz = 1
    if abs(d[2]) > abs(d[kz]):
        kz = 2
    kx = kz + 1
    if kx == 3:
        kx = 0
    ky = kx + 1
    if ky == 3:
        ky = 0
    if d[kz] < 0.0:
        kx, ky = ky, kx
    sx = d[kx] / d[kz]
    sy = d[ky] / d[kz]
    sz = 1.0 / d[kz]
    return kz, kx, ky, sx, sy, sz


@numba.njit(cache=True)
def _box_hit(o, inv, bmin, bmax, tmax):
    t0 = 0.0
    t1 = tmax
    for a in range(3):
        ta = (bmin[a] - o[a]) * inv[a]
        tb = (bmax[a] - o[a]) * inv[a]
        if ta > tb:
            ta, tb = tb, ta
        # NaN (0 * inf) means the ray lies in the slab plane: keep it
        if ta == ta and ta > t0:
            t0 = ta
        if tb == tb and tb < t1:
            t1 = tb
        if t0 > t1 * (1.0 + 4e-15) + 1e-300:
            return False
    return True


@numba.njit(cache=True)
def _cast_bvh(origins, dirs, max_range, nmin, nmax, left, right, start, count, tri_index, tris, out_t, out_f, out_b):
    stack = np.empty(128, dtype=np.int64)
    for r in range(origins.shape[0]):
        o = origins[r]
        d = dirs[r]
        kz, kx, ky, sx, sy, sz = _ray_setup(d)
        inv = np.empty(3)
        for a in range(3):
            inv[a] = 1.0 / d[a] if d[a] != 0.0 else np.inf
        best = np.inf
        best_f = -1
        b0 = 0.0
        b1 = 0.0
        b2 = 0.0
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            lim = best if best < max_range[r] else max_range[r]
            if not _box_hit(o, inv, nmin[node], nmax[node], lim):
                continue
            if left[node] < 0:
                for j in range(start[node], start[node] + count[node]):
                    f = tri_index[j]
                    t, u, v, w = _intersect_tri(o, d, kz, kx, ky, sx, sy, sz, tris[f])
                    if t > 0.0 and t <= max_range[r]:
                        if t < best or (t == best and f < best_f):
                            best = t
                            best_f = f
                            b0, b1, b2 = u, v, w
            else:
                stack[sp] = right[node]
                sp += 1
                stack[sp] = left[node]
                sp += 1
        out_t[r] = best
        out_f[r] = best_f
        out_b[r, 0] = b0
        out_b[r, 1] = b1
        out_b[r, 2] = b2


@numba.njit(cache=True)
def _cast_brute(origins, dirs, max_range, tris, out_t, out_f, out_b):
    for r in range(origins.shape[0]):
        o = origins[r]
        d = dirs[r]
        kz, kx, ky, sx, sy, sz = _ray_setup(d)
        best = np.inf
        best_f = -1
        b0 = 0.0
        b1 = 0.0
        b2 = 0.0
        for f in range(tris.shape[0]):
            t, u, v, w = _intersect_tri(o, d, kz, kx, ky, sx, sy, sz, tris[f])
            if t > 0.0 and t <= max_range[r]:
                if t < best or (t == best and f < best_f):
                    best = t
                    best_f = f
                    b0, b1, b2 = u, v, w
        out_t[r] = best
        out_f[r] = best_f
        out_b[r, 0] = b0
        out_b[r, 1] = b1
        out_b[r, 2] = b2


@dataclass(frozen=True, eq=False)
class RayHits:
    t: np.ndarray  # inf on miss
    face: np.ndarray  # -1 on miss
    barycentric: np.ndarray

    @property
    def hit(self) -> np.ndarray:
        return self.face >= 0


def _prep(origins, directions, max_range):
    o = np.ascontiguousarray(np.atleast_2d(origins), dtype=np.float64)
    d = np.ascontiguousarray(np.atleast_2d(directions), dtype=np.float64)
    o = np.ascontiguousarray(np.broadcast_to(o, d.shape))
    mr = np.ascontiguousarray(np.broadcast_to(np.asarray(max_range, dtype=np.float64), (len(d),)))
    return o, d, mr


def cast_rays(bvh: Bvh, origins, directions, max_range=np.inf) -> RayHits:
    o, d, mr = _prep(origins, directions, max_range)
    n = len(d)
    t, f, b = np.empty(n), np.empty(n, dtype=np.int64), np.empty((n, 3))
    if len(bvh.triangles) == 0:
        return RayHits(np.full(n, np.inf), np.full(n, -1), np.zeros((n, 3)))
    _cast_bvh(o, d, mr, bvh.node_min, bvh.node_max, bvh.node_left, bvh.node_right, bvh.node_start, bvh.node_count,
              bvh.tri_index, bvh.triangles, t, f, b)
    return RayHits(t, f, b)


def cast_rays_brute(triangles: np.ndarray, origins, directions, max_range=np.inf) -> RayHits:
    """O(rays x triangles) reference used as an oracle for :func:`cast_rays`."""
    o, d, mr = _prep(origins, directions, max_range)
    n = len(d)
    t, f, b = np.empty(n), np.empty(n, dtype=np.int64), np.empty((n, 3))
    tris = np.ascontiguousarray(triangles, dtype=np.float64).reshape(-1, 3, 3)
    _cast_brute(o, d, mr, tris, t, f, b)
    return RayHits(t, f, b)


def cast_ray(bvh: Bvh, origin, direction, max_range=np.inf):
    """Nearest hit as ``(t, face, barycentric)`` or ``None``."""
    h = cast_rays(bvh, np.reshape(origin, (1, 3)), np.reshape(direction, (1, 3)), max_range)
    if h.face[0] < 0:
        return None
    return float(h.t[0]), int(h.face[0]), h.barycentric[0]


# ---------------------------------------------------------------------------
# sensor patterns and sweeps


@dataclass(frozen=True, eq=False)
class LidarPattern:
    beams: np.ndarray  # elevation angles, radians, ascending
    azimuth_step: float
    origins: list = field(default_factory=lambda: [Pose6D()])  # sensor -> world, one per frame
    max_range: float = 120.0

    def __post_init__(self):
        beams = np.asarray(self.beams, dtype=np.float64).reshape(-1)
        if (np.diff(beams) < 0).any():
            raise ValueError("beam elevations must be sorted")
        if not 0 < self.azimuth_step < 2 * np.pi:
            raise ValueError("azimuth step must lie in (0, 2π)")
        object.__setattr__(self, "beams", beams)

    @property
    def n_azimuth(self) -> int:
        return int(np.ceil(2 * np.pi / self.azimuth_step - 1e-9))

    def local_directions(self) -> np.ndarray:
        az = np.arange(self.n_azimuth) * self.azimuth_step
        el = self.beams
        ce = np.cos(el)[:, None]
        return np.stack([ce * np.cos(az)[None], ce * np.sin(az)[None], np.broadcast_to(np.sin(el)[:, None], (len(el), len(az)))], -1).reshape(-1, 3)

    def to_dict(self) -> dict:
        return {"beams_deg": np.degrees(self.beams).tolist(), "azimuth_step_deg": float(np.degrees(self.azimuth_step)),
                "max_range": self.max_range, "origins": [p.to_dict() for p in self.origins]}

    @classmethod
    def from_dict(cls, d: dict) -> "LidarPattern":
        beams = np.radians(d["beams_deg"]) if "beams_deg" in d else np.asarray(d["beams"])
        step = np.radians(d["azimuth_step_deg"]) if "azimuth_step_deg" in d else float(d["azimuth_step"])
        origins = [Pose6D.from_dict(o) for o in d.get("origins", [{}])] or [Pose6D()]
        return cls(np.sort(beams), step, origins, float(d.get("max_range", 120.0)))


def default_pattern(origins=None, azimuth_step_deg: float = 0.2) -> LidarPattern:
    """64-beam spinning pattern shipped as package data."""
    raw = json.loads(resources.files("cadtwin").joinpath("data/pattern64.json").read_text())
    raw["azimuth_step_deg"] = azimuth_step_deg
    pat = LidarPattern.from_dict(raw)
    if origins is not None:
        pat = replace(pat, origins=list(origins))
    return pat


def _barycentric_attr(mesh: TriMesh, attr: np.ndarray, face: np.ndarray, bary: np.ndarray) -> np.ndarray:
    return (attr[mesh.faces[face]] * bary[:, :, None] if attr.ndim == 2 else attr[mesh.faces[face]] * bary).sum(1)


def simulate_sweep(mesh: TriMesh, pattern: LidarPattern, pose: Optional[Pose6D] = None,
                   background: Optional[PointCloud] = None, vertex_intensity: Optional[np.ndarray] = None,
                   margin: float = OCCLUSION_MARGIN) -> PointCloud:
    """Ray-cast ``mesh`` (placed by ``pose``) and merge with an optional background sweep.

    Background points whose ray from its origin would hit the actor more than
    ``margin`` before reaching the point are dropped. Output order is
    (frame, beam, azimuth) for the actor followed by surviving background.
    """
    placed = mesh if pose is None else mesh.with_vertices(pose.apply(mesh.vertices))
    bvh = build_bvh(placed)
    local = pattern.local_directions()
    parts = []
    for fi, sensor in enumerate(pattern.origins):
        rot = sensor.rotation()
        d = local @ rot.T
        o = np.broadcast_to(sensor.translation, d.shape)
        hits = cast_rays(bvh, o, d, pattern.max_range)
        ok = hits.hit
        pts = o[ok] + hits.t[ok, None] * d[ok]
        inten = None
        if vertex_intensity is not None:
            inten = np.clip(_barycentric_attr(placed, np.asarray(vertex_intensity, dtype=np.float64), hits.face[ok], hits.barycentric[ok]), 0, 1)
        parts.append(PointCloud(pts, inten if inten is not None else np.zeros(ok.sum()), o[ok], np.full(ok.sum(), fi)))
    actor = PointCloud.concatenate(parts)
    if actor.intensity is not None and vertex_intensity is None:
        actor = replace(actor, intensity=None)
    if background is None or len(background) == 0:
        return actor
    keep = ~occluded_by(bvh, background, margin)
    bg = background.subset(keep)
    if actor.intensity is None and bg.intensity is not None:
        actor = replace(actor, intensity=np.zeros(len(actor)))
    if bg.intensity is None and actor.intensity is not None:
        bg = replace(bg, intensity=np.zeros(len(bg)))
    if bg.ray_origin is None:
        bg = replace(bg, ray_origin=np.zeros((len(bg), 3)))
    if bg.frame_id is None:
        bg = replace(bg, frame_id=np.full(len(bg), -1))
    return PointCloud.concatenate([actor, bg])


def occluded_by(bvh: Bvh, cloud: PointCloud, margin: float = OCCLUSION_MARGIN) -> np.ndarray:
    if cloud.ray_origin is None:
        raise ValueError("occlusion test needs per-point ray origins")
    vec = cloud.points - cloud.ray_origin
    dist = np.linalg.norm(vec, axis=1)
    d = vec / np.maximum(dist, 1e-12)[:, None]
    hits = cast_rays(bvh, cloud.ray_origin, d, np.maximum(dist - margin, 0.0))
    return hits.hit & (hits.t < dist - margin)


def hit_points(mesh: TriMesh, hits: RayHits) -> np.ndarray:
    b = hits.barycentric[hits.hit]
    return np.einsum("nk,nkd->nd", b, mesh.vertices[mesh.faces[hits.face[hits.hit]]])


# ---------------------------------------------------------------------------
# intensity and downsampling


def retrieve_intensity(mesh: TriMesh, cloud: PointCloud, k: int = 10) -> np.ndarray:
    """Per-vertex mean intensity of the ``k`` nearest cloud points (all points if fewer)."""
    if len(cloud) == 0:
        raise ValueError("cannot retrieve intensity from an empty cloud")
    if cloud.intensity is None:
        raise ValueError("cloud carries no intensity")
    kk = min(k, len(cloud))
    _, idx = cKDTree(cloud.points).query(mesh.vertices, k=kk)
    idx = np.asarray(idx).reshape(len(mesh.vertices), kk)
    return cloud.intensity[idx].mean(1)


def voxel_downsample(cloud: PointCloud, resolution: float) -> tuple[PointCloud, np.ndarray]:
    """Centroid per occupied voxel plus held-out indices.

    The lowest-index point of each voxel counts as consumed by the
    downsampled cloud; every other original index is returned as held out.
    """
    if not resolution > 0:
        raise ValueError("voxel resolution must be positive")
    n = len(cloud)
    if n == 0:
        return PointCloud.empty(), np.zeros(0, dtype=np.int64)
    keys = np.floor(cloud.points / resolution).astype(np.int64)
    uniq, first, inv = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inv = inv.reshape(-1)
    counts = np.bincount(inv, minlength=len(uniq)).astype(np.float64)

    def mean(a):
        out = np.zeros((len(uniq),) + a.shape[1:])
        np.add.at(out, inv, a)
        return out / counts.reshape((-1,) + (1,) * (a.ndim - 1))

    order = np.argsort(first, kind="stable")
    pts = mean(cloud.points)[order]
    it = None if cloud.intensity is None else mean(cloud.intensity)[order]
    ro = None if cloud.ray_origin is None else cloud.ray_origin[first][order]
    fr = None if cloud.frame_id is None else cloud.frame_id[first][order]
    held = np.setdiff1d(np.arange(n), first)
    return PointCloud(pts, it, ro, fr), held
