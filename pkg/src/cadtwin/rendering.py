"""Deterministic differentiable rasterizer with a GGX/Lambert directional-light shader.

Visibility is resolved by a hard z-buffer in numpy; everything that depends
continuously on the scene (barycentrics, depth, shading, texture lookups,
silhouette distances) is then recomputed in torch so gradients reach vertex
positions, poses, textures and the environment radiance.

Conventions: camera frame is x right, y down, z forward; pixel ``(row, col)``
has its centre at ``(col + 0.5, row + 0.5)``; texture coordinate ``(u, v)``
maps to ``(col, row) = (u * W - 0.5, v * H - 0.5)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numba
import numpy as np
import torch
from scipy import ndimage

from .geometry import Adjacency, Pose6D, TriMesh, build_adjacency, rot6d_to_matrix

Z_NEAR = 1e-6
MIN_ROUGHNESS = 0.02


# ---------------------------------------------------------------------------
# cameras


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "width": self.width, "height": self.height}

    def scaled(self, width: int, height: int) -> "Intrinsics":
        sx, sy = width / self.width, height / self.height
        return Intrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)


@dataclass(frozen=True)
class Camera:
    intrinsics: Intrinsics
    extrinsics: Pose6D = field(default_factory=Pose6D)  # world -> camera

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    def center(self) -> np.ndarray:
        r = self.extrinsics.rotation()
        return -r.T @ self.extrinsics.translation

    def to_dict(self) -> dict:
        return {"intrinsics": self.intrinsics.to_dict(), "extrinsics": self.extrinsics.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(Intrinsics(**d["intrinsics"]), Pose6D.from_dict(d["extrinsics"]))

    @classmethod
    def look_at(cls, intrinsics: Intrinsics, eye, target, up=(0.0, 0.0, 1.0)) -> "Camera":
        eye, target, up = (np.asarray(a, dtype=np.float64) for a in (eye, target, up))
        fwd = target - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])  # rows: camera axes in world coords
        return cls(intrinsics, Pose6D.from_matrix(rot, -rot @ eye))


def project(camera: Camera, point) -> tuple[np.ndarray, float, bool]:
    """Pinhole projection of one world point: ``(pixel, depth, in_front)``."""
    pix, depth, ok = project_points(camera, np.asarray(point, dtype=np.float64).reshape(1, 3))
    return pix[0], float(depth[0]), bool(ok[0])


def project_points(camera: Camera, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xc = camera.extrinsics.apply(points)
    k = camera.intrinsics
    z = xc[:, 2]
    ok = z > Z_NEAR
    zs = np.where(ok, z, 1.0)
    pix = np.stack([k.fx * xc[:, 0] / zs + k.cx, k.fy * xc[:, 1] / zs + k.cy], axis=1)
    pix[~ok] = np.nan
    return pix, z, ok


def unproject(camera: Camera, pixel, depth: float) -> np.ndarray:
    k = camera.intrinsics
    xc = np.array([(pixel[0] - k.cx) / k.fx * depth, (pixel[1] - k.cy) / k.fy * depth, depth])
    return camera.extrinsics.inverse().apply(xc[None])[0]


# ---------------------------------------------------------------------------
# appearance


def fibonacci_directions(count: int) -> np.ndarray:
    i = np.arange(count) + 0.5
    z = 1.0 - 2.0 * i / count
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = np.pi * (1.0 + 5 ** 0.5) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


@dataclass(frozen=True, eq=False)
class AppearanceParams:
    """Diffuse / ORM textures and a directional environment radiance map."""

    kd: np.ndarray
    orm: np.ndarray
    env_dirs: np.ndarray
    env_radiance: np.ndarray
    layout: Optional[str] = None  # digest of the UV layout the textures belong to

    def __post_init__(self):
        kd = np.asarray(self.kd, dtype=np.float64)
        orm = np.asarray(self.orm, dtype=np.float64)
        dirs = np.asarray(self.env_dirs, dtype=np.float64).reshape(-1, 3)
        rad = np.asarray(self.env_radiance, dtype=np.float64).reshape(-1, 3)
        if kd.ndim != 3 or kd.shape[2] != 3 or orm.shape != kd.shape:
            raise ValueError("kd and orm must be matching HxWx3 textures")
        if not (np.isfinite(kd).all() and np.isfinite(orm).all() and np.isfinite(rad).all()):
            raise ValueError("appearance contains non-finite values")
        if (rad < 0).any():
            raise ValueError("environment radiance must be non-negative")
        if len(dirs) != len(rad) or len(dirs) > 128:
            raise ValueError("env_dirs/env_radiance mismatch or more than 128 directions")
        orm = orm.copy()
        orm[..., 1] = np.clip(orm[..., 1], MIN_ROUGHNESS, 1.0)
        orm[..., 2] = np.clip(orm[..., 2], 0.0, 1.0)
        norms = np.linalg.norm(dirs, axis=1, keepdims=True)
        if len(dirs) and np.abs(norms - 1.0).max() > 1e-12:  # keep already-unit input bit-exact
            dirs = dirs / norms
        for name, val in (("kd", kd), ("orm", orm), ("env_dirs", dirs), ("env_radiance", rad)):
            val = val.copy()
            val.flags.writeable = False
            object.__setattr__(self, name, val)

    @classmethod
    def uniform(cls, kd=(0.5, 0.5, 0.5), roughness=0.5, metalness=0.0, size=8, n_dirs=32,
                radiance=(1.0, 1.0, 1.0), layout=None) -> "AppearanceParams":
        kd_tex = np.broadcast_to(np.asarray(kd, dtype=np.float64), (size, size, 3)).copy()
        orm = np.zeros((size, size, 3))
        orm[..., 1] = roughness
        orm[..., 2] = metalness
        dirs = fibonacci_directions(n_dirs)
        rad = np.broadcast_to(np.asarray(radiance, dtype=np.float64), (n_dirs, 3)).copy()
        return cls(kd_tex, orm, dirs, rad, layout)

    @property
    def solid_angle(self) -> float:
        return 4.0 * math.pi / len(self.env_dirs)

    def with_layout(self, layout: Optional[str]) -> "AppearanceParams":
        return replace(self, layout=layout)


def specular_color(kd, metalness):
    """Metalness blend between a 4% dielectric and a tinted metal specular."""
    return (1.0 - metalness)[..., None] * 0.04 + metalness[..., None] * kd


def shade_torch(normal, view, kd, roughness, metalness, env_dirs, env_radiance, weight, specular=True):
    """Outgoing radiance for ``P`` surface points lit by ``E`` directional samples.

    normal, view: (P, 3) unit vectors; kd: (P, 3); roughness, metalness: (P,);
    env_dirs: (E, 3) unit directions towards the light; env_radiance: (E, 3);
    weight: solid angle per direction.
    """
    nl = (normal @ env_dirs.T).clamp_min(0.0)  # (P, E)
    diffuse = kd * (1.0 - metalness)[:, None] / math.pi
    out = (nl @ env_radiance) * diffuse
    if specular:
        nv = (normal * view).sum(-1).clamp_min(1e-4)
        h = view[:, None, :] + env_dirs[None, :, :]
        h = h / torch.linalg.norm(h, dim=-1, keepdim=True).clamp_min(1e-12)
        nh = (h * normal[:, None, :]).sum(-1).clamp_min(0.0)
        vh = (h * view[:, None, :]).sum(-1).clamp(0.0, 1.0)
        a = roughness.clamp_min(MIN_ROUGHNESS) ** 2
        a2 = (a * a)[:, None]
        d = a2 / (math.pi * (nh * nh * (a2 - 1.0) + 1.0) ** 2)

        def g1(x):
            return 2.0 * x / (x + torch.sqrt(a2 + (1.0 - a2) * x * x))

        g = g1(nl) * g1(nv[:, None])
        f0 = specular_color(kd, metalness)  # (P, 3)
        fw = (1.0 - vh) ** 5  # (P, E)
        lobe = d * g / (4.0 * nv[:, None])  # (P, E), cosine folded in via G1(nl)/nl cancel
        lobe = torch.where(nl > 0, lobe, torch.zeros_like(lobe))
        # F = f0 + (1 - f0) * fw  -> split so radiance contraction stays (P,E)@(E,3)
        spec = f0 * (lobe @ env_radiance) + (1.0 - f0) * ((lobe * fw) @ env_radiance)
        out = out + spec
    return out * weight


@numba.njit(cache=True)
def _g1(x, a2):
    s = math.sqrt(a2 + (1.0 - a2) * x * x)
    g = 2.0 * x / (x + s)
    # d/dx and d/da2
    dx = 2.0 / (x + s) - 2.0 * x * (1.0 + (1.0 - a2) * x / s) / (x + s) ** 2
    da2 = -2.0 * x / (x + s) ** 2 * (1.0 - x * x) / (2.0 * s)
    return g, dx, da2


@numba.njit(cache=True)
def _shade_kernel(n, v, kd, r, m, dirs, rad, weight, specular, go, grads):
    """Fused forward (``go`` empty) or backward pass of :func:`shade_torch`.

    Backward accumulates into ``grads`` = (dn, dv, dkd, dr, dm, drad).
    """
    p_count, e_count = n.shape[0], dirs.shape[0]
    backward = go.shape[0] > 0
    out = np.zeros((p_count, 3))
    dn, dv, dkd, dr, dm, drad = grads
    inv_pi = 1.0 / math.pi
    for p in range(p_count):
        nx, ny, nz = n[p, 0], n[p, 1], n[p, 2]
        vx, vy, vz = v[p, 0], v[p, 1], v[p, 2]
        mm = m[p]
        rc = max(r[p], MIN_ROUGHNESS)
        a = rc * rc
        a2 = a * a
        nv_raw = nx * vx + ny * vy + nz * vz
        nv = max(nv_raw, 1e-4)
        g1v, g1v_dx, g1v_da2 = _g1(nv, a2)
        f0 = np.empty(3)
        gw = np.zeros(3)
        for c in range(3):
            f0[c] = 0.04 * (1.0 - mm) + mm * kd[p, c]
            if backward:
                gw[c] = go[p, c] * weight
        # per-point accumulators for the backward pass
        dnl_acc = np.zeros(3)  # direct gradient on n through nl
        dnv = 0.0
        da2 = 0.0
        dkd_p = np.zeros(3)
        dm_p = 0.0
        dn_p = np.zeros(3)
        dv_p = np.zeros(3)
        for e in range(e_count):
            lx, ly, lz = dirs[e, 0], dirs[e, 1], dirs[e, 2]
            nl = nx * lx + ny * ly + nz * lz
            if nl <= 0.0:
                continue
            lob = 0.0
            fw = 0.0
            if specular:
                hx, hy, hz = vx + lx, vy + ly, vz + lz
                hn = max(math.sqrt(hx * hx + hy * hy + hz * hz), 1e-12)
                hx /= hn
                hy /= hn
                hz /= hn
                nh_raw = hx * nx + hy * ny + hz * nz
                nh = max(nh_raw, 0.0)
                vh_raw = hx * vx + hy * vy + hz * vz
                vh = min(max(vh_raw, 0.0), 1.0)
                q = nh * nh * (a2 - 1.0) + 1.0
                d = a2 * inv_pi / (q * q)
                g1l, g1l_dx, g1l_da2 = _g1(nl, a2)
                g = g1l * g1v
                fw = (1.0 - vh) ** 5
                lob = d * g / (4.0 * nv)
            if not backward:
                for c in range(3):
                    le = rad[e, c]
                    out[p, c] += weight * le * (kd[p, c] * (1.0 - mm) * inv_pi * nl
                                                + lob * (f0[c] * (1.0 - fw) + fw))
                continue
            dnl = 0.0
            dlob = 0.0
            dfw = 0.0
            for c in range(3):
                le = rad[e, c]
                diff = kd[p, c] * (1.0 - mm) * inv_pi
                fc = f0[c] * (1.0 - fw) + fw
                drad[e, c] += gw[c] * (diff * nl + lob * fc)
                dkd_p[c] += gw[c] * (1.0 - mm) * inv_pi * nl * le
                dm_p -= gw[c] * kd[p, c] * inv_pi * nl * le
                dnl += gw[c] * diff * le
                if specular:
                    dlob += gw[c] * le * fc
                    df = gw[c] * lob * le
                    df0 = df * (1.0 - fw)
                    dfw += df * (1.0 - f0[c])
                    dm_p += df0 * (kd[p, c] - 0.04)
                    dkd_p[c] += df0 * mm
            if specular:
                # lobe = d * g1l * g1v / (4 nv)
                dd = dlob * g / (4.0 * nv)
                dg = dlob * d / (4.0 * nv)
                dnv += -dlob * lob / nv + dg * g1l * g1v_dx
                da2 += dg * g1l * g1v_da2 + dg * g1v * g1l_da2
                dnl += dg * g1v * g1l_dx
                da2 += dd * (inv_pi / (q * q) - 2.0 * a2 * inv_pi / (q * q * q) * nh * nh)
                dnh = 0.0
                if nh_raw > 0.0:
                    dnh = dd * (-2.0 * a2 * inv_pi / (q * q * q)) * 2.0 * nh * (a2 - 1.0)
                dvh = 0.0
                if vh_raw >= 0.0 and vh_raw <= 1.0:
                    dvh = dfw * -5.0 * (1.0 - vh) ** 4
                # nh = h.n, vh = h.v
                dhx = dnh * nx + dvh * vx
                dhy = dnh * ny + dvh * vy
                dhz = dnh * nz + dvh * vz
                dn_p[0] += dnh * hx
                dn_p[1] += dnh * hy
                dn_p[2] += dnh * hz
                dv_p[0] += dvh * hx
                dv_p[1] += dvh * hy
                dv_p[2] += dvh * hz
                hd = hx * dhx + hy * dhy + hz * dhz
                dv_p[0] += (dhx - hx * hd) / hn
                dv_p[1] += (dhy - hy * hd) / hn
                dv_p[2] += (dhz - hz * hd) / hn
            dnl_acc[0] += dnl * lx
            dnl_acc[1] += dnl * ly
            dnl_acc[2] += dnl * lz
        if backward:
            if nv_raw >= 1e-4:
                dn_p[0] += dnv * vx
                dn_p[1] += dnv * vy
                dn_p[2] += dnv * vz
                dv_p[0] += dnv * nx
                dv_p[1] += dnv * ny
                dv_p[2] += dnv * nz
            for c in range(3):
                dn[p, c] += dn_p[c] + dnl_acc[c]
                dv[p, c] += dv_p[c]
                dkd[p, c] += dkd_p[c]
            dm[p] += dm_p
            if r[p] >= MIN_ROUGHNESS:
                dr[p] += da2 * 4.0 * rc ** 3
    return out


class _FusedShade(torch.autograd.Function):
    @staticmethod
    def forward(ctx, normal, view, kd, roughness, metalness, env_radiance, env_dirs, weight, specular):
        arrs = [t.detach().contiguous().numpy() for t in (normal, view, kd, roughness, metalness, env_dirs, env_radiance)]
        ctx.save_for_backward(normal, view, kd, roughness, metalness, env_radiance, env_dirs)
        ctx.weight, ctx.specular = float(weight), bool(specular)
        empty = np.zeros((0, 3))
        grads = (empty, empty, empty, np.zeros(0), np.zeros(0), empty)
        out = _shade_kernel(*arrs, float(weight), bool(specular), empty, grads)
        return torch.from_numpy(out)

    @staticmethod
    def backward(ctx, go):
        normal, view, kd, roughness, metalness, env_radiance, env_dirs = ctx.saved_tensors
        arrs = [t.detach().contiguous().numpy() for t in (normal, view, kd, roughness, metalness, env_dirs, env_radiance)]
        p, e = normal.shape[0], env_dirs.shape[0]
        grads = (np.zeros((p, 3)), np.zeros((p, 3)), np.zeros((p, 3)), np.zeros(p), np.zeros(p), np.zeros((e, 3)))
        _shade_kernel(*arrs, ctx.weight, ctx.specular, go.detach().contiguous().numpy(), grads)
        dn, dv, dkd, dr, dm, drad = (torch.from_numpy(g) for g in grads)
        return dn, dv, dkd, dr, dm, drad, None, None, None


def shade_fused(normal, view, kd, roughness, metalness, env_dirs, env_radiance, weight, specular=True):
    """Same model as :func:`shade_torch` with a hand-written numba backward (float64 only)."""
    return _FusedShade.apply(normal, view, kd, roughness, metalness, env_radiance, env_dirs, weight, specular)


def shade(normal, view, app: AppearanceParams, uv=None, kd=None, roughness=None, metalness=None, specular=True):
    """Numpy convenience wrapper around :func:`shade_torch` for a batch of hits."""
    normal = np.atleast_2d(np.asarray(normal, dtype=np.float64))
    view = np.atleast_2d(np.asarray(view, dtype=np.float64))
    n = len(normal)
    if uv is not None:
        tex = sample_texture_torch(torch.tensor(np.array(app.kd)), torch.as_tensor(np.atleast_2d(uv), dtype=torch.float64))
        orm = sample_texture_torch(torch.tensor(np.array(app.orm)), torch.as_tensor(np.atleast_2d(uv), dtype=torch.float64))
        kd_t, r_t, m_t = tex, orm[:, 1], orm[:, 2]
    else:
        kd_t = torch.tensor(np.broadcast_to(kd, (n, 3)).copy(), dtype=torch.float64)
        r_t = torch.tensor(np.broadcast_to(roughness, (n,)).copy(), dtype=torch.float64)
        m_t = torch.tensor(np.broadcast_to(metalness, (n,)).copy(), dtype=torch.float64)
    out = shade_torch(torch.from_numpy(normal), torch.from_numpy(view), kd_t, r_t, m_t,
                      torch.tensor(np.array(app.env_dirs)), torch.tensor(np.array(app.env_radiance)), app.solid_angle, specular)
    return out.numpy()


def sample_texture_torch(tex: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    """Bilinear lookup with clamped coordinates; tex (H, W, C), uv (P, 2)."""
    h, w = tex.shape[0], tex.shape[1]
    x = (uv[:, 0] * w - 0.5).clamp(0.0, w - 1.0)
    y = (uv[:, 1] * h - 0.5).clamp(0.0, h - 1.0)
    x0 = torch.floor(x).long().clamp(0, w - 1)
    y0 = torch.floor(y).long().clamp(0, h - 1)
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    fx = (x - x0.to(x.dtype))[:, None]
    fy = (y - y0.to(y.dtype))[:, None]
    return ((1 - fx) * (1 - fy) * tex[y0, x0] + fx * (1 - fy) * tex[y0, x1]
            + (1 - fx) * fy * tex[y1, x0] + fx * fy * tex[y1, x1])


# ---------------------------------------------------------------------------
# hard rasterization (numpy)


@dataclass(frozen=True, eq=False)
class HardRaster:
    face_id: np.ndarray  # (H, W) int64, -1 = background
    front: np.ndarray  # (F,) bool, front-facing and fully in front of the camera


def _front_facing(xc: np.ndarray, faces: np.ndarray) -> np.ndarray:
    tri = xc[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    facing = -(n * tri[:, 0]).sum(1) > 0
    return facing & (tri[:, :, 2] > Z_NEAR).all(1)


def hard_rasterize(xc: np.ndarray, faces: np.ndarray, k: Intrinsics, cull: bool = True) -> HardRaster:
    """Z-buffer face ids for camera-frame vertices ``xc``.

    Ties in depth resolve to the lowest face index so output never depends on
    evaluation order.
    """
    h, w = k.height, k.width
    face_id = np.full(h * w, -1, dtype=np.int64)
    if len(faces) == 0:
        return HardRaster(face_id.reshape(h, w), np.zeros(0, dtype=bool))
    front = _front_facing(xc, faces) if cull else (xc[faces][:, :, 2] > Z_NEAR).all(1)
    fidx = np.nonzero(front)[0]
    if len(fidx) == 0:
        return HardRaster(face_id.reshape(h, w), front)
    z = np.where(xc[:, 2] > Z_NEAR, xc[:, 2], 1.0)
    sx = k.fx * xc[:, 0] / z + k.cx
    sy = k.fy * xc[:, 1] / z + k.cy
    tx, ty, tz = sx[faces[fidx]], sy[faces[fidx]], z[faces[fidx]]
    x0 = np.clip(np.ceil(tx.min(1) - 0.5), 0, w).astype(np.int64)
    x1 = np.clip(np.floor(tx.max(1) - 0.5), -1, w - 1).astype(np.int64)
    y0 = np.clip(np.ceil(ty.min(1) - 0.5), 0, h).astype(np.int64)
    y1 = np.clip(np.floor(ty.max(1) - 0.5), -1, h - 1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    cnt = nx * ny
    keep = cnt > 0
    if not keep.any():
        return HardRaster(face_id.reshape(h, w), front)
    fidx, tx, ty, tz = fidx[keep], tx[keep], ty[keep], tz[keep]
    x0, y0, nx, cnt = x0[keep], y0[keep], nx[keep], cnt[keep]
    rep = np.repeat(np.arange(len(fidx)), cnt)
    start = np.cumsum(cnt) - cnt
    local = np.arange(cnt.sum()) - np.repeat(start, cnt)
    px = x0[rep] + local % nx[rep]
    py = y0[rep] + local // nx[rep]
    cx, cy = px + 0.5, py + 0.5
    ax, ay = tx[rep, 0], ty[rep, 0]
    bx, by = tx[rep, 1], ty[rep, 1]
    qx, qy = tx[rep, 2], ty[rep, 2]
    area = (bx - ax) * (qy - ay) - (by - ay) * (qx - ax)
    w0 = (bx - cx) * (qy - cy) - (by - cy) * (qx - cx)
    w1 = (qx - cx) * (ay - cy) - (qy - cy) * (ax - cx)
    w2 = (ax - cx) * (by - cy) - (ay - cy) * (bx - cx)
    sgn = np.sign(area)
    inside = (area != 0) & (w0 * sgn >= 0) & (w1 * sgn >= 0) & (w2 * sgn >= 0)
    if not inside.any():
        return HardRaster(face_id.reshape(h, w), front)
    rep, px, py = rep[inside], px[inside], py[inside]
    l0, l1, l2 = w0[inside] / area[inside], w1[inside] / area[inside], w2[inside] / area[inside]
    inv_z = l0 / tz[rep, 0] + l1 / tz[rep, 1] + l2 / tz[rep, 2]
    depth = 1.0 / inv_z
    pix = py * w + px
    face = fidx[rep]
    order = np.lexsort((face, depth, pix))
    pix_s = pix[order]
    first = np.ones(len(pix_s), dtype=bool)
    first[1:] = pix_s[1:] != pix_s[:-1]
    face_id[pix_s[first]] = face[order][first]
    return HardRaster(face_id.reshape(h, w), front)


# ---------------------------------------------------------------------------
# silhouette edges


def _contour_edges(adj: Adjacency, front: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Edges separating a front face from a non-front (or missing) face.

    Returns the edge vertex pairs and, for each, the front face's opposite
    vertex (used to orient the edge's outward side).
    """
    ef = adj.edge_faces
    f0 = front[ef[:, 0]]
    f1 = np.where(ef[:, 1] >= 0, front[np.maximum(ef[:, 1], 0)], False)
    sel = f0 != f1
    face = np.where(f0, ef[:, 0], ef[:, 1])[sel]
    return adj.edges[sel], face


def _active_silhouette(sx, sy, edges, front_face, faces, mask) -> np.ndarray:
    """Keep contour edges lying on the visible outline of the hard mask."""
    h, w = mask.shape
    if len(edges) == 0:
        return np.zeros(0, dtype=bool)
    a = np.stack([sx[edges[:, 0]], sy[edges[:, 0]]], 1)
    b = np.stack([sx[edges[:, 1]], sy[edges[:, 1]]], 1)
    fv = faces[front_face]
    opp = np.where((fv != edges[:, :1]) & (fv != edges[:, 1:]), True, False)
    third = fv[np.arange(len(fv)), np.argmax(opp, axis=1)]
    c = np.stack([sx[third], sy[third]], 1)
    mid = 0.5 * (a + b)
    d = b - a
    nrm = np.stack([-d[:, 1], d[:, 0]], 1)
    nrm /= np.maximum(np.linalg.norm(nrm, axis=1, keepdims=True), 1e-12)
    flip = ((c - mid) * nrm).sum(1) > 0
    nrm[flip] *= -1
    probe = mid + nrm
    col = np.floor(probe[:, 0]).astype(np.int64)
    row = np.floor(probe[:, 1]).astype(np.int64)
    outside_img = (col < 0) | (col >= w) | (row < 0) | (row >= h)
    bg = np.ones(len(edges), dtype=bool)
    inside_img = ~outside_img
    bg[inside_img] = ~mask[row[inside_img], col[inside_img]]
    near = (mid[:, 0] > -2) & (mid[:, 0] < w + 2) & (mid[:, 1] > -2) & (mid[:, 1] < h + 2)
    return bg & near


@numba.njit(cache=True)
def _nearest_segment(p, a, b):
    """Index of the closest segment for every point (first index on ties)."""
    out = np.empty(p.shape[0], dtype=np.int64)
    for i in range(p.shape[0]):
        best = np.inf
        arg = 0
        for j in range(a.shape[0]):
            dx = b[j, 0] - a[j, 0]
            dy = b[j, 1] - a[j, 1]
            px = p[i, 0] - a[j, 0]
            py = p[i, 1] - a[j, 1]
            ll = dx * dx + dy * dy
            t = (px * dx + py * dy) / ll if ll > 1e-300 else 0.0
            t = min(max(t, 0.0), 1.0)
            ex = px - t * dx
            ey = py - t * dy
            d = ex * ex + ey * ey
            if d < best:
                best = d
                arg = j
        out[i] = arg
    return out


def _segment_distance_np(p, a, b):
    d = b - a
    t = ((p[:, None, :] - a[None]) * d[None]).sum(-1) / np.maximum((d * d).sum(-1), 1e-300)[None]
    t = np.clip(t, 0.0, 1.0)
    q = a[None] + t[..., None] * d[None]
    return ((p[:, None, :] - q) ** 2).sum(-1)


def _signed_segment_distance_torch(p, a, b, sign):
    """Signed pixel-to-segment distance. Over the segment interior this is the
    signed offset from the edge line, so it stays smooth when a pixel centre
    crosses the edge; the band builder orients each edge so that the offset
    carries the frozen inside/outside sign."""
    d = b - a
    ll = (d * d).sum(-1).clamp_min(1e-300)
    pa = p - a
    t = (pa * d).sum(-1) / ll
    interior = ((t > 0) & (t < 1)).detach()
    perp = (d[:, 0] * pa[:, 1] - d[:, 1] * pa[:, 0]) / torch.sqrt(ll)
    q = a + t.clamp(0.0, 1.0)[:, None] * d
    end = sign * torch.sqrt(((p - q) ** 2).sum(-1) + 1e-20)
    return torch.where(interior, perp, end)


def band_radius(tau: float) -> int:
    return int(math.ceil(8.0 * tau)) + 1


# ---------------------------------------------------------------------------
# differentiable render


@dataclass(frozen=True, eq=False)
class Visibility:
    """Every discrete decision of one render: z-buffer winners and silhouette
    assignment. Passing it back to :func:`render_torch` evaluates the same
    piecewise-smooth branch, which is what finite-difference checks need."""

    face_id: np.ndarray  # (H, W)
    band_pixels: np.ndarray  # flat indices of softened pixels
    band_edges: np.ndarray  # (B, 2) nearest silhouette edge per band pixel, oriented by band_sign
    band_sign: np.ndarray  # +1 inside the hard mask, -1 outside


@dataclass
class RenderOutput:
    color: torch.Tensor  # (H, W, 3)
    mask: torch.Tensor  # (H, W)
    depth: torch.Tensor  # (H, W), 0 = miss
    face_id: np.ndarray  # (H, W)
    visibility: Optional[Visibility] = None

    def numpy(self) -> "RenderOutput":
        return RenderOutput(self.color.detach().numpy(), self.mask.detach().numpy(), self.depth.detach().numpy(),
                            self.face_id, self.visibility)


@dataclass
class RasterOutput:
    face_id: np.ndarray
    barycentric: np.ndarray
    coverage: np.ndarray
    depth: np.ndarray


def _as_t(x, dtype=torch.float64) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.tensor(np.array(x, copy=True), dtype=dtype)


def render_torch(
    vertices: torch.Tensor,
    faces: np.ndarray,
    intr: Intrinsics,
    cam_rot6: torch.Tensor,
    cam_trans: torch.Tensor,
    tau: float = 1.0,
    *,
    adjacency: Optional[Adjacency] = None,
    uv: Optional[torch.Tensor] = None,
    kd: Optional[torch.Tensor] = None,
    orm: Optional[torch.Tensor] = None,
    env_dirs: Optional[torch.Tensor] = None,
    env_radiance: Optional[torch.Tensor] = None,
    shading: bool = True,
    specular: bool = True,
    cull: bool = True,
    visibility: Optional[Visibility] = None,
) -> RenderOutput:
    """Render world-space ``vertices`` (torch, differentiable) through one camera.

    With ``shading=False`` only mask and depth are produced (color is zeros);
    this is what the geometry-only stages use. ``visibility`` from an earlier
    call freezes all discrete decisions.
    """
    h, w = intr.height, intr.width
    faces = np.asarray(faces, dtype=np.int64)
    rot = rot6d_to_matrix(cam_rot6)
    xc = vertices @ rot.T + cam_trans
    hard = None
    if visibility is None:
        hard = hard_rasterize(xc.detach().numpy(), faces, intr, cull=cull)
        face_id = hard.face_id
    else:
        face_id = visibility.face_id
    fid = face_id.reshape(-1)
    pix = np.nonzero(fid >= 0)[0]
    dtype = vertices.dtype
    color = torch.zeros(h * w, 3, dtype=dtype)
    depth = torch.zeros(h * w, dtype=dtype)
    mask = torch.zeros(h * w, dtype=dtype)
    if len(pix) == 0:
        empty = Visibility(face_id, np.zeros(0, np.int64), np.zeros((0, 2), np.int64), np.zeros(0))
        return RenderOutput(color.view(h, w, 3), mask.view(h, w), depth.view(h, w), face_id, empty)

    zc = xc[:, 2].clamp_min(Z_NEAR)
    sx = intr.fx * xc[:, 0] / zc + intr.cx
    sy = intr.fy * xc[:, 1] / zc + intr.cy
    f = torch.from_numpy(faces[fid[pix]])
    px = torch.from_numpy((pix % w).astype(np.float64) + 0.5).to(dtype)
    py = torch.from_numpy((pix // w).astype(np.float64) + 0.5).to(dtype)
    ax, ay, bx, by, qx, qy = sx[f[:, 0]], sy[f[:, 0]], sx[f[:, 1]], sy[f[:, 1]], sx[f[:, 2]], sy[f[:, 2]]
    area = (bx - ax) * (qy - ay) - (by - ay) * (qx - ax)
    l0 = ((bx - px) * (qy - py) - (by - py) * (qx - px)) / area
    l1 = ((qx - px) * (ay - py) - (qy - py) * (ax - px)) / area
    l2 = 1.0 - l0 - l1
    z0, z1, z2 = zc[f[:, 0]], zc[f[:, 1]], zc[f[:, 2]]
    iz = l0 / z0 + l1 / z1 + l2 / z2
    zz = 1.0 / iz
    b = torch.stack([l0 / z0, l1 / z1, l2 / z2], 1) * zz[:, None]
    pix_t = torch.from_numpy(pix)
    depth = depth.index_put((pix_t,), zz)

    if shading and kd is not None:
        tri = vertices[f]  # (P, 3, 3) world
        pos = (b[:, :, None] * tri).sum(1)
        n = torch.linalg.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        n = n / torch.linalg.norm(n, dim=1, keepdim=True).clamp_min(1e-300)
        center = -(rot.T @ cam_trans)
        view = center - pos
        view = view / torch.linalg.norm(view, dim=1, keepdim=True)
        if uv is not None:
            uvp = (b[:, :, None] * uv[f]).sum(1)
        else:
            uvp = torch.full((len(pix), 2), 0.5, dtype=dtype)
        kd_p = sample_texture_torch(kd, uvp)
        orm_p = sample_texture_torch(orm, uvp)
        rad = env_radiance
        shader = shade_fused if dtype == torch.float64 else shade_torch
        col = shader(n, view, kd_p, orm_p[:, 1].clamp(MIN_ROUGHNESS, 1.0), orm_p[:, 2].clamp(0.0, 1.0),
                          env_dirs, rad, 4.0 * math.pi / env_dirs.shape[0], specular)
        color = color.index_put((pix_t,), col)

    hard_mask = fid >= 0
    mask = mask.index_put((pix_t,), torch.ones(len(pix), dtype=dtype))
    if visibility is None:
        band = (np.zeros(0, np.int64), np.zeros((0, 2), np.int64), np.zeros(0))
        if tau > 0:
            band = _silhouette_band(hard_mask.reshape(h, w), hard, faces, adjacency, sx.detach().numpy(),
                                    sy.detach().numpy(), tau)
        visibility = Visibility(face_id, *band)
    if tau > 0 and len(visibility.band_pixels):
        bpix, be = visibility.band_pixels, torch.from_numpy(visibility.band_edges)
        pt = torch.from_numpy(np.stack([(bpix % w) + 0.5, (bpix // w) + 0.5], 1).astype(np.float64)).to(dtype)
        at = torch.stack([sx[be[:, 0]], sy[be[:, 0]]], 1)
        bt = torch.stack([sx[be[:, 1]], sy[be[:, 1]]], 1)
        dist = _signed_segment_distance_torch(pt, at, bt, torch.from_numpy(visibility.band_sign).to(dtype))
        cov = torch.sigmoid(dist / tau)
        mask = mask.index_put((torch.from_numpy(bpix),), cov)
    return RenderOutput(color.view(h, w, 3), mask.view(h, w), depth.view(h, w), face_id, visibility)


def _silhouette_band(hard_mask, hard: HardRaster, faces, adjacency, sx_np, sy_np, tau):
    """Band pixels around the hard outline with their nearest active silhouette edge."""
    h, w = hard_mask.shape
    none = (np.zeros(0, np.int64), np.zeros((0, 2), np.int64), np.zeros(0))
    if adjacency is None:
        adjacency = build_adjacency(TriMesh(np.zeros((int(faces.max()) + 1, 3)), faces))
    edges, face = _contour_edges(adjacency, hard.front)
    if len(edges) == 0:
        return none
    active = _active_silhouette(sx_np, sy_np, edges, face, faces, hard_mask)
    if not active.any():
        return none
    edges = edges[active]
    boundary = hard_mask ^ ndimage.binary_erosion(hard_mask, border_value=0)
    boundary |= ~hard_mask & ndimage.binary_dilation(hard_mask)
    r = band_radius(tau)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    disk = xx * xx + yy * yy <= r * r
    band = ndimage.binary_dilation(boundary, structure=disk)
    bpix = np.nonzero(band.reshape(-1))[0]
    if len(bpix) == 0:
        return none
    p = np.stack([(bpix % w) + 0.5, (bpix // w) + 0.5], 1).astype(np.float64)
    a = np.ascontiguousarray(np.stack([sx_np[edges[:, 0]], sy_np[edges[:, 0]]], 1))
    bb = np.ascontiguousarray(np.stack([sx_np[edges[:, 1]], sy_np[edges[:, 1]]], 1))
    nearest = _nearest_segment(p, a, bb)
    sign = np.where(hard_mask.reshape(-1)[bpix], 1.0, -1.0)
    # orient every edge so its line offset (cross product) agrees with the sign
    e = edges[nearest].copy()
    d = bb[nearest] - a[nearest]
    pa = p - a[nearest]
    flip = (d[:, 0] * pa[:, 1] - d[:, 1] * pa[:, 0]) * sign < 0
    e[flip] = e[flip][:, ::-1]
    return bpix, e, sign


def render(mesh: TriMesh, app: Optional[AppearanceParams], camera: Camera, tau: float = 1.0,
           specular: bool = True, adjacency: Optional[Adjacency] = None) -> RenderOutput:
    """Numpy-in / numpy-out rendering of a world-space mesh (no gradients)."""
    if mesh.n_faces == 0:
        h, w = camera.height, camera.width
        return RenderOutput(np.zeros((h, w, 3)), np.zeros((h, w)), np.zeros((h, w)), np.full((h, w), -1, dtype=np.int64))
    with torch.no_grad():
        kw = {}
        if app is not None:
            kw = dict(uv=_as_t(mesh.uv) if mesh.uv is not None else None, kd=_as_t(app.kd), orm=_as_t(app.orm),
                      env_dirs=_as_t(app.env_dirs), env_radiance=_as_t(app.env_radiance))
        out = render_torch(_as_t(mesh.vertices), mesh.faces, camera.intrinsics, _as_t(camera.extrinsics.rot6),
                           _as_t(camera.extrinsics.translation), tau, adjacency=adjacency,
                           shading=app is not None, specular=specular, **kw)
    return out.numpy()


def rasterize(mesh: TriMesh, camera: Camera, tau: float = 1.0, adjacency: Optional[Adjacency] = None) -> RasterOutput:
    """Per-pixel face id, perspective-correct barycentrics, soft coverage and depth."""
    if tau < 0:
        raise ValueError("softness must be non-negative")
    h, w = camera.height, camera.width
    out = render(mesh, None, camera, tau, adjacency=adjacency)
    bary = np.zeros((h, w, 3))
    fid = out.face_id
    pix = np.nonzero(fid.reshape(-1) >= 0)[0]
    if len(pix):
        xc = camera.extrinsics.apply(mesh.vertices)
        k = camera.intrinsics
        tri = xc[mesh.faces[fid.reshape(-1)[pix]]]
        z = tri[:, :, 2]
        s = np.stack([k.fx * tri[:, :, 0] / z + k.cx, k.fy * tri[:, :, 1] / z + k.cy], -1)
        p = np.stack([(pix % w) + 0.5, (pix // w) + 0.5], 1)
        a, b, c = s[:, 0], s[:, 1], s[:, 2]

        def cross(u, v):
            return u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]

        area = cross(b - a, c - a)
        l0 = cross(b - p, c - p) / area
        l1 = cross(c - p, a - p) / area
        l = np.stack([l0, l1, 1 - l0 - l1], 1) / z
        bary.reshape(-1, 3)[pix] = l / l.sum(1, keepdims=True)
    return RasterOutput(fid, bary, out.mask, out.depth)
