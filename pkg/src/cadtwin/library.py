"""Procedural vehicle exemplars sharing one topology (stand-in for a CAD library).

Every exemplar deforms the same cube-sphere body and the same cylinder wheel,
so exemplars are vertex-aligned by construction and can go straight into
:func:`cadtwin.shape_space.build_shape_space`.
"""

from __future__ import annotations

import numpy as np

from .geometry import TriMesh, cylinder, orient_outward
from .vehicle import VehicleMesh

# texture atlas: body in the top 3/4, wheels in the bottom strip
BODY_V = (0.0, 0.75)
WHEEL_V = (0.75, 1.0)


def cube_sphere(n: int = 8) -> TriMesh:
    """Unit cube surface gridded ``n x n`` per side, shared seams merged."""
    t = np.linspace(-1.0, 1.0, n + 1)
    a, b = np.meshgrid(t, t, indexing="ij")
    pts, faces = [], []
    offset = 0
    for axis in range(3):
        for sign in (-1.0, 1.0):
            p = np.zeros((n + 1, n + 1, 3))
            u, v = (axis + 1) % 3, (axis + 2) % 3
            p[..., axis] = sign
            p[..., u] = a
            p[..., v] = b
            pts.append(p.reshape(-1, 3))
            idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1) + offset
            q = np.stack([idx[:-1, :-1], idx[1:, :-1], idx[1:, 1:], idx[:-1, 1:]], -1).reshape(-1, 4)
            tri = np.concatenate([q[:, [0, 1, 2]], q[:, [0, 2, 3]]])
            if sign < 0:
                tri = tri[:, ::-1]
            faces.append(tri)
            offset += (n + 1) ** 2
    pts = np.concatenate(pts)
    faces = np.concatenate(faces)
    key = np.round(pts * n).astype(np.int64)
    _, first, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first)
    remap = np.empty(len(order), np.int64)
    remap[order] = np.arange(len(order))
    verts = pts[first[order]]
    faces = remap[inv.reshape(-1)][faces]
    return orient_outward(TriMesh(verts, faces))


def _soft_box(t, power):
    return np.sign(t) * np.abs(t) ** power


def _window(x, lo, hi, s):
    return 0.5 * (np.tanh((x - lo) / s) - np.tanh((x - hi) / s))


def body_mesh(base: TriMesh, length, width, height, cabin_height, cabin_start, cabin_end, clearance, taper,
              boxiness=0.35) -> TriMesh:
    """Deform the cube sphere into a sedan-like body (vehicle frame, ground at z=0)."""
    s = base.vertices / np.linalg.norm(base.vertices, axis=1, keepdims=True)
    u = _soft_box(s, boxiness)
    x = 0.5 * length * u[:, 0]
    zeta = 0.5 * (u[:, 2] + 1.0)
    cab = _window(x, cabin_start, cabin_end, 0.25)
    y = 0.5 * width * u[:, 1] * (1.0 - taper * cab * zeta ** 3)
    z = clearance + height * zeta + cabin_height * cab * zeta ** 3
    v = np.stack([x, y, z], 1)
    # side projection; left and right halves share the same texels
    uv = np.stack([(u[:, 0] + 1) / 2, BODY_V[0] + (BODY_V[1] - BODY_V[0]) * (1 - zeta)], 1)
    return TriMesh(v, base.faces, uv)


def wheel_template(segments: int = 16) -> TriMesh:
    """Unit-radius, unit-width cylinder: axle +y, hub at the origin."""
    w = cylinder(segments, 1.0, 1.0)
    v = w.vertices
    ang = np.arctan2(v[:, 2], v[:, 0])
    rad = np.hypot(v[:, 0], v[:, 2])
    uv = np.stack([0.5 + 0.25 * rad * np.cos(ang) + np.where(v[:, 1] > 0, 0.25, -0.25) * 0.9,
                   WHEEL_V[0] + (WHEEL_V[1] - WHEEL_V[0]) * (0.5 + 0.45 * rad * np.sin(ang))], 1)
    return TriMesh(v, w.faces, np.clip(uv, 0, 1))


def exemplar(params: dict, base: TriMesh = None, wheel: TriMesh = None) -> VehicleMesh:
    """A vehicle at default articulation with wheel size baked into the template copies."""
    base = cube_sphere() if base is None else base
    wheel = wheel_template() if wheel is None else wheel
    p = params
    body = body_mesh(base, p["length"], p["width"], p["height"], p["cabin_height"], p["cabin_start"], p["cabin_end"],
                     p["clearance"], p["taper"])
    r, tw = p["wheel_radius"], p["wheel_width"]
    tmpl = TriMesh(wheel.vertices * [r, tw, r], wheel.faces, wheel.uv)
    hx, hy = p["wheelbase"] / 2, p["width"] / 2 - 0.5 * tw + p.get("wheel_inset", 0.0)
    hubs = np.array([[hx, hy, r], [hx, -hy, r], [-hx, hy, r], [-hx, -hy, r]])
    poses = np.tile(np.eye(4), (4, 1, 1))
    poses[:, :3, 3] = hubs
    return VehicleMesh(body, tmpl, poses, np.array([1.0, -1.0, 1.0, -1.0]), front_wheel_indices=(0, 1))


def random_params(rng: np.random.Generator) -> dict:
    length = rng.uniform(3.9, 5.0)
    r = rng.uniform(0.30, 0.37)
    cab_mid = rng.uniform(-0.4, 0.1) * length / 4
    cab_len = rng.uniform(0.35, 0.5) * length
    return {
        "length": length,
        "width": rng.uniform(1.7, 2.0),
        "height": rng.uniform(0.65, 0.9),
        "cabin_height": rng.uniform(0.35, 0.65),
        "cabin_start": cab_mid - cab_len / 2,
        "cabin_end": cab_mid + cab_len / 2,
        "clearance": rng.uniform(0.18, 0.3),
        "taper": rng.uniform(0.1, 0.3),
        "wheel_radius": r,
        "wheel_width": rng.uniform(0.2, 0.28),
        "wheelbase": rng.uniform(0.56, 0.64) * length,
        "wheel_inset": rng.uniform(-0.03, 0.03),
    }


def synthetic_library(count: int = 12, seed: int = 0, resolution: int = 8, wheel_segments: int = 16) -> list[VehicleMesh]:
    rng = np.random.default_rng(seed)
    base = cube_sphere(resolution)
    wheel = wheel_template(wheel_segments)
    return [exemplar(random_params(rng), base, wheel) for _ in range(count)]
