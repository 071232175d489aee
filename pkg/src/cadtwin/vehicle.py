"""Part-aware articulated vehicle: body mesh plus K instanced wheels.

Wheel template canonical frame: axle along +y, forward +x, up +z, origin at
the hub centre. Wheel ``k`` is placed as::

    V_k = T_k( R_rho · (r ⊙ R_spin_k · V_wheel) + M_k · t_axle )

where ``R_rho`` (steering yaw about +z) only applies to the front wheels,
``t_axle`` is ``t_front`` or ``t_back`` and ``M_k = diag(1, s_k, 1)`` mirrors
the lateral component of the axle offset for the wheel's side ``s_k = ±1`` so
both wheels of an axle move symmetrically.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import torch

from .geometry import TriMesh
from .rendering import AppearanceParams

BODY = 0


def _ro(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class VehicleMesh:
    body: TriMesh
    wheel_template: TriMesh
    wheel_poses: np.ndarray  # (K, 4, 4) rigid, vehicle frame
    wheel_sides: np.ndarray  # (K,) +1 left (+y), -1 right
    wheel_scale: np.ndarray = field(default_factory=lambda: np.ones(3))  # [r_w, r_h, r_w]
    axle_offset_front: np.ndarray = field(default_factory=lambda: np.zeros(3))
    axle_offset_back: np.ndarray = field(default_factory=lambda: np.zeros(3))
    steer_yaw: float = 0.0
    front_wheel_indices: tuple = (0, 1)
    spin_angle: Optional[np.ndarray] = None

    def __post_init__(self):
        poses = np.asarray(self.wheel_poses, dtype=np.float64).reshape(-1, 4, 4)
        k = len(poses)
        if k < 2:
            raise ValueError("a vehicle needs at least two wheels")
        r = np.asarray(self.wheel_scale, dtype=np.float64).reshape(3)
        if not (r > 0).all():
            raise ValueError("wheel scale components must be positive")
        if r[0] != r[2]:
            raise ValueError("wheel scale must have the form [r_w, r_h, r_w]")
        front = tuple(int(i) for i in self.front_wheel_indices)
        if not set(front) <= set(range(k)):
            raise ValueError(f"front wheel indices {front} outside 0..{k - 1}")
        sides = np.asarray(self.wheel_sides, dtype=np.float64).reshape(k)
        spin = np.zeros(k) if self.spin_angle is None else np.asarray(self.spin_angle, dtype=np.float64).reshape(k)
        object.__setattr__(self, "wheel_poses", _ro(poses))
        object.__setattr__(self, "wheel_sides", _ro(sides))
        object.__setattr__(self, "wheel_scale", _ro(r))
        object.__setattr__(self, "axle_offset_front", _ro(np.reshape(self.axle_offset_front, 3)))
        object.__setattr__(self, "axle_offset_back", _ro(np.reshape(self.axle_offset_back, 3)))
        object.__setattr__(self, "steer_yaw", float(self.steer_yaw))
        object.__setattr__(self, "front_wheel_indices", front)
        object.__setattr__(self, "spin_angle", _ro(spin))

    @property
    def n_wheels(self) -> int:
        return len(self.wheel_poses)

    @property
    def n_vertices(self) -> int:
        return self.body.n_vertices + self.n_wheels * self.wheel_template.n_vertices

    def replace(self, **kw) -> "VehicleMesh":
        return replace(self, **kw)

    def template_radius(self) -> float:
        v = self.wheel_template.vertices
        return float(np.sqrt(v[:, 0] ** 2 + v[:, 2] ** 2).max())

    def part_labels(self) -> np.ndarray:
        nw = self.wheel_template.n_vertices
        return np.concatenate([np.zeros(self.body.n_vertices, dtype=np.int64)]
                              + [np.full(nw, k + 1, dtype=np.int64) for k in range(self.n_wheels)])

    def faces(self) -> np.ndarray:
        return assembled_faces(self.body, self.wheel_template, self.n_wheels)

    def uv(self) -> Optional[np.ndarray]:
        if self.body.uv is None or self.wheel_template.uv is None:
            return None
        return np.concatenate([self.body.uv] + [self.wheel_template.uv] * self.n_wheels)

    def params_dict(self) -> dict:
        return {
            "wheel_poses": self.wheel_poses.tolist(),
            "wheel_sides": self.wheel_sides.tolist(),
            "wheel_scale": self.wheel_scale.tolist(),
            "axle_offset_front": self.axle_offset_front.tolist(),
            "axle_offset_back": self.axle_offset_back.tolist(),
            "steer_yaw": self.steer_yaw,
            "front_wheel_indices": list(self.front_wheel_indices),
            "spin_angle": self.spin_angle.tolist(),
        }


def assembled_faces(body: TriMesh, wheel: TriMesh, k: int) -> np.ndarray:
    nb, nw = body.n_vertices, wheel.n_vertices
    return np.concatenate([body.faces] + [wheel.faces + nb + i * nw for i in range(k)])


def _rot_y(theta):
    c, s = torch.cos(theta), torch.sin(theta)
    o, z = torch.ones_like(c), torch.zeros_like(c)
    return torch.stack([torch.stack([c, z, s]), torch.stack([z, o, z]), torch.stack([-s, z, c])])


def _rot_z(theta):
    c, s = torch.cos(theta), torch.sin(theta)
    o, z = torch.ones_like(c), torch.zeros_like(c)
    return torch.stack([torch.stack([c, -s, z]), torch.stack([s, c, z]), torch.stack([z, z, o])])


def wheel_vertices_torch(wheel_v, wheel_poses, sides, r_w, r_h, t_front, t_back, rho, spin, front):
    """Placed wheel copies, shape (K, Vw, 3). All inputs torch float64."""
    scale = torch.stack([r_w, r_h, r_w])
    out = []
    for k in range(wheel_poses.shape[0]):
        v = wheel_v
        if spin is not None:
            v = v @ _rot_y(spin[k]).T
        v = v * scale
        m = torch.stack([torch.ones_like(sides[k]), sides[k], torch.ones_like(sides[k])])
        if k in front:
            v = v @ _rot_z(rho).T + m * t_front
        else:
            v = v + m * t_back
        out.append(v @ wheel_poses[k, :3, :3].T + wheel_poses[k, :3, 3])
    return torch.stack(out)


def assemble_vertices_torch(body_v, wheel_v, vm: VehicleMesh, r_w=None, r_h=None, t_front=None, t_back=None, rho=None,
                            spin=None):
    """Differentiable assembled vertex array; unspecified parameters come from ``vm``."""
    t = lambda x: torch.as_tensor(np.array(x, copy=True), dtype=torch.float64)  # noqa: E731
    r_w = t(vm.wheel_scale[0]) if r_w is None else r_w
    r_h = t(vm.wheel_scale[1]) if r_h is None else r_h
    t_front = t(vm.axle_offset_front) if t_front is None else t_front
    t_back = t(vm.axle_offset_back) if t_back is None else t_back
    rho = t(vm.steer_yaw) if rho is None else rho
    spin = t(vm.spin_angle) if spin is None else spin
    wheels = wheel_vertices_torch(wheel_v, t(vm.wheel_poses), t(vm.wheel_sides), r_w, r_h, t_front, t_back, rho, spin,
                                  vm.front_wheel_indices)
    return torch.cat([body_v, wheels.reshape(-1, 3)])


def assemble(vm: VehicleMesh) -> TriMesh:
    with torch.no_grad():
        v = assemble_vertices_torch(torch.tensor(np.array(vm.body.vertices)), torch.tensor(np.array(vm.wheel_template.vertices)), vm)
    return TriMesh(v.numpy(), vm.faces(), vm.uv())


def animate(vm: VehicleMesh, forward_distance: float, steer: float) -> VehicleMesh:
    """Roll the wheels without slipping over ``forward_distance`` and set the steering yaw.

    The rolling radius is ``r_w`` times the template's hub-to-rim radius, so a
    unit-radius template spins by exactly ``distance / r_w``.
    """
    radius = vm.wheel_scale[0] * vm.template_radius()
    if not radius > 0:
        raise ValueError("wheel radius must be positive")
    return vm.replace(spin_angle=vm.spin_angle + forward_distance / radius, steer_yaw=steer)


def layout_digest(vm: VehicleMesh) -> str:
    """Hash of topology + UV layout; equal digests mean textures are interchangeable."""
    h = hashlib.sha256()
    h.update(np.int64(vm.n_wheels).tobytes())
    for m in (vm.body, vm.wheel_template):
        h.update(np.ascontiguousarray(m.faces, dtype=np.int64).tobytes())
        if m.uv is not None:
            h.update(np.ascontiguousarray(m.uv, dtype=np.float64).tobytes())
    return h.hexdigest()[:32]


class TopologyMismatch(ValueError):
    pass


def transfer_texture(src_appearance: AppearanceParams, dst: VehicleMesh) -> tuple[VehicleMesh, AppearanceParams]:
    """Pair ``dst`` geometry with the source textures; geometry is left untouched."""
    digest = layout_digest(dst)
    if src_appearance.layout is not None and src_appearance.layout != digest:
        raise TopologyMismatch("source appearance was authored for a different topology / UV layout")
    return dst, src_appearance.with_layout(digest)
