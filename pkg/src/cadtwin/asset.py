"""Fitted asset container and its ``.cta`` zip archive."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import zipfile
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import Pose6D, TriMesh
from .imageio import to_uint8
from .meshio import mesh_from_props, mesh_ply_bytes, parse_ply
from .rendering import AppearanceParams
from .vehicle import VehicleMesh, assemble

log = logging.getLogger(__name__)

FORMAT_VERSION = (1, 0)


class AssetError(ValueError):
    pass


class AssetChecksumError(AssetError):
    pass


class AssetVersionError(AssetError):
    pass


@dataclass(eq=False)
class FittedAsset:
    vehicle: VehicleMesh
    appearance: AppearanceParams
    vertex_intensity: Optional[np.ndarray] = None
    provenance: dict = field(default_factory=dict)
    object_pose: Pose6D = field(default_factory=Pose6D)  # object frame -> box frame
    camera_poses: list = field(default_factory=list)  # refined world(box) -> camera

    def mesh(self) -> TriMesh:
        return assemble(self.vehicle)

    def placed_mesh(self) -> TriMesh:
        m = self.mesh()
        return m.with_vertices(self.object_pose.apply(m.vertices))


def _npy(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(a), allow_pickle=False)
    return buf.getvalue()


def _png(a: np.ndarray) -> bytes:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(to_uint8(a)).save(buf, format="PNG")
    return buf.getvalue()


def asset_members(asset: FittedAsset) -> dict[str, bytes]:
    vm, app = asset.vehicle, asset.appearance
    params = {
        "vehicle": vm.params_dict(),
        "object_pose": asset.object_pose.to_dict(),
        "camera_poses": [p.to_dict() for p in asset.camera_poses],
        "layout": app.layout,
        "provenance": asset.provenance,
    }
    members = {
        "body.ply": mesh_ply_bytes(vm.body),
        "wheel.ply": mesh_ply_bytes(vm.wheel_template),
        "params.json": json.dumps(params, sort_keys=True, indent=1).encode(),
        "textures/kd.npy": _npy(app.kd),
        "textures/orm.npy": _npy(app.orm),
        "textures/env_dirs.npy": _npy(app.env_dirs),
        "textures/env_radiance.npy": _npy(app.env_radiance),
        "textures/kd.png": _png(app.kd),
        "textures/orm.png": _png(app.orm),
    }
    if asset.vertex_intensity is not None:
        members["intensity.npy"] = _npy(asset.vertex_intensity)
    return members


def save_asset(path, asset: FittedAsset) -> None:
    if not asset.provenance:
        raise AssetError("asset provenance must not be empty")
    members = asset_members(asset)
    manifest = {"format": "cta", "version": f"{FORMAT_VERSION[0]}.{FORMAT_VERSION[1]}",
                "sha256": {k: hashlib.sha256(v).hexdigest() for k, v in sorted(members.items())}}
    # fixed timestamps keep archives byte-identical across runs
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name, data in [("manifest.json", json.dumps(manifest, sort_keys=True, indent=1).encode())] + sorted(members.items()):
            info = zipfile.ZipInfo(name, date_time=(2000, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, data)


def load_asset(path) -> FittedAsset:
    try:
        with zipfile.ZipFile(path) as zf:
            members = {n: zf.read(n) for n in zf.namelist()}
    except (zipfile.BadZipFile, zipfile.LargeZipFile, EOFError, OSError) as exc:
        raise AssetChecksumError(f"{path}: archive is truncated or corrupt ({exc})") from exc
    if "manifest.json" not in members:
        raise AssetChecksumError(f"{path}: missing manifest")
    manifest = json.loads(members.pop("manifest.json"))
    major, minor = (int(x) for x in manifest.get("version", "0.0").split("."))
    if major != FORMAT_VERSION[0]:
        raise AssetVersionError(f"{path}: asset format {major}.{minor} is not supported")
    if minor > FORMAT_VERSION[1]:
        log.warning("%s: asset minor version %d.%d is newer than %d.%d; loading anyway", path, major, minor, *FORMAT_VERSION)
    sums = manifest.get("sha256", {})
    for name, digest in sums.items():
        if name not in members or hashlib.sha256(members[name]).hexdigest() != digest:
            raise AssetChecksumError(f"{path}: checksum mismatch for {name}")

    def npy(name):
        return np.load(io.BytesIO(members[name]), allow_pickle=False)

    params = json.loads(members["params.json"])
    vp = params["vehicle"]
    vm = VehicleMesh(mesh_from_props(*parse_ply(members["body.ply"])), mesh_from_props(*parse_ply(members["wheel.ply"])),
                     np.array(vp["wheel_poses"]), np.array(vp["wheel_sides"]), np.array(vp["wheel_scale"]),
                     np.array(vp["axle_offset_front"]), np.array(vp["axle_offset_back"]), vp["steer_yaw"],
                     tuple(vp["front_wheel_indices"]), np.array(vp["spin_angle"]))
    app = AppearanceParams(npy("textures/kd.npy"), npy("textures/orm.npy"), npy("textures/env_dirs.npy"),
                           npy("textures/env_radiance.npy"), params.get("layout"))
    inten = npy("intensity.npy") if "intensity.npy" in members else None
    return FittedAsset(vm, app, inten, params["provenance"], Pose6D.from_dict(params["object_pose"]),
                       [Pose6D.from_dict(p) for p in params["camera_poses"]])
