"""Scene manifests, synthetic fixtures and camera-side actor insertion.

All observations are kept twice: as recorded (world frame) and in the
actor-centric frame of the coarse object box (+x = box heading), which is the
frame every fit runs in.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from skimage import draw, measure

from .asset import FittedAsset
from .geometry import Pose6D, TriMesh
from .imageio import load_png, quantize, save_png
from .lidar import LidarPattern, PointCloud, default_pattern, load_cloud, save_cloud, simulate_sweep
from .rendering import AppearanceParams, Camera, Intrinsics, fibonacci_directions, render
from .shape_space import ShapeSpace, decode
from .vehicle import assemble, layout_digest

log = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"


class SceneError(ValueError):
    """Manifest problems; ``frame`` names the offending frame when there is one."""

    def __init__(self, message: str, frame: Optional[str] = None):
        super().__init__(message)
        self.frame = frame


@dataclass(frozen=True, eq=False)
class ObjectBox:
    pose: Pose6D  # box frame -> world
    dims: np.ndarray  # length, width, height

    def to_dict(self) -> dict:
        return {"pose": self.pose.to_dict(), "dims": np.asarray(self.dims, dtype=np.float64).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectBox":
        return cls(Pose6D.from_dict(d["pose"]), np.asarray(d.get("dims", (0.0, 0.0, 0.0)), dtype=np.float64))


@dataclass(frozen=True, eq=False)
class Frame:
    frame_id: str
    image: np.ndarray  # (H, W, 3) in [0, 1]
    mask: np.ndarray  # (H, W) in {0, 1}
    camera_world: Camera
    camera: Camera  # box frame -> camera
    sensor: str = "cam0"


@dataclass(eq=False)
class SceneObservations:
    frames: list
    cloud: PointCloud  # box frame
    cloud_world: PointCloud
    box: ObjectBox
    heldout: list = field(default_factory=list)
    scene_id: str = "scene"
    metadata: dict = field(default_factory=dict)

    @property
    def n_views(self) -> int:
        return len(self.frames)


def make_frame(frame_id, image, mask, camera_world: Camera, box: ObjectBox, sensor="cam0") -> Frame:
    cam = Camera(camera_world.intrinsics, camera_world.extrinsics.compose(box.pose))
    return Frame(str(frame_id), image, mask, camera_world, cam, sensor)


def make_observations(frames_world: list, cloud_world: PointCloud, box: ObjectBox, heldout_world=(),
                      scene_id="scene", metadata=None) -> SceneObservations:
    """Build observations from world-frame records; ``frames_world`` holds (id, image, mask, camera, sensor)."""
    frames = [make_frame(*f, box=box) if len(f) == 4 else make_frame(f[0], f[1], f[2], f[3], box, f[4]) for f in frames_world]
    held = [make_frame(*f, box=box) if len(f) == 4 else make_frame(f[0], f[1], f[2], f[3], box, f[4]) for f in heldout_world]
    if not frames and len(cloud_world) == 0:
        raise SceneError("a scene needs at least one frame or a non-empty cloud")
    cloud = cloud_world.transformed(box.pose.inverse()) if len(cloud_world) else cloud_world
    return SceneObservations(frames, cloud, cloud_world, box, held, scene_id, dict(metadata or {}))


# ---------------------------------------------------------------------------
# manifests


def _frame_entry(f: Frame, prefix: str) -> dict:
    return {"id": f.frame_id, "image": f"{prefix}/{f.frame_id}.png", "mask": f"{prefix}/{f.frame_id}_mask.png",
            "camera": f.camera_world.to_dict(), "sensor": f.sensor}


def save_scene(directory, obs: SceneObservations) -> Path:
    """Write PNGs, the world-frame cloud and ``scene.json``; returns the manifest path."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    entries = {"frames": [], "heldout_frames": []}
    for key, frames, prefix in (("frames", obs.frames, "images"), ("heldout_frames", obs.heldout, "images")):
        for f in frames:
            e = _frame_entry(f, prefix)
            save_png(root / e["image"], f.image)
            save_png(root / e["mask"], f.mask)
            entries[key].append(e)
    lidar = None
    if len(obs.cloud_world):
        save_cloud(root / "cloud.ply", obs.cloud_world, {"frame": "world"})
        lidar = {"cloud": "cloud.ply", "frame": "world"}
    manifest = {"schema_version": SCHEMA_VERSION, "scene_id": obs.scene_id, "object_box": obs.box.to_dict(),
                "frames": entries["frames"], "heldout_frames": entries["heldout_frames"], "lidar": lidar,
                "metadata": obs.metadata}
    path = root / "scene.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_scene(manifest_path) -> SceneObservations:
    path = Path(manifest_path)
    if not path.exists():
        raise SceneError(f"manifest {path} does not exist")
    m = json.loads(path.read_text())
    ver = str(m.get("schema_version", ""))
    if ver.split(".")[0] != SCHEMA_VERSION.split(".")[0]:
        raise SceneError(f"unsupported manifest schema version {ver!r}")
    root = path.parent
    box = ObjectBox.from_dict(m["object_box"]) if m.get("object_box") else ObjectBox(Pose6D(), np.zeros(3))

    def frames(key):
        out = []
        for e in m.get(key, []):
            fid = str(e["id"])
            for k in ("image", "mask"):
                if not (root / e[k]).exists():
                    raise SceneError(f"frame {fid}: missing {k} file {e[k]}", fid)
            img = load_png(root / e["image"])
            mask = load_png(root / e["mask"])
            if mask.ndim == 3:
                mask = mask[..., 0]
            if img.ndim == 2:
                img = np.repeat(img[..., None], 3, axis=2)
            cam = Camera.from_dict(e["camera"])
            if mask.shape != img.shape[:2]:
                raise SceneError(f"frame {fid}: mask {mask.shape} does not match image {img.shape[:2]}", fid)
            if img.shape[:2] != (cam.height, cam.width):
                raise SceneError(f"frame {fid}: image size {img.shape[:2]} does not match camera intrinsics", fid)
            out.append((fid, img, (mask > 0.5).astype(np.float64), cam, e.get("sensor", "cam0")))
        return out

    cloud = PointCloud.empty()
    if m.get("lidar"):
        cpath = root / m["lidar"]["cloud"]
        if not cpath.exists():
            raise SceneError(f"missing cloud file {cpath}")
        cloud = load_cloud(cpath)
    return make_observations(frames("frames"), cloud, box, frames("heldout_frames"), m.get("scene_id", path.stem),
                             m.get("metadata", {}))


# ---------------------------------------------------------------------------
# synthetic fixtures


@dataclass(frozen=True)
class NoiseSpec:
    pose_xyz: float = 0.0  # metres, box centre
    pose_yaw: float = 0.0  # radians, box heading
    mask_contour: float = 0.0  # pixels, per contour point
    lidar_range: float = 0.0  # metres, along each ray


@dataclass(frozen=True)
class FixtureConfig:
    view_count: int = 20
    heldout_count: int = 4
    lidar_points: int = 5000
    resolution: int = 128
    latent_scale: float = 0.8
    texture_size: int = 64
    env_dirs: int = 32
    sweeps: int = 4
    noise: NoiseSpec = NoiseSpec()


def fixture_appearance(rng: np.random.Generator, size: int = 64, n_dirs: int = 32, layout=None) -> AppearanceParams:
    """Two-tone body, dark glazing band, dark tyres; soft sky-over-ground lighting."""
    hue = rng.uniform(0.15, 0.85, 3)
    kd = np.empty((size, size, 3))
    kd[:] = hue
    vv, uu = (np.mgrid[0:size, 0:size] + 0.5) / size
    glass = (vv > 0.04) & (vv < 0.2) & (uu > 0.3) & (uu < 0.7)
    kd[glass] = (0.08, 0.1, 0.12)
    kd[vv > 0.75] = (0.06, 0.06, 0.06)
    hub = (vv > 0.75) & (np.abs(uu - 0.5) < 0.12)
    kd[hub] = (0.6, 0.6, 0.62)
    orm = np.zeros_like(kd)
    orm[..., 1] = 0.55
    orm[..., 2] = 0.1
    orm[glass, 1] = 0.2
    orm[vv > 0.75, 1] = 0.9
    orm[vv > 0.75, 2] = 0.0
    dirs = fibonacci_directions(n_dirs)
    sky = 0.6 + 0.8 * np.clip(dirs[:, 2], 0, 1)
    rad = sky[:, None] * np.array([1.0, 1.0, 1.02])
    rad[dirs[:, 2] < 0] = (0.35, 0.33, 0.3)
    return AppearanceParams(kd, orm, dirs, rad, layout)


def perturb_mask(mask: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Jitter every contour vertex by N(0, sigma^2) px and refill (even-odd) the polygons."""
    if sigma <= 0:
        return mask
    h, w = mask.shape
    padded = np.pad(mask > 0.5, 1)
    out = np.zeros((h, w), dtype=bool)
    for c in measure.find_contours(padded.astype(np.float64), 0.5):
        c = c - 1.0 + rng.normal(0.0, sigma, c.shape)
        rr, cc = draw.polygon(c[:, 0], c[:, 1], shape=(h, w))
        fill = np.zeros((h, w), dtype=bool)
        fill[rr, cc] = True
        out ^= fill
    return out.astype(np.float64)


def _ring_cameras(rng, count, intr, center, dist=(5.0, 6.5), height=(1.0, 2.4)):
    cams = []
    az0 = rng.uniform(0, 2 * np.pi)
    for i in range(count):
        az = az0 + 2 * np.pi * i / count + rng.uniform(-0.15, 0.15)
        d = rng.uniform(*dist)
        eye = center + np.array([d * np.cos(az), d * np.sin(az), rng.uniform(*height)])
        target = center + np.array([0.0, 0.0, 0.7]) + rng.normal(0, 0.1, 3)
        cams.append(Camera.look_at(intr, eye, target))
    return cams


def vertex_intensity(mesh: TriMesh, app: AppearanceParams) -> np.ndarray:
    """Reflectance proxy for LiDAR returns: diffuse luminance at each vertex's texel."""
    if mesh.uv is None:
        return np.full(mesh.n_vertices, 0.5)
    h, w = app.kd.shape[:2]
    col = np.clip((mesh.uv[:, 0] * w).astype(int), 0, w - 1)
    row = np.clip((mesh.uv[:, 1] * h).astype(int), 0, h - 1)
    return np.clip(app.kd[row, col] @ np.array([0.299, 0.587, 0.114]), 0, 1)


def generate_fixture(seed: int, space: ShapeSpace, cfg: FixtureConfig = FixtureConfig(),
                     pattern: Optional[LidarPattern] = None) -> tuple[SceneObservations, FittedAsset]:
    """Render and scan a random vehicle from the shape space.

    Returns the observations (with the configured noise) and the ground-truth
    asset, whose ``object_pose`` and lighting directions are expressed in the
    noisy box frame.
    """
    rng = np.random.default_rng(seed)
    z = rng.normal(size=space.k) * space.sigma * cfg.latent_scale
    vm = decode(space, z)
    app = fixture_appearance(rng, cfg.texture_size, cfg.env_dirs, layout_digest(vm))
    mesh = assemble(vm)
    gt_pose = Pose6D.from_yaw(rng.uniform(-np.pi, np.pi), (rng.uniform(-20, 20), rng.uniform(-20, 20), 0.0))
    world = mesh.with_vertices(gt_pose.apply(mesh.vertices))
    res = cfg.resolution
    intr = Intrinsics(1.1 * res, 1.1 * res, res / 2, res / 2, res, res)
    cams = _ring_cameras(rng, cfg.view_count + cfg.heldout_count, intr, gt_pose.translation)

    noise_rng = np.random.default_rng([seed, 1])
    frames = []
    for i, cam in enumerate(cams):
        out = render(world, app, cam, tau=0.0)
        img = quantize(out.color)
        mask = (out.depth > 0).astype(np.float64)
        if i < cfg.view_count:
            mask = perturb_mask(mask, cfg.noise.mask_contour, noise_rng)
        frames.append((f"{i:03d}", img, mask, cam, "cam0"))

    pattern = pattern or default_pattern()
    origins = []
    az0 = rng.uniform(0, 2 * np.pi)
    for j in range(cfg.sweeps):
        a = az0 + 2 * np.pi * j / max(cfg.sweeps, 1)
        d = rng.uniform(8.0, 12.0)
        origins.append(Pose6D(translation=gt_pose.translation + [d * np.cos(a), d * np.sin(a), 1.8]))
    sweep = simulate_sweep(world, replace(pattern, origins=origins), vertex_intensity=vertex_intensity(world, app))
    if len(sweep) > cfg.lidar_points:
        keep = np.sort(rng.choice(len(sweep), cfg.lidar_points, replace=False))
        sweep = sweep.subset(keep)
    if cfg.noise.lidar_range > 0 and len(sweep):
        ray = sweep.points - sweep.ray_origin
        ray /= np.linalg.norm(ray, axis=1, keepdims=True)
        sweep = replace(sweep, points=sweep.points + noise_rng.normal(0, cfg.noise.lidar_range, (len(sweep), 1)) * ray)

    yaw_noise = noise_rng.normal(0, cfg.noise.pose_yaw) if cfg.noise.pose_yaw > 0 else 0.0
    xyz_noise = noise_rng.normal(0, cfg.noise.pose_xyz, 3) if cfg.noise.pose_xyz > 0 else np.zeros(3)
    box_pose = gt_pose.compose(Pose6D.from_yaw(yaw_noise)) if yaw_noise else gt_pose
    box_pose = Pose6D(box_pose.rot6, box_pose.translation + xyz_noise)
    lo, hi = mesh.vertices.min(0), mesh.vertices.max(0)
    box = ObjectBox(box_pose, hi - lo)
    meta = {"seed": seed, "noise": {k: getattr(cfg.noise, k) for k in ("pose_xyz", "pose_yaw", "mask_contour", "lidar_range")},
            "gt_pose_world": gt_pose.to_dict(), "z_gt": z.tolist()}
    obs = make_observations(frames[:cfg.view_count], sweep, box, frames[cfg.view_count:], f"fixture-{seed}", meta)
    # fits run in the box frame, so the truth carries its lighting rotated into it
    app_box = replace(app, env_dirs=app.env_dirs @ box_pose.rotation())
    gt = FittedAsset(vm, app_box, vertex_intensity(mesh, app),
                     {"scene_id": obs.scene_id, "kind": "ground_truth", "z": z.tolist()},
                     box_pose.inverse().compose(gt_pose), [f.camera.extrinsics for f in obs.frames])
    return obs, gt


# ---------------------------------------------------------------------------
# compositing


def composite_insert(background: np.ndarray, rendered) -> np.ndarray:
    """Alpha-blend a render over a background, alpha = soft mask restricted to covered pixels."""
    bg = np.asarray(background, dtype=np.float64)
    alpha = np.asarray(rendered.mask, dtype=np.float64) * (np.asarray(rendered.depth) > 0)
    if bg.shape[:2] != alpha.shape:
        raise ValueError("background and render sizes differ")
    a = alpha[..., None] if bg.ndim == 3 else alpha
    return a * np.asarray(rendered.color, dtype=np.float64).reshape(bg.shape) + (1.0 - a) * bg
