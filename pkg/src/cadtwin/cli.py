"""``cadtwin`` command line: shape spaces, fitting, rendering, LiDAR simulation, evaluation, insertion."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .asset import FittedAsset, load_asset, save_asset
from .energy import EnergyWeights
from .fitting import CurriculumConfig, fit_scene, pinned_threads, write_trace_csv
from .geometry import Pose6D, TriMesh
from .imageio import load_png, save_png, save_raw
from .library import synthetic_library
from .lidar import LidarPattern, default_pattern, load_cloud, retrieve_intensity, save_cloud, simulate_sweep
from .meshio import mesh_from_props, read_ply, save_mesh_ply
from .metrics import lidar_eval, mean_metrics, view_metrics
from .rendering import Camera, render
from .scene import FixtureConfig, NoiseSpec, composite_insert, generate_fixture, load_scene, save_scene
from .shape_space import PartStructure, build_shape_space, load_shape_space, save_shape_space
from .vehicle import assemble, transfer_texture

log = logging.getLogger("cadtwin")


def _read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def _write_json(path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True))


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _pose_arg(path) -> Pose6D:
    d = _read_json(path)
    return Pose6D.from_dict(d["pose"] if "pose" in d else d)


def fit_config_from(path) -> tuple[CurriculumConfig, EnergyWeights]:
    """``{"curriculum": {...}, "weights": {...}}``; missing keys keep their defaults."""
    if path is None:
        return CurriculumConfig(), EnergyWeights()
    d = _read_json(path)
    unknown = set(d) - {"curriculum", "weights"}
    if unknown:
        raise ValueError(f"unknown fit config sections: {sorted(unknown)}")
    return CurriculumConfig.from_dict(d.get("curriculum", {})), EnergyWeights.from_dict(d.get("weights", {}))


# ---------------------------------------------------------------------------
# commands


def _read_exemplars(directory):
    files = sorted(Path(directory).glob("*.ply"))
    if len(files) < 2:
        raise SystemExit(f"need at least two .ply exemplars in {directory}")
    exemplars, structure = [], None
    for f in files:
        props, faces = read_ply(f)
        if "part" not in props:
            raise SystemExit(f"{f}: exemplar needs a per-vertex 'part' property (0 body, k wheel k)")
        mesh = mesh_from_props(props, faces)
        st = PartStructure.from_labels(mesh, props["part"].astype(np.int64))
        structure = structure or st
        exemplars.append(mesh)
    return exemplars, structure


def cmd_build_shape_space(a) -> int:
    if a.synthetic:
        vehicles = synthetic_library(a.synthetic, a.seed)
        space = build_shape_space(vehicles, a.k, symmetry_axis=a.symmetry_axis)
        if a.export:
            out = Path(a.export)
            out.mkdir(parents=True, exist_ok=True)
            for i, vm in enumerate(vehicles):
                save_mesh_ply(out / f"exemplar_{i:03d}.ply", assemble(vm), {"part": vm.part_labels().astype(np.int32)})
        n = len(vehicles)
    else:
        exemplars, structure = _read_exemplars(a.exemplars)
        space = build_shape_space(exemplars, a.k, structure, a.symmetry_axis)
        n = len(exemplars)
    save_shape_space(a.out, space)
    print(f"shape space: {n} exemplars, k={space.k}, {space.n_vertices} vertices -> {a.out}")
    return 0


def cmd_generate_fixture(a) -> int:
    space = load_shape_space(a.space)
    noise = NoiseSpec(a.pose_noise, a.yaw_noise, a.mask_noise, a.range_noise)
    cfg = FixtureConfig(view_count=a.views, heldout_count=a.heldout, lidar_points=a.lidar_points,
                        resolution=a.resolution, noise=noise)
    obs, gt = generate_fixture(a.seed, space, cfg)
    manifest = save_scene(a.out, obs)
    save_asset(Path(a.out) / "ground_truth.cta", gt)
    print(f"fixture {obs.scene_id}: {obs.n_views} views, {len(obs.cloud)} points -> {manifest}")
    return 0


def cmd_fit(a) -> int:
    cfg, weights = fit_config_from(a.config)
    if a.seed is not None:
        cfg = CurriculumConfig.from_dict({**cfg.to_dict(), "seed": a.seed})
    obs = load_scene(a.scene)
    space = load_shape_space(a.space)
    res = fit_scene(obs, space, cfg, weights, checkpoint_dir=a.checkpoint_dir)
    asset = res.asset
    if len(obs.cloud) and obs.cloud.intensity is not None:
        asset.vertex_intensity = retrieve_intensity(asset.placed_mesh(), obs.cloud)
    save_asset(a.out, asset)
    trace = a.trace or str(Path(a.out).with_suffix(".trace.csv"))
    write_trace_csv(trace, res.trace)
    if a.report:
        _write_json(a.report, res.report)
    print(f"fit done: total {res.report['final_total']:.6g} -> {a.out} (trace {trace})")
    return 0


def _placed(asset: FittedAsset, pose_path) -> TriMesh:
    if pose_path is None:
        return asset.placed_mesh()
    m = asset.mesh()
    return m.with_vertices(_pose_arg(pose_path).apply(m.vertices))


def _save_render(out, base: Path, r):
    save_png(base.with_suffix(".png"), r.color)
    save_png(base.with_name(base.stem + "_mask.png"), r.mask)
    if out.raw:
        save_raw(base.with_suffix(".raw"), np.concatenate([r.color, r.mask[..., None], r.depth[..., None]], axis=2))


def cmd_render(a) -> int:
    asset = load_asset(a.asset)
    mesh = _placed(asset, a.pose)
    with pinned_threads():
        if a.camera:
            cam = Camera.from_dict(_read_json(a.camera))
            _save_render(a, Path(a.out), render(mesh, asset.appearance, cam, a.tau))
        else:
            obs = load_scene(a.scene)
            out = Path(a.out)
            out.mkdir(parents=True, exist_ok=True)
            for f in obs.frames + obs.heldout:
                _save_render(a, out / f.frame_id, render(mesh, asset.appearance, f.camera, a.tau))
    print(f"rendered -> {a.out}")
    return 0


def cmd_simulate_lidar(a) -> int:
    asset = load_asset(a.asset)
    pattern = LidarPattern.from_dict(_read_json(a.pattern)) if a.pattern else default_pattern()
    if a.origin:
        pattern = LidarPattern(pattern.beams, pattern.azimuth_step, [Pose6D(translation=a.origin)], pattern.max_range)
    if not pattern.origins:
        raise SystemExit("the LiDAR pattern has no sensor origin; pass --origin x y z")
    mesh = asset.mesh()
    pose = _pose_arg(a.pose) if a.pose else asset.object_pose
    background = load_cloud(a.background) if a.background else None
    inten = asset.vertex_intensity
    sweep = simulate_sweep(mesh, pattern, pose, background, inten)
    save_cloud(a.out, sweep, {"pattern": pattern.to_dict(), "pose": pose.to_dict(), "asset_sha256": _file_digest(a.asset)})
    print(f"simulated {len(sweep)} points -> {a.out}")
    return 0


def _evaluate_one(asset: FittedAsset, obs, use_train: bool) -> dict:
    mesh = asset.placed_mesh()
    frames = obs.frames if use_train or not obs.heldout else obs.heldout
    report = {"asset_provenance": asset.provenance, "views": "train" if frames is obs.frames else "heldout"}
    if frames:
        per_view = view_metrics(mesh, asset.appearance, frames)
        report["image"] = mean_metrics(per_view).to_dict()
        report["image_per_view"] = [m.to_dict() for m in per_view]
    if len(obs.cloud) and obs.cloud.ray_origin is not None:
        report["lidar"] = lidar_eval(mesh, obs.cloud).to_dict()
    return report


def cmd_evaluate(a) -> int:
    obs = load_scene(a.scene)
    with pinned_threads():
        if a.assets:
            rows = []
            for p in sorted(Path(a.assets).glob("*.cta")):
                r = _evaluate_one(load_asset(p), obs, a.train_views)
                im, li = r.get("image", {}), r.get("lidar", {})
                rows.append({"asset": p.name, "mse": im.get("mse"), "psnr": im.get("psnr"), "ssim": im.get("ssim"),
                             "lpips": "n/a", "fid": "n/a", "l2_error": li.get("l2_error"),
                             "hit_rate": li.get("hit_rate"), "chamfer": li.get("chamfer"),
                             "hausdorff": li.get("hausdorff")})
            with open(a.out, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["asset"])
                w.writeheader()
                w.writerows(rows)
        else:
            report = _evaluate_one(load_asset(a.asset), obs, a.train_views)
            _write_json(a.out, report)
    print(f"evaluation -> {a.out}")
    return 0


def cmd_transfer_texture(a) -> int:
    src, dst = load_asset(a.src), load_asset(a.dst)
    vm, app = transfer_texture(src.appearance, dst.vehicle)
    prov = {**dst.provenance, "texture_from": src.provenance.get("scene_id", str(a.src))}
    save_asset(a.out, FittedAsset(vm, app, dst.vertex_intensity, prov, dst.object_pose, dst.camera_poses))
    print(f"texture of {a.src} on {a.dst} -> {a.out}")
    return 0


def cmd_insert(a) -> int:
    asset = load_asset(a.asset)
    mesh = _placed(asset, a.pose)
    done = []
    if a.background:
        cam = Camera.from_dict(_read_json(a.camera))
        with pinned_threads():
            r = render(mesh, asset.appearance, cam, a.tau)
        save_png(a.out, composite_insert(load_png(a.background), r))
        done.append(a.out)
    if a.lidar_background:
        pattern = LidarPattern.from_dict(_read_json(a.pattern)) if a.pattern else default_pattern()
        if a.origin:
            pattern = LidarPattern(pattern.beams, pattern.azimuth_step, [Pose6D(translation=a.origin)], pattern.max_range)
        sweep = simulate_sweep(mesh, pattern, None, load_cloud(a.lidar_background), None)
        save_cloud(a.lidar_out, sweep, {"pattern": pattern.to_dict(), "asset_sha256": _file_digest(a.asset)})
        done.append(a.lidar_out)
    if not done:
        raise SystemExit("nothing to insert into: pass --background and/or --lidar-background")
    print("inserted -> " + ", ".join(done))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cadtwin", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--seed", type=int, default=None, help="seed for commands that sample (default: 0)")
    p.add_argument("--threads", type=int, default=1, help="torch/numba worker threads for non-reducing work")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("build-shape-space", help="PCA shape space from vertex-aligned exemplars")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--exemplars", help="directory of .ply exemplars carrying a 'part' vertex property")
    g.add_argument("--synthetic", type=int, help="use N procedural exemplars instead")
    s.add_argument("--k", type=int, default=25)
    s.add_argument("--symmetry-axis", type=float, nargs=3, default=(0.0, 1.0, 0.0))
    s.add_argument("--export", help="also write the synthetic exemplars as .ply into this directory")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_shape_space)

    s = sub.add_parser("generate-fixture", help="synthetic scene with ground truth")
    s.add_argument("--space", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--views", type=int, default=20)
    s.add_argument("--heldout", type=int, default=4)
    s.add_argument("--lidar-points", type=int, default=5000)
    s.add_argument("--resolution", type=int, default=128)
    s.add_argument("--pose-noise", type=float, default=0.0, help="box centre sigma, metres")
    s.add_argument("--yaw-noise", type=float, default=0.0, help="box heading sigma, radians")
    s.add_argument("--mask-noise", type=float, default=0.0, help="contour sigma, pixels")
    s.add_argument("--range-noise", type=float, default=0.0, help="LiDAR range sigma, metres")
    s.set_defaults(func=cmd_generate_fixture)

    s = sub.add_parser("fit", help="fit an asset to a scene")
    s.add_argument("--scene", required=True)
    s.add_argument("--space", required=True)
    s.add_argument("--config", help="JSON with optional 'curriculum' and 'weights' sections")
    s.add_argument("--out", required=True)
    s.add_argument("--trace", help="energy trace CSV (default: <out>.trace.csv)")
    s.add_argument("--report")
    s.add_argument("--checkpoint-dir")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("render", help="render an asset")
    s.add_argument("--asset", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--camera", help="camera JSON (world -> camera)")
    g.add_argument("--scene", help="render every frame of a scene (box frame)")
    s.add_argument("--pose", help="object pose JSON; defaults to the asset's fitted pose")
    s.add_argument("--tau", type=float, default=0.0)
    s.add_argument("--raw", action="store_true", help="also write a float32 raw dump (rgb, mask, depth)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("simulate-lidar", help="ray-cast a LiDAR sweep against an asset")
    s.add_argument("--asset", required=True)
    s.add_argument("--pose", help="object pose JSON; defaults to the asset's fitted pose")
    s.add_argument("--pattern", help="beam pattern JSON (default: packaged 64-beam pattern)")
    s.add_argument("--origin", type=float, nargs=3, help="single sensor position overriding the pattern origins")
    s.add_argument("--background", help="background sweep .ply with ray origins")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate_lidar)

    s = sub.add_parser("evaluate", help="image and LiDAR metrics of assets against a scene")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--asset")
    g.add_argument("--assets", help="directory of .cta files; writes a CSV")
    s.add_argument("--scene", required=True)
    s.add_argument("--train-views", action="store_true", help="score the fitting views instead of held-out ones")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("transfer-texture", help="put the textures of one asset on another")
    s.add_argument("--src", required=True)
    s.add_argument("--dst", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_transfer_texture)

    s = sub.add_parser("insert", help="composite an asset into an image and/or a LiDAR sweep")
    s.add_argument("--asset", required=True)
    s.add_argument("--pose", help="object pose JSON in the background's frame")
    s.add_argument("--background", help="background image (PNG)")
    s.add_argument("--camera", help="camera JSON for the background image")
    s.add_argument("--tau", type=float, default=0.0)
    s.add_argument("--out", help="composited PNG")
    s.add_argument("--lidar-background", help="background sweep .ply with ray origins")
    s.add_argument("--pattern")
    s.add_argument("--origin", type=float, nargs=3)
    s.add_argument("--lidar-out")
    s.set_defaults(func=cmd_insert)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        raise SystemExit("--threads must be at least 1")
    torch.set_num_threads(args.threads)
    if args.seed is None and args.command != "fit":
        args.seed = 0
    if args.command == "insert" and args.background and not (args.camera and args.out):
        raise SystemExit("--background needs --camera and --out")
    if args.command == "insert" and args.lidar_background and not args.lidar_out:
        raise SystemExit("--lidar-background needs --lidar-out")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
