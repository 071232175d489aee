"""Three-stage fit of a vehicle asset to multi-view masks/images and a LiDAR cloud.

Stage 1 optimizes only the latent code ``z`` against masks, LiDAR and shape
regularizers. Stage 2 frees the body and wheel-template vertices (through the
smooth reparameterization), the wheel parameters and the poses, still without
the photometric term. Stage 3 adds color and appearance and anneals the
silhouette softness.

Everything runs in the coarse object-box frame of the observations.
"""

from __future__ import annotations

import contextlib
import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .asset import FittedAsset, save_asset
from .energy import (EnergyError, EnergyWeights, ModelTopology, SceneState, StageFlags, Targets, energy_terms)
from .geometry import Pose6D, TriMesh
from .optim import Moments, OptimizerConfig, SmoothReparam, step
from .rendering import MIN_ROUGHNESS, AppearanceParams
from .scene import SceneObservations
from .shape_space import ShapeSpace, decode_vertices, split_parts
from .vehicle import VehicleMesh, layout_digest

log = logging.getLogger(__name__)


class FitError(RuntimeError):
    """Fit failure; carries the energy trace and the last good checkpoint when available."""

    def __init__(self, message: str, trace=None, checkpoint: Optional[FittedAsset] = None,
                 checkpoint_path: Optional[Path] = None):
        super().__init__(message)
        self.trace = trace or []
        self.checkpoint = checkpoint
        self.checkpoint_path = checkpoint_path


@dataclass(frozen=True)
class CurriculumConfig:
    stage1_iters: int = 200
    stage2_iters: int = 500
    stage3_iters: int = 500
    stage1_lr: float = 3e-2
    shape_lr: float = 3e-2  # AdamUniform on the reparameterized vertices
    wheel_lr: float = 1e-2
    object_pose_lr: float = 1e-2
    camera_lr: float = 1e-4
    appearance_lr: float = 3e-2
    stage3_decay: float = 1.0 / 3.0  # lr multiplier reached at the end of stage 3 (0.03 -> 0.01)
    lambda_pre: float = 19.0
    optimize_poses: bool = True
    optimize_cameras: bool = True
    tau: float = 1.0
    tau_min: float = 0.0625
    tau_factor: float = 0.5
    tau_window: int = 20
    tau_plateau: float = 1e-3  # relative improvement over a window that counts as a plateau
    tau_force_every: int = 80
    texture_size: int = 64
    env_dirs: int = 32
    specular: bool = True
    checkpoint_every: int = 100
    seed: int = 0

    def __post_init__(self):
        for name in ("stage1_iters", "stage2_iters", "stage3_iters"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 < self.tau_min <= self.tau:
            raise ValueError("need 0 < tau_min <= tau")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "CurriculumConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown curriculum keys: {sorted(unknown)}")
        return cls(**d)

    def scaled(self, factor: float) -> "CurriculumConfig":
        """Same curriculum with every stage shortened by ``factor`` (annealing cadence follows)."""
        n = lambda x: int(round(x * factor))  # noqa: E731
        return replace(self, stage1_iters=n(self.stage1_iters), stage2_iters=n(self.stage2_iters),
                       stage3_iters=n(self.stage3_iters), tau_force_every=max(1, n(self.tau_force_every)),
                       tau_window=max(2, n(self.tau_window)), checkpoint_every=max(1, n(self.checkpoint_every)))


@dataclass
class Stage1Result:
    z: np.ndarray
    trace: list


@dataclass
class FitResult:
    asset: FittedAsset
    trace: list
    report: dict


# ---------------------------------------------------------------------------
# helpers


@contextlib.contextmanager
def pinned_threads(n: int = 1):
    """Run torch reductions on a fixed thread count so results do not depend on the machine."""
    old = torch.get_num_threads()
    torch.set_num_threads(n)
    try:
        yield
    finally:
        torch.set_num_threads(old)


def _t(x) -> torch.Tensor:
    return torch.tensor(np.array(x, dtype=np.float64))


def targets_from(obs: SceneObservations) -> Targets:
    return Targets([_t(f.image) for f in obs.frames], [_t(f.mask) for f in obs.frames],
                   [f.camera.intrinsics for f in obs.frames], np.asarray(obs.cloud.points, dtype=np.float64))


def initial_appearance(cfg: CurriculumConfig, obs: Optional[SceneObservations] = None) -> AppearanceParams:
    """Flat mid-gray material under a uniform gray sky; kd starts at the mean observed foreground color."""
    kd = (0.5, 0.5, 0.5)
    if obs is not None and obs.frames:
        px = [f.image[f.mask > 0.5] for f in obs.frames if (f.mask > 0.5).any()]
        if px:
            kd = tuple(np.clip(np.concatenate(px).mean(0), 0.05, 0.95))
    return AppearanceParams.uniform(kd, roughness=0.5, metalness=0.0, size=cfg.texture_size, n_dirs=cfg.env_dirs,
                                    radiance=1.0)


def initial_state(obs: SceneObservations, space: ShapeSpace, cfg: CurriculumConfig, z0=None,
                  app: Optional[AppearanceParams] = None) -> SceneState:
    app = initial_appearance(cfg, obs) if app is None else app
    z = np.zeros(space.k) if z0 is None else np.asarray(z0, dtype=np.float64)
    cams = [f.camera.extrinsics for f in obs.frames]
    ident = Pose6D.identity()
    return SceneState(
        r_w=_t(1.0), r_h=_t(1.0), t_front=_t(np.zeros(3)), t_back=_t(np.zeros(3)), rho=_t(0.0),
        obj_rot6=_t(ident.rot6), obj_trans=_t(ident.translation),
        cam_rot6=_t(np.stack([c.rot6 for c in cams]) if cams else np.zeros((0, 6))),
        cam_trans=_t(np.stack([c.translation for c in cams]) if cams else np.zeros((0, 3))),
        kd=_t(app.kd), orm=_t(app.orm), env_dirs=_t(app.env_dirs), env_radiance=_t(app.env_radiance), z=_t(z))


@dataclass
class _Param:
    name: str
    tensor: torch.Tensor
    cfg: OptimizerConfig
    moments: Moments
    project: Optional[Callable] = None


def _make(name, tensor, kind, lr, project=None) -> _Param:
    t = tensor.detach().clone().requires_grad_(True)
    return _Param(name, t, OptimizerConfig(kind=kind, lr=lr), Moments.zeros_like(t), project)


def _apply_steps(params: list[_Param], lr_scale: float = 1.0):
    with torch.no_grad():
        for p in params:
            g = p.tensor.grad if p.tensor.grad is not None else torch.zeros_like(p.tensor)
            new, p.moments = step(p.tensor.detach(), g, p.moments, p.cfg, p.cfg.lr * lr_scale)
            if p.project is not None:
                new = p.project(new)
            p.tensor.copy_(new)
            p.tensor.grad = None


def _row(stage: int, it: int, tau: float, total, terms: dict) -> dict:
    row = {"stage": stage, "iter": it, "tau": tau, "total": float(total.detach()) if torch.is_tensor(total) else float(total)}
    row.update({k: float(v.detach()) for k, v in terms.items()})
    return row


def trace_digest(trace: list) -> str:
    return hashlib.sha256(json.dumps(trace, sort_keys=True).encode()).hexdigest()


def write_trace_csv(path, trace: list) -> None:
    keys = ["stage", "iter", "tau", "total"]
    for row in trace:
        keys += [k for k in row if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, restval="")
        w.writeheader()
        w.writerows(trace)


# ---------------------------------------------------------------------------
# stage 1


STAGE1_FLAGS = StageFlags(color=False, mask=True, lidar=True, shape=True, app=False, sym=False)
STAGE2_FLAGS = StageFlags(color=False, mask=True, lidar=True, shape=True, app=False, sym=True)
STAGE3_FLAGS = StageFlags()


def run_stage1_init(obs: SceneObservations, space: ShapeSpace, weights: EnergyWeights = EnergyWeights(),
                    cfg: CurriculumConfig = CurriculumConfig(), z0=None) -> Stage1Result:
    """Latent-code initialization: minimize mask + LiDAR + shape energy over ``z`` alone."""
    topo = ModelTopology.from_space(space)
    targets = targets_from(obs)
    state = initial_state(obs, space, cfg, z0)
    z = _make("z", state.z, "adam", cfg.stage1_lr)
    trace: list = []
    initial = None
    with pinned_threads():
        for it in range(cfg.stage1_iters):
            state.z = z.tensor
            total, terms, _, _ = energy_terms(state, targets, topo, weights, STAGE1_FLAGS, cfg.tau,
                                              seed=cfg.seed + it, specular=cfg.specular)
            trace.append(_row(1, it, cfg.tau, total, terms))
            val = trace[-1]["total"]
            initial = val if initial is None else initial
            if not math.isfinite(val) or val > 10.0 * initial:
                raise FitError(f"stage 1 diverged at iteration {it}: energy {val:.4g} vs initial {initial:.4g}", trace)
            if torch.is_tensor(total) and total.requires_grad:
                total.backward()
            _apply_steps([z])
    return Stage1Result(z.tensor.detach().numpy().copy(), trace)


# ---------------------------------------------------------------------------
# stages 2 and 3


def _project_orm(x):
    out = x.clone()
    out[..., 0] = x[..., 0].clamp(0.0, 1.0)
    out[..., 1] = x[..., 1].clamp(MIN_ROUGHNESS, 1.0)
    out[..., 2] = x[..., 2].clamp(0.0, 1.0)
    return out


def _project_scale(x):
    return x.clamp_min(1e-3)


def _snapshot(space: ShapeSpace, state: SceneState, topo: ModelTopology, provenance: dict) -> FittedAsset:
    st = space.structure
    body, wheel, hubs = (t.detach().numpy().copy() for t in state.parts(topo))
    poses = np.tile(np.eye(4), (st.n_wheels, 1, 1))
    poses[:, :3, 3] = hubs
    rw, rh = float(state.r_w.detach()), float(state.r_h.detach())
    vm = VehicleMesh(TriMesh(body, st.body_faces, st.body_uv), TriMesh(wheel, st.wheel_faces, st.wheel_uv), poses,
                     st.wheel_sides, np.array([rw, rh, rw]), state.t_front.detach().numpy().copy(),
                     state.t_back.detach().numpy().copy(), float(state.rho.detach()), st.front_wheel_indices)
    app = AppearanceParams(state.kd.detach().numpy().copy(), state.orm.detach().numpy().copy(),
                           state.env_dirs.detach().numpy().copy(), state.env_radiance.detach().numpy().copy())
    cams = [Pose6D(state.cam_rot6[i].detach().numpy().copy(), state.cam_trans[i].detach().numpy().copy())
            for i in range(state.cam_rot6.shape[0])]
    obj = Pose6D(state.obj_rot6.detach().numpy().copy(), state.obj_trans.detach().numpy().copy())
    return FittedAsset(vm, app.with_layout(layout_digest(vm)), None, dict(provenance), obj, cams)


def config_hash(cfg: CurriculumConfig, weights: EnergyWeights) -> str:
    blob = json.dumps({"curriculum": cfg.to_dict(), "weights": weights.to_dict()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


class _TauSchedule:
    """Halve tau on a plateau of the total energy, or at the latest every ``force_every`` iterations."""

    def __init__(self, cfg: CurriculumConfig):
        self.tau = cfg.tau
        self.cfg = cfg
        self.history: list[float] = []
        self.since = 0

    def update(self, value: float) -> bool:
        c = self.cfg
        self.history.append(value)
        self.since += 1
        if self.tau <= c.tau_min:
            return False
        plateau = False
        if len(self.history) > c.tau_window:
            old, new = self.history[-c.tau_window - 1], self.history[-1]
            plateau = (old - new) <= c.tau_plateau * abs(old)
        if plateau or self.since >= c.tau_force_every:
            self.tau = max(self.tau * c.tau_factor, c.tau_min)
            self.history = []
            self.since = 0
            return True
        return False


def run_full_fit(obs: SceneObservations, space: ShapeSpace, curriculum: CurriculumConfig = CurriculumConfig(),
                 weights: EnergyWeights = EnergyWeights(), z0=None, checkpoint_dir=None,
                 stage1: Optional[Stage1Result] = None) -> FitResult:
    """Stages 2 and 3 starting from a latent code (running stage 1 first when none is given)."""
    cfg = curriculum
    if stage1 is None and z0 is None:
        stage1 = run_stage1_init(obs, space, weights, cfg)
    z = stage1.z if stage1 is not None else np.asarray(z0, dtype=np.float64)
    trace = list(stage1.trace) if stage1 is not None else []
    topo = ModelTopology.from_space(space)
    targets = targets_from(obs)
    state = initial_state(obs, space, cfg, z)

    # explicit parts from the decoded latent; hubs stay where the shape space put them
    body0, wheel0, hubs = split_parts(space, decode_vertices(space, z))
    nb = topo.n_body
    rep = SmoothReparam.from_mesh(TriMesh(np.concatenate([body0, wheel0]), topo.part_faces), cfg.lambda_pre)
    state.z = None
    state.hubs = _t(hubs)
    u = _make("shape", _t(rep.to_latent(np.concatenate([body0, wheel0]))), "adam_uniform", cfg.shape_lr)

    geo = [u,
           _make("r_w", state.r_w, "adam", cfg.wheel_lr, _project_scale),
           _make("r_h", state.r_h, "adam", cfg.wheel_lr, _project_scale),
           _make("t_front", state.t_front, "adam", cfg.wheel_lr),
           _make("t_back", state.t_back, "adam", cfg.wheel_lr),
           _make("rho", state.rho, "adam", cfg.wheel_lr)]
    poses = []
    if cfg.optimize_poses:
        poses += [_make("obj_rot6", state.obj_rot6, "adam", cfg.object_pose_lr),
                  _make("obj_trans", state.obj_trans, "adam", cfg.object_pose_lr)]
        if cfg.optimize_cameras and obs.n_views:
            poses += [_make("cam_rot6", state.cam_rot6, "adam", cfg.camera_lr),
                      _make("cam_trans", state.cam_trans, "adam", cfg.camera_lr)]
    appearance = [_make("kd", state.kd, "adam", cfg.appearance_lr, lambda x: x.clamp(0.0, 1.0)),
                  _make("orm", state.orm, "adam", cfg.appearance_lr, _project_orm),
                  _make("env", state.env_radiance, "adam", cfg.appearance_lr, lambda x: x.clamp_min(0.0))]

    def bind(params):
        for p in params:
            if p.name == "shape":
                continue
            attr = {"env": "env_radiance"}.get(p.name, p.name)
            setattr(state, attr, p.tensor)
        v = rep.push(u.tensor)
        state.body, state.wheel = v[:nb], v[nb:]

    provenance = {"scene_id": obs.scene_id, "config_hash": config_hash(cfg, weights), "seed": cfg.seed}
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    last_good: Optional[FittedAsset] = None
    last_path: Optional[Path] = None
    tau = _TauSchedule(cfg)
    global_it = cfg.stage1_iters if stage1 is not None else 0

    def run_stage(stage: int, iters: int, flags: StageFlags, params: list[_Param], decay: bool):
        nonlocal last_good, last_path, global_it
        for it in range(iters):
            bind(params)
            cur_tau = tau.tau
            try:
                total, terms, _, _ = energy_terms(state, targets, topo, weights, flags, cur_tau,
                                                  seed=cfg.seed + global_it, specular=cfg.specular)
            except EnergyError as exc:
                raise FitError(f"stage {stage} iteration {it}: {exc}", trace, last_good, last_path) from exc
            trace.append(_row(stage, global_it, cur_tau, total, terms))
            if not math.isfinite(trace[-1]["total"]):
                raise FitError(f"stage {stage} iteration {it}: non-finite energy", trace, last_good, last_path)
            if torch.is_tensor(total) and total.requires_grad:
                total.backward()
            scale = cfg.stage3_decay ** (it / max(iters, 1)) if decay else 1.0
            for p in params:
                # the stage-3 falloff applies to every group except the poses
                is_pose = p.name in ("obj_rot6", "obj_trans", "cam_rot6", "cam_trans")
                _apply_steps([p], 1.0 if is_pose else scale)
            if stage == 3:
                tau.update(trace[-1]["total"])
            global_it += 1
            if cfg.checkpoint_every and global_it % cfg.checkpoint_every == 0:
                bind(params)
                last_good = _snapshot(space, state, topo, {**provenance, "checkpoint_iter": global_it})
                if ckpt_dir is not None:
                    ckpt_dir.mkdir(parents=True, exist_ok=True)
                    last_path = ckpt_dir / f"checkpoint_{global_it:05d}.cta"
                    save_asset(last_path, last_good)
                log.info("stage %d iter %d total %.6g tau %.4g", stage, global_it, trace[-1]["total"], cur_tau)

    with pinned_threads():
        run_stage(2, cfg.stage2_iters, STAGE2_FLAGS, geo + poses, decay=False)
        run_stage(3, cfg.stage3_iters, STAGE3_FLAGS, geo + poses + appearance, decay=True)
        bind(geo + poses + appearance)
        with torch.no_grad():
            total, terms, _, _ = energy_terms(state, targets, topo, weights, STAGE3_FLAGS, tau.tau,
                                              seed=cfg.seed + global_it, specular=cfg.specular)
    final = {k: float(v) for k, v in terms.items()}
    report = {"final_terms": final, "final_total": float(total), "final_tau": tau.tau, "iterations": global_it,
              "curriculum": cfg.to_dict(), "weights": weights.to_dict()}
    provenance["energy_trace_digest"] = trace_digest(trace)
    asset = _snapshot(space, state, topo, provenance)
    return FitResult(asset, trace, report)


def fit_scene(obs: SceneObservations, space: ShapeSpace, curriculum: CurriculumConfig = CurriculumConfig(),
              weights: EnergyWeights = EnergyWeights(), checkpoint_dir=None) -> FitResult:
    s1 = run_stage1_init(obs, space, weights, curriculum)
    return run_full_fit(obs, space, curriculum, weights, stage1=s1, checkpoint_dir=checkpoint_dir)
