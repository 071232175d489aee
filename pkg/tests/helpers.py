"""Shared scene builders for the energy, fitting and acceptance tests."""

import numpy as np
import torch

from cadtwin.energy import SceneState
from cadtwin.fitting import CurriculumConfig, initial_state
from cadtwin.scene import FixtureConfig, NoiseSpec, generate_fixture


def small_fixture(space, seed=0, resolution=32, views=2, lidar_points=300, heldout=0, noise=NoiseSpec(),
                  texture_size=8, env_dirs=8):
    cfg = FixtureConfig(view_count=views, heldout_count=heldout, lidar_points=lidar_points, resolution=resolution,
                        texture_size=texture_size, env_dirs=env_dirs, sweeps=2, noise=noise)
    return generate_fixture(seed, space, cfg)


def gt_state(obs, space, gt) -> SceneState:
    """Scene state sitting exactly on the ground truth (latent-driven mesh)."""
    app = gt.appearance
    cfg = CurriculumConfig(texture_size=app.kd.shape[0], env_dirs=len(app.env_dirs))
    s = initial_state(obs, space, cfg, z0=np.asarray(gt.provenance["z"]), app=app)
    s.obj_rot6 = torch.tensor(np.array(gt.object_pose.rot6))
    s.obj_trans = torch.tensor(np.array(gt.object_pose.translation))
    return s
