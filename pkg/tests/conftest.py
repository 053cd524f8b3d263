import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

import mprefine as mp


def random_instance(cfg, rng, n_active=None, labeled=True):
    """A valid random instance: softmax-normalized rows, zero masked rows."""
    ls = cfg.label_spaces
    if n_active is None:
        n_active = int(rng.integers(0, cfg.max_persons + 1))
    mask = np.zeros(cfg.max_persons, dtype=bool)
    mask[:n_active] = True
    scene = mp.softmax(rng.normal(size=ls.num_scenes))
    actions = np.zeros((cfg.max_persons, ls.num_actions))
    poses = np.zeros((cfg.max_persons, ls.num_poses))
    for m in range(n_active):
        actions[m] = mp.softmax(rng.normal(size=ls.num_actions))
        if ls.poses_enabled:
            poses[m] = mp.softmax(rng.normal(size=ls.num_poses))
    truth_actions = np.full(cfg.max_persons, -1, dtype=np.int64)
    truth_poses = np.full(cfg.max_persons, -1, dtype=np.int64)
    truth_scene = -1
    if labeled:
        truth_scene = int(rng.integers(ls.num_scenes))
        truth_actions[:n_active] = rng.integers(ls.num_actions, size=n_active)
        if ls.poses_enabled:
            truth_poses[:n_active] = rng.integers(ls.num_poses, size=n_active)
    return mp.SceneInstance(
        scene_unary=scene,
        action_unary=actions,
        pose_unary=poses,
        person_mask=mask,
        truth_scene=truth_scene,
        truth_actions=truth_actions,
        truth_poses=truth_poses,
    )


def random_params(cfg, rng, scale=0.5):
    params = mp.init_network_params(cfg)
    for _, arr in mp.param_items(params):
        arr[...] = rng.uniform(-scale, scale, arr.shape)
    return params
