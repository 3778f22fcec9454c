"""Standard synthetic fixtures shared by tests, scripts and the CLI defaults."""
from __future__ import annotations

import numpy as np

from .correspond import SamplingConfig
from .descriptor import LossConfig, TrainConfig, init_params, train
from .fusion import cluster_objects, extract_cloud, fuse, label_trajectory
from .geometry import default_intrinsics, look_at
from .scenegen import SceneObject, SceneSpec, TrajectorySpec, build_scene, generate_trajectory, render_poses

# texture seeds picked for well separated tints
TWO_SPHERES = SceneSpec(
    objects=(
        SceneObject("sphere", (-0.2, 0.0, 0.25), 0.17, texture_seed=11),
        SceneObject("sphere", (0.25, 0.0, 0.2), 0.11, texture_seed=4),
    ),
    workspace_min=(-0.5, -0.5, -0.05),
    workspace_max=(0.5, 0.5, 0.6),
    ground_plane_z=0.0,
)

ORBIT_CENTER = (0.0, 0.0, 0.2)
TRAIN_ORBIT = TrajectorySpec(n_frames=30, center=ORBIT_CENTER, radius_min=0.9, radius_max=1.8,
                             elevation_min=0.2, elevation_max=1.2, seed=3)
HELDOUT_ORBIT = TrajectorySpec(n_frames=16, center=ORBIT_CENTER, radius_min=0.9, radius_max=1.8,
                               elevation_min=0.2, elevation_max=1.2, seed=101)


def two_sphere_scene(seed: int = 0):
    return build_scene(TWO_SPHERES, seed)


def train_trajectory(scene=None, n_frames: int | None = None, seed: int | None = None):
    scene = scene or two_sphere_scene()
    spec = TRAIN_ORBIT
    if n_frames is not None or seed is not None:
        spec = TrajectorySpec(n_frames or spec.n_frames, spec.center, spec.radius_min, spec.radius_max,
                              spec.elevation_min, spec.elevation_max, spec.seed if seed is None else seed)
    return generate_trajectory(scene, spec, default_intrinsics(), name="train")


def heldout_trajectory(scene=None):
    scene = scene or two_sphere_scene()
    return generate_trajectory(scene, HELDOUT_ORBIT, default_intrinsics(), name="heldout")


def occlusion_poses(n_hidden: int = 6, n_visible: int = 10):
    """Camera path where the small sphere is fully hidden behind the large one in
    the first ``n_hidden`` frames and in view for the rest."""
    big = np.asarray(TWO_SPHERES.objects[0].center)
    small = np.asarray(TWO_SPHERES.objects[1].center)
    axis = (big - small) / np.linalg.norm(big - small)
    poses = []
    for i in range(n_hidden):
        dist = 0.75 + 0.5 * i / max(n_hidden - 1, 1)
        eye = big + axis * dist
        poses.append(look_at(eye, big + (small - big) * 0.3))
    for i in range(n_visible):
        az = 2 * np.pi * (i + 0.5) / n_visible + 0.4
        r = 1.0 + 0.6 * (i % 3) / 2
        el = 0.35 + 0.5 * (i % 2)
        eye = np.asarray(ORBIT_CENTER) + r * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        poses.append(look_at(eye, ORBIT_CENTER))
    return poses


def occlusion_trajectory(scene=None):
    scene = scene or two_sphere_scene()
    return render_poses(scene, occlusion_poses(), default_intrinsics(), ORBIT_CENTER, name="occlusion")


# schedule used for the fixture runs; the library defaults keep the slower published one
FIXTURE_TRAIN = TrainConfig(lr0=0.01, decay_factor=0.9, decay_every=250, weight_decay=1e-4, steps=2000, seed=0)
VOXEL = 0.02
CLUSTER_RADIUS = 0.05
MASK_OCC_TOL = 0.03


def fixture_cloud(traj):
    spec = TWO_SPHERES
    vol = fuse(traj.frames, spec.workspace_min, spec.workspace_max, VOXEL)
    pts = extract_cloud(vol, spec.workspace_min, spec.workspace_max, spec.ground_plane_z)
    return cluster_objects(pts, CLUSTER_RADIUS)


def labeled_fixture():
    """Scene, labeled cloud and masked train / heldout / occlusion trajectories."""
    scene = two_sphere_scene()
    tr, ho, oc = train_trajectory(scene), heldout_trajectory(scene), occlusion_trajectory(scene)
    cloud = fixture_cloud(tr)
    for t in (tr, ho, oc):
        label_trajectory(t, cloud, MASK_OCC_TOL)
    return scene, cloud, tr, ho, oc


def train_fixture_encoder(traj, D: int = 3, seed: int = 0, steps: int | None = None):
    tcfg = FIXTURE_TRAIN
    if steps is not None or seed != tcfg.seed:
        tcfg = TrainConfig(tcfg.lr0, tcfg.decay_factor, tcfg.decay_every, tcfg.weight_decay,
                           steps or tcfg.steps, seed)
    return train([traj], SamplingConfig(rng_seed=seed), LossConfig(), tcfg, init=init_params(seed, D=D))
