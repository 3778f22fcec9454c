"""Linear-Gaussian behavioral cloning on keypoint observations.

The policy predicts the mean of a fixed-variance Gaussian over 6-D end-effector
deltas (3 translation, 3 axis-angle rotation) and is fit by minimizing the
negative log-likelihood of demonstrated actions.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .optim import Adam

SIGMA_TRANS = 0.001  # 1 mm
SIGMA_ROT = np.deg2rad(0.25)
ACTION_DIM = 6
HALF_LOG_2PI = 0.5 * np.log(2 * np.pi)


class EmptyDataset(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PolicyParams:
    weights: np.ndarray  # (obs_dim, 6)
    bias: np.ndarray  # (6,)
    sigma_trans: float = SIGMA_TRANS
    sigma_rot: float = SIGMA_ROT

    def __post_init__(self):
        if not (self.sigma_trans > 0 and self.sigma_rot > 0):
            raise ValueError("sigmas must be positive")
        if self.weights.ndim != 2 or self.weights.shape[1] != ACTION_DIM or self.bias.shape != (ACTION_DIM,):
            raise DimensionMismatch(f"bad parameter shapes {self.weights.shape}, {self.bias.shape}")

    @property
    def sigma(self) -> np.ndarray:
        return np.array([self.sigma_trans] * 3 + [self.sigma_rot] * 3)

    @property
    def obs_dim(self) -> int:
        return self.weights.shape[0]


def entropy_floor(params: PolicyParams) -> float:
    return float(np.sum(np.log(params.sigma) + HALF_LOG_2PI))


def _check(params: PolicyParams, obs: np.ndarray):
    if obs.shape[-1] != params.obs_dim:
        raise DimensionMismatch(f"observation has {obs.shape[-1]} components, policy expects {params.obs_dim}")


def predict(params: PolicyParams, obs) -> np.ndarray:
    obs = np.asarray(obs, dtype=np.float64)
    _check(params, obs)
    return obs @ params.weights + params.bias


def nll_loss(params: PolicyParams, obs, action) -> float:
    """Gaussian negative log-likelihood of one action (summed over its 6 components)."""
    action = np.asarray(action, dtype=np.float64)
    if action.shape[-1] != ACTION_DIM:
        raise DimensionMismatch(f"action has {action.shape[-1]} components")
    r = (action - predict(params, obs)) / params.sigma
    return float(np.sum(0.5 * r * r) + entropy_floor(params))


def mean_nll(params: PolicyParams, obs: np.ndarray, actions: np.ndarray) -> float:
    r = (actions - predict(params, obs)) / params.sigma
    return float(np.mean(np.sum(0.5 * r * r, axis=1)) + entropy_floor(params))


def _grad(params: PolicyParams, obs: np.ndarray, actions: np.ndarray) -> dict:
    s2 = params.sigma**2
    g = (predict(params, obs) - actions) / s2 / len(obs)  # d mean_nll / d mu
    return {"weights": obs.T @ g, "bias": g.sum(0)}


def init_policy(obs_dim: int, seed: int = 0, scale: float = 1e-3) -> PolicyParams:
    rng = np.random.default_rng([seed, 0xBC])
    return PolicyParams(rng.standard_normal((obs_dim, ACTION_DIM)) * scale, np.zeros(ACTION_DIM))


def train_policy(dataset, lr: float = 3e-4, weight_decay: float = 3e-6, steps: int = 3000, seed: int = 0,
                 batch_trajectories: int | None = None, init: PolicyParams | None = None) -> PolicyParams:
    """Adam on mean NLL over all time steps of a batch of whole trajectories.

    ``dataset`` is a list of (obs (T, obs_dim), actions (T, 6)) arrays. With
    ``batch_trajectories=None`` every step uses the full dataset.
    """
    if not dataset:
        raise EmptyDataset("no trajectories")
    data = [(np.asarray(o, np.float64), np.asarray(a, np.float64)) for o, a in dataset]
    obs_dim = data[0][0].shape[1]
    if any(o.shape[1] != obs_dim or a.shape[1] != ACTION_DIM or len(o) != len(a) for o, a in data):
        raise DimensionMismatch("inconsistent trajectory shapes")
    rng = np.random.default_rng(seed)
    params = init if init is not None else init_policy(obs_dim, seed)
    arrs = {"weights": params.weights, "bias": params.bias}
    opt = Adam(arrs)
    full = (np.concatenate([o for o, _ in data]), np.concatenate([a for _, a in data]))
    for _ in range(steps):
        if batch_trajectories is None or batch_trajectories >= len(data):
            obs, act = full
        else:
            pick = rng.choice(len(data), size=batch_trajectories, replace=False)
            obs = np.concatenate([data[i][0] for i in pick])
            act = np.concatenate([data[i][1] for i in pick])
        cur = PolicyParams(arrs["weights"], arrs["bias"], params.sigma_trans, params.sigma_rot)
        grads = _grad(cur, obs, act)
        for k in grads:
            grads[k] = grads[k] + 2.0 * weight_decay * arrs[k]
        arrs = opt.step(arrs, grads, lr)
    return PolicyParams(arrs["weights"], arrs["bias"], params.sigma_trans, params.sigma_rot)


def planted_dataset(obs_dim: int = 10, n_traj: int = 20, T: int = 50, seed: int = 0, noise: float = 1.0):
    """Trajectories from a known linear policy plus Gaussian noise of ``noise`` sigmas.

    Returns (dataset, true_weights, true_bias).
    """
    rng = np.random.default_rng([seed, 0x9A])
    W = rng.uniform(-1.0, 1.0, (obs_dim, ACTION_DIM)) * np.array([0.004] * 3 + [0.015] * 3)
    b = rng.uniform(-1.0, 1.0, ACTION_DIM) * np.array([0.002] * 3 + [0.01] * 3)
    sigma = np.array([SIGMA_TRANS] * 3 + [SIGMA_ROT] * 3)
    data = []
    for _ in range(n_traj):
        obs = rng.uniform(-1.0, 1.0, (T, obs_dim))
        act = obs @ W + b + noise * sigma * rng.standard_normal((T, ACTION_DIM))
        data.append((obs, act))
    return data, W, b


def write_dataset_csv(path, obs: np.ndarray, actions: np.ndarray, obs_names=None) -> None:
    obs_names = obs_names or [f"obs_{i}" for i in range(obs.shape[1])]
    act_names = ["dx", "dy", "dz", "rx", "ry", "rz"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(obs_names) + act_names)
        for o, a in zip(obs, actions):
            w.writerow([format(float(x), ".17g") for x in np.concatenate([o, a])])


def read_dataset_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or len(rows[0]) <= ACTION_DIM:
        raise ValueError(f"{path}: missing header or too few columns")
    arr = np.array([[float(x) for x in r] for r in rows[1:]], dtype=np.float64).reshape(-1, len(rows[0]))
    return arr[:, :-ACTION_DIM], arr[:, -ACTION_DIM:]


def scripted_reach(keypoint_obs: np.ndarray, target: np.ndarray, T: int, gain: float, rng):
    """A reach demo in a static camera frame: the end effector moves a fixed
    fraction of the remaining offset to ``target`` each step and unwinds its
    rotation. Observation = keypoints, then effector position and axis-angle."""
    ee = np.asarray(target, float) + rng.uniform(-0.25, 0.25, 3)
    rot = rng.uniform(-0.5, 0.5, 3)
    obs, act = [], []
    for _ in range(T):
        a = np.concatenate([gain * (target - ee), -gain * rot])
        obs.append(np.concatenate([keypoint_obs, ee, rot]))
        act.append(a)
        ee = ee + a[:3]
        rot = rot + a[3:]
    return np.array(obs), np.array(act)
