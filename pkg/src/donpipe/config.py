"""Plain-text pipeline configuration: ``key = value`` lines under ``[section]`` headers.

Precedence is flag overrides > config file > built-in defaults.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass

import numpy as np

from .correspond import SamplingConfig
from .descriptor import LossConfig, TrainConfig
from .geometry import CameraIntrinsics
from .scenegen import SceneObject, SceneSpec, TrajectorySpec

DEFAULTS = {
    "scene": {
        "object1": "sphere -0.2 0.0 0.25 0.17 11 target",
        "object2": "sphere 0.25 0.0 0.2 0.11 4 target",
        "workspace_min": "-0.5 -0.5 -0.05",
        "workspace_max": "0.5 0.5 0.6",
        "ground_plane_z": "0.0",
    },
    "camera": {"width": "64", "height": "64", "fx": "70.0", "fy": "70.0", "cx": "31.5", "cy": "31.5"},
    "trajectory": {
        "n_frames": "30",
        "center": "0.0 0.0 0.2",
        "radius_min": "0.9",
        "radius_max": "1.8",
        "elevation_min": "0.2",
        "elevation_max": "1.2",
        "heldout_frames": "16",
        "distractor_objects": "",
        "distractor_frames": "0",
    },
    "fusion": {"voxel_size": "0.02", "cluster_radius": "0.05", "occlusion_tol": "0.03", "min_cluster_points": "20"},
    "sampling": {"m": "64", "n": "8", "occlusion_tol": "0.01", "n_samples": "10"},
    "loss": {"margin": "0.5", "normalize_by_sqrt_d": "true"},
    "train": {
        "lr0": "1e-4",
        "decay_factor": "0.9",
        "decay_every": "25",
        "weight_decay": "1e-4",
        "steps": "500",
        "descriptor_dim": "3",
        "patch_radius": "2",
        "hidden": "64",
        "use_coords": "false",
    },
    "keypoints": {
        "k_per_object": "4",
        "temperature": "0.05",
        "lift_mode": "camera_frame",
        "ref_frame": "0",
        "uncertain_threshold": "",
    },
    "eval": {"threshold_px": "3.0", "n_per_bin": "100", "points_per_pair": "10"},
    "policy": {
        "lr": "3e-4",
        "weight_decay": "3e-6",
        "steps": "3000",
        "n_demos": "16",
        "demo_len": "30",
        "gain": "0.1",
        "batch_trajectories": "",
    },
}


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    sections: dict

    def get(self, section: str, key: str) -> str:
        try:
            return self.sections[section][key]
        except KeyError:
            raise ConfigError(f"missing config key [{section}] {key}") from None

    def str(self, s, k) -> str:
        return self.get(s, k).strip()

    def int(self, s, k) -> int:
        try:
            return int(self.get(s, k))
        except ValueError:
            raise ConfigError(f"[{s}] {k} must be an integer, got {self.get(s, k)!r}") from None

    def float(self, s, k) -> float:
        try:
            return float(self.get(s, k))
        except ValueError:
            raise ConfigError(f"[{s}] {k} must be a number, got {self.get(s, k)!r}") from None

    def bool(self, s, k) -> bool:
        v = self.get(s, k).strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"[{s}] {k} must be a boolean, got {v!r}")

    def vec(self, s, k) -> tuple:
        try:
            return tuple(float(x) for x in self.get(s, k).split())
        except ValueError:
            raise ConfigError(f"[{s}] {k} must be a list of numbers") from None

    def optional_float(self, s, k):
        v = self.get(s, k).strip()
        return float(v) if v else None

    def optional_int(self, s, k):
        v = self.get(s, k).strip()
        return int(v) if v else None

    def dump(self) -> str:
        lines = []
        for s in self.sections:
            lines.append(f"[{s}]")
            for k in sorted(self.sections[s]):
                lines.append(f"{k} = {self.sections[s][k]}")
            lines.append("")
        return "\n".join(lines)


def load_config(path=None, overrides=()) -> Config:
    sections = {s: dict(v) for s, v in DEFAULTS.items()}
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from None
        for s in cp.sections():
            sections.setdefault(s, {}).update(cp[s])
        # an explicit [scene] replaces the default object list
        if cp.has_section("scene") and any(k.startswith("object") for k in cp["scene"]):
            for k in [k for k in sections["scene"] if k.startswith("object") and k not in cp["scene"]]:
                del sections["scene"][k]
    for ov in overrides:
        if "=" not in ov or "." not in ov.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {ov!r}")
        lhs, value = ov.split("=", 1)
        s, k = lhs.split(".", 1)
        sections.setdefault(s.strip(), {})[k.strip()] = value.strip()
    return Config(sections)


def _parse_object(text: str, where: str) -> SceneObject:
    t = text.split()
    if len(t) not in (6, 7):
        raise ConfigError(f"{where}: expected 'shape x y z size texture_seed [role]', got {text!r}")
    try:
        return SceneObject(t[0], (float(t[1]), float(t[2]), float(t[3])), float(t[4]), int(t[5]),
                           t[6] if len(t) == 7 else "target")
    except ValueError:
        raise ConfigError(f"{where}: malformed object {text!r}") from None


def _objects(cfg: Config, prefix: str = "object") -> tuple:
    keys = sorted((k for k in cfg.sections["scene"] if k.startswith(prefix) and k[len(prefix):].isdigit()),
                  key=lambda k: int(k[len(prefix):]))
    return tuple(_parse_object(cfg.sections["scene"][k], f"[scene] {k}") for k in keys)


def scene_spec(cfg: Config) -> SceneSpec:
    return SceneSpec(_objects(cfg), cfg.vec("scene", "workspace_min"), cfg.vec("scene", "workspace_max"),
                     cfg.float("scene", "ground_plane_z"))


def distractor_spec(cfg: Config) -> SceneSpec | None:
    """Scene with only the configured distractor objects (``sphere x y z size seed`` entries separated by ';')."""
    text = cfg.str("trajectory", "distractor_objects")
    if not text:
        return None
    objs = tuple(SceneObject(o.shape, o.center, o.size, o.texture_seed, "target")
                 for o in (_parse_object(p, "[trajectory] distractor_objects") for p in text.split(";")))
    return SceneSpec(objs, cfg.vec("scene", "workspace_min"), cfg.vec("scene", "workspace_max"),
                     cfg.float("scene", "ground_plane_z"))


def intrinsics(cfg: Config) -> CameraIntrinsics:
    return CameraIntrinsics(cfg.float("camera", "fx"), cfg.float("camera", "fy"), cfg.float("camera", "cx"),
                            cfg.float("camera", "cy"), cfg.int("camera", "width"), cfg.int("camera", "height"))


def trajectory_spec(cfg: Config, seed: int, n_frames: int | None = None) -> TrajectorySpec:
    return TrajectorySpec(n_frames or cfg.int("trajectory", "n_frames"), cfg.vec("trajectory", "center"),
                          cfg.float("trajectory", "radius_min"), cfg.float("trajectory", "radius_max"),
                          cfg.float("trajectory", "elevation_min"), cfg.float("trajectory", "elevation_max"), seed)


def sampling_config(cfg: Config, seed: int) -> SamplingConfig:
    return SamplingConfig(cfg.int("sampling", "m"), cfg.int("sampling", "n"), cfg.float("sampling", "occlusion_tol"), seed)


def loss_config(cfg: Config) -> LossConfig:
    return LossConfig(cfg.float("loss", "margin"), cfg.bool("loss", "normalize_by_sqrt_d"))


def train_config(cfg: Config, seed: int) -> TrainConfig:
    return TrainConfig(cfg.float("train", "lr0"), cfg.float("train", "decay_factor"), cfg.int("train", "decay_every"),
                       cfg.float("train", "weight_decay"), cfg.int("train", "steps"), seed)


def center(cfg: Config) -> np.ndarray:
    return np.asarray(cfg.vec("trajectory", "center"))
