"""Deterministic synthetic scenes, raycast RGB-D rendering and orbit trajectories."""
from __future__ import annotations

import colorsys
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, Pose, look_at

MAX_RANGE = 100.0
LIGHT_DIR = np.array([0.35, -0.25, 0.9]) / np.linalg.norm([0.35, -0.25, 0.9])
AMBIENT = 0.75
DIFFUSE = 0.25
BACKGROUND_RGB = np.zeros(3)
GROUND_GRAY = 0.45
NOISE_LATTICE = 32
OCTAVES = 3
# texture field parameters (object-relative units)
GRADIENT_GAIN = 0.3
NOISE_GAIN = 0.25
NOISE_FREQ = 1.5


class InvalidSpec(ValueError):
    pass


class CameraInsideGeometry(ValueError):
    pass


@dataclass(frozen=True)
class SceneObject:
    shape: str  # "sphere" (size = radius) or "box" (size = half edge, axis aligned)
    center: tuple
    size: float
    texture_seed: int
    role: str = "target"


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple
    workspace_min: tuple = (-0.5, -0.5, -0.05)
    workspace_max: tuple = (0.5, 0.5, 0.6)
    ground_plane_z: float = 0.0

    def validate(self) -> None:
        if not any(o.role == "target" for o in self.objects):
            raise InvalidSpec("scene needs at least one target object")
        lo, hi = np.asarray(self.workspace_min, float), np.asarray(self.workspace_max, float)
        if np.any(lo >= hi):
            raise InvalidSpec("workspace_min must be below workspace_max on every axis")
        for k, o in enumerate(self.objects, start=1):
            if o.shape not in ("sphere", "box"):
                raise InvalidSpec(f"object {k}: unknown shape {o.shape!r}")
            if o.role not in ("target", "distractor"):
                raise InvalidSpec(f"object {k}: unknown role {o.role!r}")
            if not o.size > 0:
                raise InvalidSpec(f"object {k}: size must be positive")
            c = np.asarray(o.center, float)
            if c.shape != (3,) or np.any(c < lo) or np.any(c > hi):
                raise InvalidSpec(f"object {k}: center outside workspace")

    def digest(self) -> str:
        parts = [f"{self.ground_plane_z!r}", repr(tuple(self.workspace_min)), repr(tuple(self.workspace_max))]
        for o in self.objects:
            parts.append(f"{o.shape}|{tuple(float(c) for c in o.center)!r}|{float(o.size)!r}|{o.texture_seed}|{o.role}")
        return hashlib.sha256("\n".join(parts).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ObjectTexture:
    tint: np.ndarray
    gradient: np.ndarray  # 3x3
    lattice: np.ndarray  # (OCTAVES, 3, L, L, L)
    offsets: np.ndarray  # (OCTAVES, 3)


@dataclass(frozen=True)
class Scene:
    spec: SceneSpec
    seed: int
    textures: tuple
    ground_lattice: np.ndarray

    @property
    def n_objects(self) -> int:
        return len(self.spec.objects)


@dataclass(eq=False)
class Frame:
    frame_id: int
    rgb: np.ndarray  # H x W x 3, multiples of 1/255
    depth: np.ndarray  # H x W float32, 0 = invalid
    pose: Pose
    intr: CameraIntrinsics

    @property
    def shape(self) -> tuple:
        return self.depth.shape


@dataclass(eq=False)
class Trajectory:
    """Frames of one static scene plus optional oracle ids and per-label masks.

    ``masks[i]`` maps object label -> H x W bool array for frame ``frames[i]``.
    """

    frames: list
    ids: list | None = None
    masks: list | None = None
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    name: str = "traj"
    scene_digest: str = ""

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def labels(self) -> list:
        if not self.masks:
            return []
        return sorted({lab for m in self.masks for lab in m})

    def camera_distance(self, i: int) -> float:
        return float(np.linalg.norm(self.frames[i].pose.center - self.center))


@dataclass(frozen=True)
class TrajectorySpec:
    n_frames: int
    center: tuple = (0.0, 0.0, 0.2)
    radius_min: float = 0.9
    radius_max: float = 1.8
    elevation_min: float = 0.2
    elevation_max: float = 1.2
    seed: int = 0

    def validate(self, scene: Scene | None = None) -> None:
        if self.n_frames < 2:
            raise InvalidSpec("n_frames must be >= 2")
        if not 0 < self.radius_min <= self.radius_max:
            raise InvalidSpec("need 0 < radius_min <= radius_max")
        if self.elevation_min > self.elevation_max:
            raise InvalidSpec("elevation_min > elevation_max")
        if scene is not None:
            largest = max(o.size for o in scene.spec.objects)
            if not self.radius_min > largest:
                raise InvalidSpec("radius_min must exceed the largest object size")


def _tint(texture_seed: int) -> np.ndarray:
    hue = (texture_seed * 0.6180339887498949) % 1.0
    return np.array(colorsys.hsv_to_rgb(hue, 0.9, 0.75))


def _make_texture(texture_seed: int) -> ObjectTexture:
    rng = np.random.default_rng([texture_seed, 0x7E47])
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    L = NOISE_LATTICE
    return ObjectTexture(
        tint=_tint(texture_seed),
        gradient=q * GRADIENT_GAIN,
        lattice=rng.random((OCTAVES, 3, L, L, L)),
        offsets=rng.random((OCTAVES, 3)) * L,
    )


def build_scene(spec: SceneSpec, seed: int = 0) -> Scene:
    spec.validate()
    textures = tuple(_make_texture(o.texture_seed) for o in spec.objects)
    ground = np.random.default_rng([seed, 0x6A0D]).random((NOISE_LATTICE, NOISE_LATTICE))
    return Scene(spec, seed, textures, ground)


def value_noise(lattice: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Trilinear, smoothstep-blended value noise on a wrapping lattice.

    lattice: (C, L, L, L); x: (N, 3) lattice coordinates. Returns (N, C).
    """
    L = lattice.shape[-1]
    f = np.floor(x)
    i0 = f.astype(np.int64) % L
    i1 = (i0 + 1) % L
    t = x - f
    s = t * t * (3.0 - 2.0 * t)
    out = 0.0
    for dx in (0, 1):
        wx = s[:, 0] if dx else 1.0 - s[:, 0]
        ix = i1[:, 0] if dx else i0[:, 0]
        for dy in (0, 1):
            wy = s[:, 1] if dy else 1.0 - s[:, 1]
            iy = i1[:, 1] if dy else i0[:, 1]
            for dz in (0, 1):
                wz = s[:, 2] if dz else 1.0 - s[:, 2]
                iz = i1[:, 2] if dz else i0[:, 2]
                out = out + (wx * wy * wz)[:, None] * lattice[:, ix, iy, iz].T
    return out


def object_albedo(tex: ObjectTexture, q: np.ndarray) -> np.ndarray:
    """Color at object-relative coordinates q = (p - center) / size."""
    color = tex.tint + q @ tex.gradient.T
    amp = NOISE_GAIN
    for o in range(OCTAVES):
        x = q * (NOISE_FREQ * 2.0**o) + tex.offsets[o]
        color = color + amp * (value_noise(tex.lattice[o], x) - 0.5)
        amp *= 0.5
    return np.clip(color, 0.0, 1.0)


def _ground_albedo(scene: Scene, p: np.ndarray) -> np.ndarray:
    L = NOISE_LATTICE
    g = scene.ground_lattice
    x = p[:, :2] * 4.0
    f = np.floor(x)
    i0 = f.astype(np.int64) % L
    i1 = (i0 + 1) % L
    t = x - f
    s = t * t * (3 - 2 * t)
    v = (
        (1 - s[:, 0]) * (1 - s[:, 1]) * g[i0[:, 0], i0[:, 1]]
        + s[:, 0] * (1 - s[:, 1]) * g[i1[:, 0], i0[:, 1]]
        + (1 - s[:, 0]) * s[:, 1] * g[i0[:, 0], i1[:, 1]]
        + s[:, 0] * s[:, 1] * g[i1[:, 0], i1[:, 1]]
    )
    gray = GROUND_GRAY + 0.08 * (v - 0.5)
    return np.repeat(gray[:, None], 3, axis=1)


def camera_rays(pose: Pose, intr: CameraIntrinsics):
    """World-space ray origin and directions scaled so that the ray parameter is camera z."""
    v, u = np.mgrid[0 : intr.height, 0 : intr.width].astype(np.float64)
    d_cam = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1).reshape(-1, 3)
    return pose.translation.copy(), d_cam @ pose.rotation.T


def intersect_sphere(origin, dirs, center, radius) -> np.ndarray:
    """Smallest positive ray parameter, inf on miss."""
    oc = origin - np.asarray(center, float)
    a = np.einsum("ij,ij->i", dirs, dirs)
    b = 2.0 * dirs @ oc
    c = oc @ oc - radius * radius
    disc = b * b - 4 * a * c
    t = np.full(len(dirs), np.inf)
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = (-b - sq) / (2 * a)
    t1 = (-b + sq) / (2 * a)
    near = np.where(t0 > 1e-9, t0, t1)
    ok = hit & (near > 1e-9)
    t[ok] = near[ok]
    return t


def intersect_box(origin, dirs, center, half) -> np.ndarray:
    lo = np.asarray(center, float) - half
    hi = np.asarray(center, float) + half
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (lo - origin) * inv
        tb = (hi - origin) * inv
    tmin = np.nanmax(np.minimum(ta, tb), axis=1)
    tmax = np.nanmin(np.maximum(ta, tb), axis=1)
    t = np.full(len(dirs), np.inf)
    near = np.where(tmin > 1e-9, tmin, tmax)
    ok = (tmax >= tmin) & (near > 1e-9)
    t[ok] = near[ok]
    return t


def _object_normal(obj: SceneObject, p: np.ndarray) -> np.ndarray:
    d = p - np.asarray(obj.center, float)
    if obj.shape == "sphere":
        return d / np.linalg.norm(d, axis=1, keepdims=True)
    axis = np.argmax(np.abs(d), axis=1)
    n = np.zeros_like(d)
    n[np.arange(len(d)), axis] = np.sign(d[np.arange(len(d)), axis])
    return n


def camera_inside(scene: Scene, eye) -> bool:
    eye = np.asarray(eye, float)
    for o in scene.spec.objects:
        d = eye - np.asarray(o.center, float)
        if o.shape == "sphere" and np.linalg.norm(d) < o.size:
            return True
        if o.shape == "box" and np.all(np.abs(d) < o.size):
            return True
    return False


def render_frame(scene: Scene, pose: Pose, intr: CameraIntrinsics, frame_id: int = 0):
    """Raycast one RGB-D frame; returns (Frame, IdRaster)."""
    if camera_inside(scene, pose.translation):
        raise CameraInsideGeometry(f"camera at {pose.translation.tolist()} is inside an object")
    origin, dirs = camera_rays(pose, intr)
    n = len(dirs)
    best_t = np.full(n, np.inf)
    best_id = np.zeros(n, dtype=np.int64)
    for k, o in enumerate(scene.spec.objects, start=1):
        if o.shape == "sphere":
            t = intersect_sphere(origin, dirs, o.center, o.size)
        else:
            t = intersect_box(origin, dirs, o.center, o.size)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_id[closer] = k
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = (scene.spec.ground_plane_z - origin[2]) / dirs[:, 2]
    tg = np.where(np.isfinite(tg) & (tg > 1e-9), tg, np.inf)
    ground = tg < best_t
    best_t[ground] = tg[ground]
    best_id[ground] = 0

    valid = best_t <= MAX_RANGE
    best_id[~valid] = 0
    rgb = np.tile(BACKGROUND_RGB, (n, 1))
    points = origin + dirs * np.where(valid, best_t, 0.0)[:, None]

    gmask = valid & ground
    if gmask.any():
        shade = AMBIENT + DIFFUSE * max(0.0, LIGHT_DIR[2])
        rgb[gmask] = _ground_albedo(scene, points[gmask]) * shade
    for k, (o, tex) in enumerate(zip(scene.spec.objects, scene.textures), start=1):
        sel = valid & (best_id == k)
        if not sel.any():
            continue
        p = points[sel]
        q = (p - np.asarray(o.center, float)) / o.size
        shade = AMBIENT + DIFFUSE * np.maximum(0.0, _object_normal(o, p) @ LIGHT_DIR)
        rgb[sel] = object_albedo(tex, q) * shade[:, None]

    rgb = np.round(np.clip(rgb, 0.0, 1.0) * 255.0) / 255.0
    depth = np.where(valid, best_t, 0.0).astype(np.float32)
    H, W = intr.height, intr.width
    frame = Frame(frame_id, rgb.reshape(H, W, 3), depth.reshape(H, W), pose, intr)
    return frame, best_id.reshape(H, W).astype(np.uint8)


def orbit_poses(tspec: TrajectorySpec) -> list:
    rng = np.random.default_rng([tspec.seed, 0x0B17])
    center = np.asarray(tspec.center, float)
    poses = []
    for _ in range(tspec.n_frames):
        az = rng.uniform(0.0, 2 * np.pi)
        el = rng.uniform(tspec.elevation_min, tspec.elevation_max)
        r = rng.uniform(tspec.radius_min, tspec.radius_max)
        eye = center + r * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        poses.append(look_at(eye, center))
    return poses


def generate_trajectory(scene: Scene, tspec: TrajectorySpec, intr: CameraIntrinsics, name: str = "traj") -> Trajectory:
    tspec.validate(scene)
    frames, ids = [], []
    for i, pose in enumerate(orbit_poses(tspec)):
        f, idr = render_frame(scene, pose, intr, frame_id=i)
        frames.append(f)
        ids.append(idr)
    return Trajectory(frames, ids, None, np.asarray(tspec.center, float), name, scene.spec.digest())


def render_poses(scene: Scene, poses, intr: CameraIntrinsics, center, name: str = "traj") -> Trajectory:
    """Render an explicit pose list (scripted camera paths)."""
    frames, ids = [], []
    for i, pose in enumerate(poses):
        f, idr = render_frame(scene, pose, intr, frame_id=i)
        frames.append(f)
        ids.append(idr)
    return Trajectory(frames, ids, None, np.asarray(center, float), name, scene.spec.digest())
