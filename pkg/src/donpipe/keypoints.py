"""Reference descriptors and keypoint extraction from dense descriptor maps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .descriptor import DimensionMismatch
from .geometry import PixelCoord, unproject

DEFAULT_TEMPERATURE = 0.05

# Keypoint.flags bits
DEPTH_FROM_NEIGHBOR = 1
DEPTH_FALLBACK_MEDIAN = 2
UNCERTAIN = 4


class EmptyMask(ValueError):
    pass


class ManualOutsideMask(ValueError):
    pass


class OutOfBounds(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ReferenceSet:
    descriptors: np.ndarray  # (K, D)
    labels: np.ndarray  # (K,)
    frame_id: int
    pixels: np.ndarray  # (K, 2) as (u, v)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class Keypoint:
    pixel: PixelCoord
    confidence: float
    min_distance: float
    depth: float = 0.0
    lift: tuple = (0.0, 0.0, 0.0)
    normalized: tuple = (0.0, 0.0)
    flags: int = 0


def select_references(desc_map: np.ndarray, masks: dict, k_per_object: int, mode: str = "random",
                      manual: dict | None = None, seed: int = 0, frame_id: int = 0) -> ReferenceSet:
    """``k_per_object`` reference pixels for every label in ``masks``.

    Random mode samples pixels uniformly without replacement from each mask;
    manual mode takes ``manual[label]`` pixel lists and validates them.
    """
    rng = np.random.default_rng(seed)
    descs, labels, pixels = [], [], []
    for label in sorted(masks):
        bits = masks[label]
        if not bits.any():
            raise EmptyMask(f"object {label} has an empty mask in frame {frame_id}")
        if mode == "random":
            cand = np.argwhere(bits)[:, ::-1]
            pick = cand[rng.choice(len(cand), size=k_per_object, replace=len(cand) < k_per_object)]
        elif mode == "manual":
            pick = np.asarray((manual or {}).get(label, []), dtype=np.int64).reshape(-1, 2)
            if len(pick) != k_per_object:
                raise ValueError(f"object {label}: expected {k_per_object} manual pixels, got {len(pick)}")
            H, W = bits.shape
            for u, v in pick:
                if not (0 <= u < W and 0 <= v < H) or not bits[v, u]:
                    raise ManualOutsideMask(f"pixel ({u}, {v}) is not on object {label}")
        else:
            raise ValueError(f"unknown mode {mode!r}")
        for u, v in pick:
            descs.append(desc_map[v, u])
            labels.append(label)
            pixels.append((u, v))
    return ReferenceSet(np.array(descs, dtype=np.float64), np.array(labels), frame_id, np.array(pixels, dtype=np.int64))


def distance_map(desc_map: np.ndarray, ref: np.ndarray, normalize: bool = True) -> np.ndarray:
    ref = np.asarray(ref, dtype=np.float64)
    if desc_map.shape[-1] != ref.shape[-1]:
        raise DimensionMismatch(f"map has D={desc_map.shape[-1]}, reference has D={ref.shape[-1]}")
    diff = desc_map - ref
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return d / np.sqrt(ref.shape[-1]) if normalize else d


def activation_map(desc_map: np.ndarray, ref, temperature: float = DEFAULT_TEMPERATURE) -> np.ndarray:
    """Softmax over negative (sqrt(D)-normalized) descriptor distances."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    d = distance_map(desc_map, ref)
    e = np.exp(-(d - d.min()) / temperature)
    return e / e.sum()


def extract_keypoint(act: np.ndarray, desc_map: np.ndarray, ref) -> Keypoint:
    """Global mode of the activation map; ties go to the lowest row-major index."""
    j = int(np.argmax(act))
    v, u = divmod(j, act.shape[1])
    dist = float(distance_map(desc_map[v : v + 1, u : u + 1], ref)[0, 0])
    return Keypoint(PixelCoord(float(u), float(v)), float(act[v, u]), dist)


def normalize_pixels(px, width: int, height: int) -> tuple:
    u, v = px
    if not (0 <= u <= width - 1 and 0 <= v <= height - 1):
        raise OutOfBounds(f"pixel ({u}, {v}) outside {width}x{height}")
    return (2.0 * u / (width - 1) - 1.0, 2.0 * v / (height - 1) - 1.0)


def _depth_at(frame, u: int, v: int):
    depth = frame.depth
    d = float(depth[v, u])
    if d > 0:
        return d, 0
    H, W = depth.shape
    best = None
    for dv in (-1, 0, 1):
        for du in (-1, 0, 1):
            uu, vv = u + du, v + dv
            if (du or dv) and 0 <= uu < W and 0 <= vv < H and depth[vv, uu] > 0:
                key = (du * du + dv * dv, vv, uu)
                if best is None or key < best:
                    best = key
    if best is not None:
        return float(depth[best[1], best[2]]), DEPTH_FROM_NEIGHBOR
    return 0.0, DEPTH_FALLBACK_MEDIAN


def lift_keypoint(kp: Keypoint, frame, mode: str = "camera_frame") -> Keypoint:
    """Attach depth, a 3D lift and normalized coordinates to ``kp``.

    ``camera_frame`` lifts to camera coordinates; ``depth_append`` yields
    (u_norm, v_norm, depth). Invalid depth falls back to the nearest valid
    3x3 neighbor, else to the frame's median valid depth (reported depth 0).
    """
    H, W = frame.depth.shape
    u, v = int(kp.pixel.u), int(kp.pixel.v)
    norm = normalize_pixels((u, v), W, H)
    depth, flag = _depth_at(frame, u, v)
    lift_depth = depth
    if flag & DEPTH_FALLBACK_MEDIAN:
        valid = frame.depth[frame.depth > 0]
        lift_depth = float(np.median(valid)) if len(valid) else 1.0
    if mode == "camera_frame":
        lift = tuple(float(c) for c in unproject((u, v), lift_depth, frame.intr))
    elif mode == "depth_append":
        lift = (norm[0], norm[1], lift_depth)
    else:
        raise ValueError(f"unknown lift mode {mode!r}")
    return Keypoint(kp.pixel, kp.confidence, kp.min_distance, depth, lift, norm, kp.flags | flag)


def extract_keypoints(desc_map: np.ndarray, frame, refs: ReferenceSet, mode: str = "camera_frame",
                      temperature: float = DEFAULT_TEMPERATURE, uncertain_above: float | None = None) -> list:
    """One lifted keypoint per reference. ``uncertain_above`` flags keypoints whose
    best descriptor distance exceeds it."""
    out = []
    for ref in refs.descriptors:
        kp = lift_keypoint(extract_keypoint(activation_map(desc_map, ref, temperature), desc_map, ref), frame, mode)
        if uncertain_above is not None and kp.min_distance > uncertain_above:
            kp = Keypoint(kp.pixel, kp.confidence, kp.min_distance, kp.depth, kp.lift, kp.normalized, kp.flags | UNCERTAIN)
        out.append(kp)
    return out


def keypoint_vector(per_camera: list) -> np.ndarray:
    """Flatten keypoint lists camera-major, reference-minor, three lift components each."""
    return np.array([c for kps in per_camera for kp in kps for c in kp.lift], dtype=np.float64)
