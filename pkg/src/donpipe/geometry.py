"""Pinhole camera model and rigid transforms.

Conventions: camera looks along +z, x to the right, y down the image. Integer
pixel (i, j) sits exactly at continuous coordinate (u=i, v=j). Poses are
``world_from_camera``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

ORTHO_TOL = 1e-9


class NonPositiveDepth(ValueError):
    pass


class PixelCoord(NamedTuple):
    u: float
    v: float


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x: float) -> "CameraIntrinsics":
        """Square pixels, principal point at the image center."""
        f = (width / 2.0) / np.tan(fov_x / 2.0)
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


def default_intrinsics(width: int = 64, height: int = 64) -> CameraIntrinsics:
    return CameraIntrinsics(70.0, 70.0, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        check_rotation(R)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        if T.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got {T.shape}")
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self * other``: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    @property
    def center(self) -> np.ndarray:
        return self.translation

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))


def check_rotation(R: np.ndarray, tol: float = ORTHO_TOL) -> None:
    err = np.abs(R.T @ R - np.eye(3)).max()
    if not np.all(np.isfinite(R)) or err >= tol:
        raise ValueError(f"rotation is not orthonormal (max |R^T R - I| = {err:.3g})")
    if np.linalg.det(R) <= 0:
        raise ValueError("rotation has negative determinant")


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera at ``eye`` looking at ``target``; image-up roughly along ``up``."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z = z / np.linalg.norm(z)
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, np.array([0.0, 1.0, 0.0]))
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=1)
    # re-orthonormalize to keep the 1e-9 invariant tight
    u, _, vt = np.linalg.svd(R)
    return Pose(u @ vt, eye)


def transform(pose: Pose, point) -> np.ndarray:
    """R @ p + t; accepts (3,) or (N, 3)."""
    p = np.asarray(point, dtype=np.float64)
    return p @ pose.rotation.T + pose.translation


def project(point_cam, intr: CameraIntrinsics) -> PixelCoord:
    x, y, z = (float(c) for c in np.asarray(point_cam, dtype=np.float64).reshape(3))
    if not z > 0:
        raise NonPositiveDepth(f"point has camera z = {z}")
    return PixelCoord(intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy)


def unproject(px, depth: float, intr: CameraIntrinsics) -> np.ndarray:
    if not depth > 0:
        raise NonPositiveDepth(f"depth must be positive, got {depth}")
    u, v = px
    return np.array([(u - intr.cx) * depth / intr.fx, (v - intr.cy) * depth / intr.fy, float(depth)])


def project_points(points_cam: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Vectorized projection of (N, 3) camera points. Callers must mask z <= 0."""
    P = np.asarray(points_cam, dtype=np.float64)
    z = P[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * P[:, 0] / z + intr.cx
        v = intr.fy * P[:, 1] / z + intr.cy
    return np.stack([u, v], axis=1)


def unproject_points(uv: np.ndarray, depth: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    uv = np.asarray(uv, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    x = (uv[:, 0] - intr.cx) * d / intr.fx
    y = (uv[:, 1] - intr.cy) * d / intr.fy
    return np.stack([x, y, d], axis=1)


def round_half_up(x) -> np.ndarray:
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


def in_bounds(uv: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Whether continuous coordinates round onto the raster."""
    ij = round_half_up(uv)
    return (ij[..., 0] >= 0) & (ij[..., 0] < intr.width) & (ij[..., 1] >= 0) & (ij[..., 1] < intr.height)
