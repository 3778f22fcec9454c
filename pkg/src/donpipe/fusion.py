"""TSDF fusion of posed depth frames, surface cloud extraction, object clustering
and reprojection of the labeled cloud into per-frame object masks."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .geometry import project_points, round_half_up

MIN_CLUSTER_POINTS = 20


class EmptyVolume(ValueError):
    pass


class NoClusters(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TsdfVolume:
    origin: np.ndarray
    voxel_size: float
    dims: tuple
    tsdf: np.ndarray
    weight: np.ndarray
    trunc: float

    @classmethod
    def empty(cls, lo, hi, voxel_size: float = 0.02, trunc_voxels: float = 4.0) -> "TsdfVolume":
        lo = np.asarray(lo, float)
        dims = tuple(int(d) for d in np.maximum(np.ceil((np.asarray(hi, float) - lo) / voxel_size), 1))
        return cls(lo, float(voxel_size), dims, np.ones(dims), np.zeros(dims), trunc_voxels * voxel_size)

    def voxel_centers(self) -> np.ndarray:
        idx = np.indices(self.dims).reshape(3, -1).T
        return self.origin + (idx + 0.5) * self.voxel_size


@dataclass(frozen=True, eq=False)
class LabeledCloud:
    points: np.ndarray  # (N, 3) world
    labels: np.ndarray  # (N,) in 1..K

    @property
    def n_labels(self) -> int:
        return int(self.labels.max()) if len(self.labels) else 0


@dataclass(frozen=True, eq=False)
class ObjectMask:
    frame_id: int
    object_label: int
    bits: np.ndarray


def integrate_frame(vol: TsdfVolume, frame) -> TsdfVolume:
    """Weighted running-average TSDF update with unit weight increment."""
    pts = vol.voxel_centers()
    cam = (pts - frame.pose.translation) @ frame.pose.rotation
    z = cam[:, 2]
    front = z > 1e-9
    uv = project_points(cam[front], frame.intr)
    ij = round_half_up(uv)
    H, W = frame.depth.shape
    inside = (ij[:, 0] >= 0) & (ij[:, 0] < W) & (ij[:, 1] >= 0) & (ij[:, 1] < H)
    idx = np.flatnonzero(front)[inside]
    ij = ij[inside]
    d = frame.depth[ij[:, 1], ij[:, 0]].astype(np.float64)
    sdf = d - z[idx]
    upd = (d > 0) & (sdf >= -vol.trunc)
    idx, sdf = idx[upd], sdf[upd]
    if len(idx) == 0:
        return vol
    tsdf = vol.tsdf.reshape(-1).copy()
    weight = vol.weight.reshape(-1).copy()
    obs = np.clip(sdf / vol.trunc, -1.0, 1.0)
    w = weight[idx]
    tsdf[idx] = (tsdf[idx] * w + obs) / (w + 1.0)
    weight[idx] = w + 1.0
    return replace(vol, tsdf=tsdf.reshape(vol.dims), weight=weight.reshape(vol.dims))


def fuse(frames, lo, hi, voxel_size: float = 0.02) -> TsdfVolume:
    vol = TsdfVolume.empty(lo, hi, voxel_size)
    for f in frames:
        vol = integrate_frame(vol, f)
    return vol


def zero_crossings(vol: TsdfVolume) -> np.ndarray:
    """Interpolated sign changes between axis-adjacent observed voxels.

    Pairs where both values sit on the truncation limit are skipped: they bracket
    unobserved space, not a measured surface.
    """
    out = []
    T, Wt = vol.tsdf, vol.weight
    for axis in range(3):
        a = [slice(None)] * 3
        b = [slice(None)] * 3
        a[axis] = slice(0, -1)
        b[axis] = slice(1, None)
        t0, t1 = T[tuple(a)], T[tuple(b)]
        ok = (Wt[tuple(a)] > 0) & (Wt[tuple(b)] > 0) & (t0 * t1 < 0)
        ok &= ~((np.abs(t0) >= 1.0) & (np.abs(t1) >= 1.0))
        idx = np.argwhere(ok)
        if len(idx) == 0:
            continue
        v0, v1 = t0[ok], t1[ok]
        frac = v0 / (v0 - v1)
        p = vol.origin + (idx + 0.5) * vol.voxel_size
        p[:, axis] += frac * vol.voxel_size
        out.append(p)
    if not out:
        return np.zeros((0, 3))
    return np.concatenate(out)


def extract_cloud(vol: TsdfVolume, workspace_min, workspace_max, ground_plane_z: float) -> np.ndarray:
    pts = zero_crossings(vol)
    if len(pts) == 0:
        raise EmptyVolume("no zero crossing in the volume")
    lo, hi = np.asarray(workspace_min, float), np.asarray(workspace_max, float)
    keep = np.all((pts >= lo) & (pts <= hi), axis=1)
    keep &= np.abs(pts[:, 2] - ground_plane_z) > 2.0 * vol.voxel_size
    return pts[keep]


def cluster_objects(points, radius: float, min_points: int = MIN_CLUSTER_POINTS) -> LabeledCloud:
    """Single-linkage Euclidean clustering (components of the dist <= radius graph).

    Labels are 1..K by descending cluster size, ties by lowest member index;
    clusters smaller than ``min_points`` are dropped.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    pts = np.asarray(points, float).reshape(-1, 3)
    n = len(pts)
    if n == 0:
        raise NoClusters("empty point list")
    pairs = cKDTree(pts).query_pairs(radius, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    sizes = np.bincount(comp)
    first = np.full(len(sizes), n)
    np.minimum.at(first, comp, np.arange(n))
    order = sorted((c for c in range(len(sizes)) if sizes[c] >= min_points), key=lambda c: (-sizes[c], first[c]))
    if not order:
        raise NoClusters(f"no cluster with at least {min_points} points")
    relabel = np.zeros(len(sizes), dtype=np.int64)
    for lab, c in enumerate(order, start=1):
        relabel[c] = lab
    labels = relabel[comp]
    keep = labels > 0
    return LabeledCloud(pts[keep], labels[keep])


def _close(bits: np.ndarray) -> np.ndarray:
    st = np.ones((3, 3), bool)
    dil = ndimage.binary_dilation(bits, structure=st)
    return ndimage.binary_erosion(dil, structure=st, border_value=1)


def reproject_masks(cloud: LabeledCloud, frame, occ_tol: float) -> list:
    """One closed mask per label; points failing the depth z-test are ignored."""
    if len(cloud.points) == 0:
        raise ValueError("cloud is empty")
    H, W = frame.depth.shape
    cam = (cloud.points - frame.pose.translation) @ frame.pose.rotation
    z = cam[:, 2]
    front = z > 1e-9
    uv = project_points(cam, frame.intr)
    ij = round_half_up(np.where(front[:, None], uv, -1.0))
    ok = front & (ij[:, 0] >= 0) & (ij[:, 0] < W) & (ij[:, 1] >= 0) & (ij[:, 1] < H)
    d = np.zeros(len(z))
    d[ok] = frame.depth[ij[ok, 1], ij[ok, 0]]
    ok &= (d > 0) & (np.abs(z - d) <= occ_tol)
    valid = frame.depth > 0
    masks = []
    for lab in range(1, cloud.n_labels + 1):
        sel = ok & (cloud.labels == lab)
        bits = np.zeros((H, W), bool)
        bits[ij[sel, 1], ij[sel, 0]] = True
        if bits.any():
            bits = _close(bits) & valid
        masks.append(ObjectMask(frame.frame_id, lab, bits))
    return masks


def label_trajectory(traj, cloud: LabeledCloud, occ_tol: float):
    """Attach per-frame label masks to ``traj`` (in place) and return it."""
    traj.masks = [{m.object_label: m.bits for m in reproject_masks(cloud, f, occ_tol)} for f in traj.frames]
    return traj
