"""Evaluation of trained descriptors: PCK with scale bins, multi-object
discrimination and descriptor-distance occlusion sensitivity."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .correspond import correspondences
from .descriptor import EncoderParams, encode
from .geometry import project_points
from .keypoints import activation_map, distance_map, extract_keypoint

DEFAULT_BINS = (1.0, 1.25, 1.6, 2.0)


class InsufficientOcclusion(ValueError):
    pass


def as_encoder(enc):
    """Accept EncoderParams or a ``frame -> (H, W, D)`` callable."""
    if isinstance(enc, EncoderParams):
        return lambda frame: encode(enc, frame)
    return enc


def chance_rate(threshold_px: float, width: int, height: int) -> float:
    """Probability that a uniformly random pixel lies within the threshold disc
    of an interior target pixel."""
    r = int(np.floor(threshold_px))
    du, dv = np.mgrid[-r : r + 1, -r : r + 1]
    return float((du * du + dv * dv <= threshold_px**2).sum()) / (width * height)


def distance_ratio(traj, a: int, b: int) -> float:
    da, db = traj.camera_distance(a), traj.camera_distance(b)
    return max(da, db) / min(da, db)


def bin_index(ratio: float, edges=DEFAULT_BINS) -> int:
    """Bins [e0, e1), [e1, e2), ..., [e_{k-1}, e_k]; ratios past the last edge join the last bin."""
    for i in range(len(edges) - 2):
        if ratio < edges[i + 1]:
            return i
    return len(edges) - 2


@dataclass(frozen=True)
class HeldoutPair:
    frame_a: int
    frame_b: int
    ua: tuple
    ub: tuple


def heldout_pairs(traj, n_per_bin: int = 200, points_per_pair: int = 10, tol: float = 0.01, seed: int = 0,
                  edges=DEFAULT_BINS, max_pairs: int = 5000) -> list:
    """Evaluation pairs with known ground truth, stratified over distance-ratio bins.

    Source pixels are drawn from the union of frame a's object masks.
    """
    rng = np.random.default_rng(seed)
    n = len(traj)
    by_bin = [[] for _ in range(len(edges) - 1)]
    frame_pairs = [(a, b) for a in range(n) for b in range(n) if a != b]
    for p in rng.permutation(len(frame_pairs))[:max_pairs]:
        a, b = frame_pairs[p]
        k = bin_index(distance_ratio(traj, a, b), edges)
        if len(by_bin[k]) >= n_per_bin:
            continue
        obj = np.zeros(traj.frames[a].depth.shape, bool)
        for bits in traj.masks[a].values():
            obj |= bits
        cand = np.argwhere(obj)[:, ::-1].astype(float)
        if len(cand) == 0:
            continue
        ua = cand[rng.choice(len(cand), size=min(points_per_pair, len(cand)), replace=False)]
        ub, ok = correspondences(ua, traj.frames[a], traj.frames[b], tol)
        for i in np.flatnonzero(ok):
            if len(by_bin[k]) < n_per_bin:
                by_bin[k].append(HeldoutPair(a, b, (float(ua[i, 0]), float(ua[i, 1])), (float(ub[i, 0]), float(ub[i, 1]))))
        if all(len(x) >= n_per_bin for x in by_bin):
            break
    return [p for x in by_bin for p in x]


@dataclass
class PckReport:
    threshold_px: float
    fraction_correct: float
    n_evaluated: int
    n_correct: int
    bins: list = field(default_factory=list)  # (lo, hi, n, n_correct, fraction)
    errors: np.ndarray | None = None

    def bin_fraction(self, lo: float) -> float:
        for b in self.bins:
            if b[0] == lo:
                return b[4]
        raise KeyError(lo)

    def to_text(self) -> str:
        lines = [f"PCK@{self.threshold_px:g}px: {self.fraction_correct:.4f} ({self.n_correct}/{self.n_evaluated})",
                 "ratio_bin        n   correct  fraction"]
        for lo, hi, n, c, f in self.bins:
            lines.append(f"[{lo:.2f},{hi:.2f}]  {n:6d}  {c:8d}  {f:8.4f}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "n", "correct", "fraction"])
        for lo, hi, n, c, f in self.bins:
            w.writerow([lo, hi, n, c, format(f, ".6f")])
        w.writerow(["all", "all", self.n_evaluated, self.n_correct, format(self.fraction_correct, ".6f")])
        return buf.getvalue()


def prediction_errors(enc, traj, pairs) -> np.ndarray:
    """Pixel distance from each predicted correspondence to the truth."""
    enc = as_encoder(enc)
    maps = {}

    def get(i):
        if i not in maps:
            maps[i] = enc(traj.frames[i])
        return maps[i]

    errs = np.empty(len(pairs))
    for k, p in enumerate(pairs):
        ma, mb = get(p.frame_a), get(p.frame_b)
        ref = ma[int(p.ua[1]), int(p.ua[0])]
        kp = extract_keypoint(activation_map(mb, ref), mb, ref)
        errs[k] = np.hypot(kp.pixel.u - p.ub[0], kp.pixel.v - p.ub[1])
    return errs


def eval_pck(enc, traj, pairs, threshold_px: float = 3.0, edges=DEFAULT_BINS, errors=None) -> PckReport:
    """Fraction of held-out correspondences recovered within ``threshold_px``."""
    errs = prediction_errors(enc, traj, pairs) if errors is None else np.asarray(errors)
    ok = errs <= threshold_px
    bins = []
    idx = np.array([bin_index(distance_ratio(traj, p.frame_a, p.frame_b), edges) for p in pairs], dtype=int)
    for i in range(len(edges) - 1):
        sel = idx == i
        n, c = int(sel.sum()), int(ok[sel].sum())
        bins.append((edges[i], edges[i + 1], n, c, c / n if n else float("nan")))
    n, c = len(pairs), int(ok.sum())
    return PckReport(threshold_px, c / n if n else float("nan"), n, c, bins, errs)


def label_to_object(traj) -> dict:
    """Majority-vote map from mask label to oracle object id."""
    votes = {}
    for masks, ids in zip(traj.masks, traj.ids):
        for label, bits in masks.items():
            if bits.any():
                votes.setdefault(label, np.zeros(256, np.int64))
                votes[label] += np.bincount(ids[bits], minlength=256)
    out = {}
    for label, v in votes.items():
        v = v.copy()
        v[0] = 0
        out[label] = int(np.argmax(v))
    return out


@dataclass
class DiscriminationReport:
    fraction: float
    n_evaluated: int
    n_correct: int


def eval_discrimination(enc, traj, refs, label_map: dict | None = None) -> DiscriminationReport:
    """Fraction of (frame, reference) pairs whose keypoint lands on the reference's
    object, counting only frames where that object's mask is nonempty."""
    enc = as_encoder(enc)
    label_map = label_map or label_to_object(traj)
    n = c = 0
    for i, frame in enumerate(traj.frames):
        dmap = None
        for ref, label in zip(refs.descriptors, refs.labels):
            bits = traj.masks[i].get(int(label))
            if bits is None or not bits.any():
                continue
            if dmap is None:
                dmap = enc(frame)
            kp = extract_keypoint(activation_map(dmap, ref), dmap, ref)
            n += 1
            c += int(traj.ids[i][int(kp.pixel.v), int(kp.pixel.u)] == label_map[int(label)])
    return DiscriminationReport(c / n if n else float("nan"), n, c)


@dataclass
class OcclusionReport:
    visible_mean: float
    occluded_mean: float
    visible_se: float
    occluded_se: float
    n_visible: int
    n_occluded: int

    @property
    def gap(self) -> float:
        return self.occluded_mean - self.visible_mean


def _in_view(frame, center) -> bool:
    cam = (np.asarray(center, float) - frame.pose.translation) @ frame.pose.rotation
    if cam[2] <= 0:
        return False
    uv = project_points(cam[None], frame.intr)[0]
    H, W = frame.depth.shape
    return 0 <= uv[0] <= W - 1 and 0 <= uv[1] <= H - 1


def eval_occlusion(enc, traj, refs, object_centers, label_map: dict | None = None) -> OcclusionReport:
    """Best-match descriptor distance for references whose object is visible vs.
    in view but fully occluded (by the oracle id raster)."""
    enc = as_encoder(enc)
    label_map = label_map or label_to_object(traj)
    vis, occ = [], []
    for i, frame in enumerate(traj.frames):
        dmap = None
        for ref, label in zip(refs.descriptors, refs.labels):
            k = label_map[int(label)]
            visible = bool((traj.ids[i] == k).any())
            if not visible and not _in_view(frame, object_centers[k - 1]):
                continue
            if dmap is None:
                dmap = enc(frame)
            (vis if visible else occ).append(float(distance_map(dmap, ref).min()))
    if not occ:
        raise InsufficientOcclusion("no frame with a fully occluded reference object")
    if not vis:
        raise InsufficientOcclusion("no frame with a visible reference object")
    vis, occ = np.array(vis), np.array(occ)

    def se(x):
        return float(x.std(ddof=1) / np.sqrt(len(x))) if len(x) > 1 else 0.0

    return OcclusionReport(float(vis.mean()), float(occ.mean()), se(vis), se(occ), len(vis), len(occ))


def oracle_encoder(traj, id_scale: float = 10.0):
    """Descriptors built from oracle ids and world coordinates of each pixel's surface point."""
    by_frame = {id(f): i for i, f in enumerate(traj.frames)}

    def enc(frame):
        i = by_frame[id(frame)]
        H, W = frame.depth.shape
        v, u = np.mgrid[0:H, 0:W]
        d = frame.depth.astype(np.float64)
        x = (u - frame.intr.cx) * d / frame.intr.fx
        y = (v - frame.intr.cy) * d / frame.intr.fy
        cam = np.stack([x, y, d], axis=-1).reshape(-1, 3)
        world = cam @ frame.pose.rotation.T + frame.pose.translation
        out = np.concatenate([world, id_scale * traj.ids[i].reshape(-1, 1).astype(float)], axis=1)
        out[d.reshape(-1) <= 0] = 1e3
        return out.reshape(H, W, 4)

    return enc
