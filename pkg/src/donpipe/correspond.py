"""Ground-truth pixel correspondences and contrastive training-pair sampling."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .geometry import PixelCoord, project_points, round_half_up, unproject_points

NONMATCH_EXCLUSION_PX = 2.0
MAX_FAILED_DRAWS_PER_MATCH = 50
MAX_PAIR_ATTEMPTS = 20


class InvalidSource(ValueError):
    pass


class ExhaustedSampling(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplingConfig:
    m: int = 64
    n: int = 8
    occlusion_tol: float = 0.01
    rng_seed: int = 0

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ValueError("m and n must be >= 1")
        if not self.occlusion_tol > 0:
            raise ValueError("occlusion_tol must be positive")


@dataclass(frozen=True, eq=False)
class TrainingSample:
    frame_a: int  # trajectory indices
    frame_b: int
    target_label: int
    ua: np.ndarray  # (m, 2) integer-valued
    ub: np.ndarray  # (m, 2) real-valued
    nonmatches: np.ndarray  # (m, n, 2) integer-valued, in frame b

    @property
    def m(self) -> int:
        return len(self.ua)

    @property
    def n(self) -> int:
        return self.nonmatches.shape[1]


def correspondences(ua: np.ndarray, frame_a, frame_b, tol: float):
    """Vectorized correspondence search for integer pixels ``ua`` (N, 2) of frame a.

    Returns (ub (N, 2), ok (N,)); ub is meaningful only where ok. Pixels with
    invalid depth in frame a are simply not ok.
    """
    ua = np.asarray(ua, dtype=np.float64).reshape(-1, 2)
    ia = round_half_up(ua)
    da = frame_a.depth[ia[:, 1], ia[:, 0]].astype(np.float64)
    src = da > 0
    cam_a = unproject_points(ua, np.where(src, da, 1.0), frame_a.intr)
    world = cam_a @ frame_a.pose.rotation.T + frame_a.pose.translation
    cam_b = (world - frame_b.pose.translation) @ frame_b.pose.rotation
    zb = cam_b[:, 2]
    front = src & (zb > 1e-9)
    ub = project_points(np.where(front[:, None], cam_b, [0.0, 0.0, 1.0]), frame_b.intr)
    ib = round_half_up(ub)
    H, W = frame_b.depth.shape
    ok = front & (ib[:, 0] >= 0) & (ib[:, 0] < W) & (ib[:, 1] >= 0) & (ib[:, 1] < H)
    db = np.zeros(len(ua))
    db[ok] = frame_b.depth[ib[ok, 1], ib[ok, 0]]
    ok &= (db > 0) & (np.abs(db - zb) <= tol)
    return ub, ok


def find_correspondence(ua, frame_a, frame_b, tol: float) -> PixelCoord | None:
    """Pixel in frame b showing the surface point seen at ``ua`` in frame a, or None
    when it falls outside frame b or is occluded there."""
    u, v = ua
    i, j = int(round_half_up(u)), int(round_half_up(v))
    H, W = frame_a.depth.shape
    if not (0 <= i < W and 0 <= j < H) or frame_a.depth[j, i] <= 0:
        raise InvalidSource(f"pixel ({u}, {v}) has no valid depth in frame {frame_a.frame_id}")
    ub, ok = correspondences(np.array([[u, v]], float), frame_a, frame_b, tol)
    if not ok[0]:
        return None
    return PixelCoord(float(ub[0, 0]), float(ub[0, 1]))


def sample_nonmatches(rng, ub: np.ndarray, n: int, shape) -> np.ndarray:
    """n pixels per correspondence drawn uniformly over the whole frame-b raster
    (target mask, other objects and background alike), at least 2 px from it."""
    H, W = shape
    m = len(ub)
    out = np.zeros((m, n, 2))
    for i in range(m):
        got = 0
        while got < n:
            k = (n - got) * 2 + 4
            cand = np.stack([rng.integers(0, W, k), rng.integers(0, H, k)], axis=1).astype(float)
            far = np.linalg.norm(cand - ub[i], axis=1) >= NONMATCH_EXCLUSION_PX
            cand = cand[far][: n - got]
            out[i, got : got + len(cand)] = cand
            got += len(cand)
    return out


class PairSampler:
    """Seeded generator of training samples from one masked trajectory.

    Frame pairs are visited uniformly without replacement within an epoch over
    all ordered pairs; within a pair, one label with a nonempty mask is chosen
    uniformly and match pixels are rejection-sampled from it.
    """

    def __init__(self, traj, cfg: SamplingConfig, rng=None):
        if len(traj) < 2:
            raise ValueError("trajectory needs at least 2 frames")
        if not traj.masks or not any(m.any() for fm in traj.masks for m in fm.values()):
            raise ValueError("trajectory has no nonempty mask")
        self.traj = traj
        self.cfg = cfg
        self.rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
        n = len(traj)
        self._pairs = [(a, b) for a in range(n) for b in range(n) if a != b]
        self._queue = []

    def _next_pair(self):
        if not self._queue:
            self._queue = [self._pairs[i] for i in self.rng.permutation(len(self._pairs))]
        return self._queue.pop()

    def _try_pair(self, a: int, b: int):
        cfg, traj = self.cfg, self.traj
        fa, fb = traj.frames[a], traj.frames[b]
        masks_a, masks_b = traj.masks[a], traj.masks[b]
        labels = [lab for lab in sorted(masks_a) if masks_a[lab].any()]
        if not labels:
            return None
        label = labels[self.rng.integers(len(labels))]
        own = masks_a[label].copy()
        for other, bits in masks_a.items():
            if other != label:
                own &= ~bits
        cand = np.argwhere(own)[:, ::-1].astype(float)  # (u, v)
        if len(cand) == 0:
            return None
        foreign_b = np.zeros(fb.depth.shape, bool)
        for other, bits in masks_b.items():
            if other != label:
                foreign_b |= bits
        ua, ub = [], []
        failures = 0
        budget = MAX_FAILED_DRAWS_PER_MATCH * cfg.m
        while len(ua) < cfg.m and failures < budget:
            draws = cand[self.rng.integers(0, len(cand), 2 * cfg.m)]
            pb, ok = correspondences(draws, fa, fb, cfg.occlusion_tol)
            ib = round_half_up(pb)
            ok[ok] &= ~foreign_b[ib[ok, 1], ib[ok, 0]]
            for k in range(len(draws)):
                if ok[k]:
                    ua.append(draws[k])
                    ub.append(pb[k])
                    if len(ua) == cfg.m:
                        break
                else:
                    failures += 1
                    if failures >= budget:
                        break
        if len(ua) < cfg.m:
            return None
        ua, ub = np.array(ua), np.array(ub)
        nm = sample_nonmatches(self.rng, ub, cfg.n, fb.depth.shape)
        return TrainingSample(a, b, label, ua, ub, nm)

    def sample(self) -> TrainingSample:
        for _ in range(MAX_PAIR_ATTEMPTS):
            a, b = self._next_pair()
            s = self._try_pair(a, b)
            if s is not None:
                return s
        raise ExhaustedSampling(f"no frame pair yielded {self.cfg.m} matches after {MAX_PAIR_ATTEMPTS} attempts")


def sample_training_pair(traj, cfg: SamplingConfig) -> TrainingSample:
    return PairSampler(traj, cfg).sample()


CSV_HEADER = ["frame_a", "frame_b", "label", "ua_u", "ua_v", "ub_u", "ub_v", "kind"]


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_samples_csv(path, samples, traj=None) -> None:
    """Match sets as CSV; frame columns hold frame ids when ``traj`` is given."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for s in samples:
            fa = traj.frames[s.frame_a].frame_id if traj is not None else s.frame_a
            fb = traj.frames[s.frame_b].frame_id if traj is not None else s.frame_b
            for i in range(s.m):
                w.writerow([fa, fb, s.target_label, _fmt(s.ua[i, 0]), _fmt(s.ua[i, 1]),
                            _fmt(s.ub[i, 0]), _fmt(s.ub[i, 1]), "match"])
                for j in range(s.n):
                    w.writerow([fa, fb, s.target_label, _fmt(s.ua[i, 0]), _fmt(s.ua[i, 1]),
                                _fmt(s.nonmatches[i, j, 0]), _fmt(s.nonmatches[i, j, 1]), f"nonmatch:{j}"])


def read_samples_csv(path, m: int | None = None) -> list:
    """Inverse of :func:`write_samples_csv` (frame columns are returned as written).

    Consecutive samples sharing frames and label are only told apart when the
    match count ``m`` is given.
    """
    groups = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        cur = None
        for row in r:
            fa, fb, lab = int(row[0]), int(row[1]), int(row[2])
            ua = (float(row[3]), float(row[4]))
            pt = (float(row[5]), float(row[6]))
            if row[7] == "match":
                if cur is None or (fa, fb, lab) != cur["key"] or (m is not None and len(cur["ua"]) == m):
                    cur = {"key": (fa, fb, lab), "ua": [], "ub": [], "nm": []}
                    groups.append(cur)
                cur["ua"].append(ua)
                cur["ub"].append(pt)
                cur["nm"].append([])
            elif row[7].startswith("nonmatch:"):
                cur["nm"][-1].append(pt)
            else:
                raise ValueError(f"{path}: unknown kind {row[7]!r}")
    return [
        TrainingSample(g["key"][0], g["key"][1], g["key"][2], np.array(g["ua"]), np.array(g["ub"]), np.array(g["nm"]))
        for g in groups
    ]
