"""Patch-MLP dense encoder, pixelwise contrastive loss and its training loop."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .correspond import PairSampler, SamplingConfig, TrainingSample
from .geometry import round_half_up
from .optim import Adam, step_decay


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class EncoderParams:
    patch_radius: int
    w1: np.ndarray  # (F_in, hidden)
    b1: np.ndarray
    w2: np.ndarray  # (hidden, D)
    b2: np.ndarray
    use_coords: bool = False

    @property
    def D(self) -> int:
        return self.w2.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def n_features(self) -> int:
        return feature_count(self.patch_radius)

    def arrays(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def with_arrays(self, arrs: dict) -> "EncoderParams":
        return EncoderParams(self.patch_radius, arrs["w1"], arrs["b1"], arrs["w2"], arrs["b2"], self.use_coords)

    def __post_init__(self):
        if self.w1.shape[0] != feature_count(self.patch_radius):
            raise DimensionMismatch(f"w1 has {self.w1.shape[0]} rows, expected {feature_count(self.patch_radius)}")
        if self.w1.shape[1] != self.b1.shape[0] or self.w2.shape[0] != self.w1.shape[1] or self.b2.shape[0] != self.w2.shape[1]:
            raise DimensionMismatch("inconsistent layer shapes")


def feature_count(patch_radius: int) -> int:
    return 3 * (2 * patch_radius + 1) ** 2 + 2


def init_params(seed: int = 0, patch_radius: int = 2, D: int = 3, hidden: int = 64,
                use_coords: bool = False) -> EncoderParams:
    rng = np.random.default_rng([seed, 0xE9C0])
    F = feature_count(patch_radius)
    w1 = rng.standard_normal((F, hidden)) * np.sqrt(2.0 / F)
    w2 = rng.standard_normal((hidden, D)) * np.sqrt(1.0 / hidden)
    return EncoderParams(patch_radius, w1, np.zeros(hidden), w2, np.zeros(D), use_coords)


def _padded(rgb: np.ndarray, r: int) -> np.ndarray:
    return np.pad(rgb - 0.5, ((r, r), (r, r), (0, 0)), mode="edge")


def pixel_features(params: EncoderParams, rgb: np.ndarray, ij: np.ndarray) -> np.ndarray:
    """Features for integer pixels ij (N, 2) as (u, v): clamped color patch, then (u, v) in [-1, 1]."""
    r = params.patch_radius
    H, W, _ = rgb.shape
    pad = _padded(rgb, r)
    k = 2 * r + 1
    dv, du = np.mgrid[0:k, 0:k]
    rows = ij[:, 1, None] + dv.reshape(1, -1)
    cols = ij[:, 0, None] + du.reshape(1, -1)
    patch = pad[rows, cols].reshape(len(ij), -1)
    coords = np.zeros((len(ij), 2))
    if params.use_coords:
        coords[:, 0] = 2.0 * ij[:, 0] / (W - 1) - 1.0
        coords[:, 1] = 2.0 * ij[:, 1] / (H - 1) - 1.0
    return np.concatenate([patch, coords], axis=1)


def image_features(params: EncoderParams, rgb: np.ndarray) -> np.ndarray:
    r = params.patch_radius
    H, W, _ = rgb.shape
    win = sliding_window_view(_padded(rgb, r), (2 * r + 1, 2 * r + 1), axis=(0, 1))  # H, W, 3, k, k
    patch = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(H * W, -1)
    coords = np.zeros((H * W, 2))
    if params.use_coords:
        v, u = np.mgrid[0:H, 0:W]
        coords[:, 0] = (2.0 * u / (W - 1) - 1.0).ravel()
        coords[:, 1] = (2.0 * v / (H - 1) - 1.0).ravel()
    return np.concatenate([patch, coords], axis=1)


def mlp_forward(params: EncoderParams, X: np.ndarray):
    pre = X @ params.w1 + params.b1
    h = np.maximum(pre, 0.0)
    return h @ params.w2 + params.b2, (X, pre, h)


def mlp_backward(params: EncoderParams, cache, dY: np.ndarray) -> dict:
    X, pre, h = cache
    dh = dY @ params.w2.T
    dpre = dh * (pre > 0)
    return {"w1": X.T @ dpre, "b1": dpre.sum(0), "w2": h.T @ dY, "b2": dY.sum(0)}


def encode(params: EncoderParams, frame) -> np.ndarray:
    """Dense descriptor map (H, W, D)."""
    rgb = frame.rgb if hasattr(frame, "rgb") else frame
    H, W, _ = rgb.shape
    Y, _ = mlp_forward(params, image_features(params, rgb))
    return Y.reshape(H, W, params.D)


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.5
    normalize_by_sqrt_d: bool = True

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError("margin must be positive")


def _loss_terms(da, db, dn, cfg: LossConfig):
    """Loss on gathered descriptors da, db (m, D) and dn (m, n, D)."""
    m, D = da.shape
    n = dn.shape[1]
    s = 1.0 / D if cfg.normalize_by_sqrt_d else 1.0
    diff = da - db
    match_d2 = s * np.einsum("ij,ij->i", diff, diff)
    ndiff = da[:, None, :] - dn
    nm_d2 = s * np.einsum("ijk,ijk->ij", ndiff, ndiff)
    hinge = np.maximum(0.0, cfg.margin - nm_d2)
    loss = match_d2.sum() / m + hinge.sum() / n
    return loss, (diff, ndiff, hinge > 0, s, m, n)


def _check_dims(a, b):
    if a.shape[-1] != b.shape[-1]:
        raise DimensionMismatch(f"descriptor dims differ: {a.shape[-1]} vs {b.shape[-1]}")


def _gather(desc_map: np.ndarray, pts: np.ndarray) -> np.ndarray:
    ij = round_half_up(pts)
    return desc_map[ij[..., 1], ij[..., 0]]


def contrastive_loss(map_a: np.ndarray, map_b: np.ndarray, sample: TrainingSample, cfg: LossConfig,
                     map_nm: np.ndarray | None = None) -> float:
    """(1/m) sum of match distances + (1/n) sum of hinged non-match distances.

    Squared distances are divided by D when ``cfg.normalize_by_sqrt_d``.
    ``map_nm`` overrides the map non-matches are read from (defaults to map_b).
    """
    map_nm = map_b if map_nm is None else map_nm
    _check_dims(map_a, map_b)
    _check_dims(map_a, map_nm)
    da = _gather(map_a, sample.ua)
    db = _gather(map_b, sample.ub)
    dn = _gather(map_nm, sample.nonmatches)
    return float(_loss_terms(da, db, dn, cfg)[0])


def loss_gradient(params: EncoderParams, frame_a, frame_b, sample: TrainingSample, cfg: LossConfig,
                  frame_nm=None):
    """Loss and its exact gradient w.r.t. every encoder array (dict keyed like ``arrays()``)."""
    frame_nm = frame_b if frame_nm is None else frame_nm
    m, n = sample.m, sample.n
    ia = round_half_up(sample.ua)
    ib = round_half_up(sample.ub)
    inm = round_half_up(sample.nonmatches.reshape(-1, 2))
    X = np.concatenate([
        pixel_features(params, frame_a.rgb, ia),
        pixel_features(params, frame_b.rgb, ib),
        pixel_features(params, frame_nm.rgb, inm),
    ])
    Y, cache = mlp_forward(params, X)
    da, db, dn = Y[:m], Y[m:2 * m], Y[2 * m:].reshape(m, n, -1)
    loss, (diff, ndiff, active, s, _, _) = _loss_terms(da, db, dn, cfg)
    g_match = (2.0 * s / m) * diff
    g_nm = -(2.0 * s / n) * ndiff * active[:, :, None]  # d/d(da) of the hinge terms
    dY = np.concatenate([g_match + g_nm.sum(1), -g_match, -g_nm.reshape(m * n, -1)])
    return float(loss), mlp_backward(params, cache, dY)


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    decay_factor: float = 0.9
    decay_every: int = 25
    weight_decay: float = 1e-4
    steps: int = 500
    seed: int = 0

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must be in (0, 1]")
        if self.steps < 1 or self.decay_every < 1:
            raise ValueError("steps and decay_every must be >= 1")

    def lr(self, step: int) -> float:
        return step_decay(self.lr0, self.decay_factor, self.decay_every, step)


@dataclass
class TrainResult:
    params: EncoderParams
    losses: list = field(default_factory=list)
    val_steps: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)


def _has_masks(traj) -> bool:
    return bool(traj.masks) and any(b.any() for fm in traj.masks for b in fm.values())


def validation_loss(params: EncoderParams, traj, samples, cfg: LossConfig) -> float:
    cache = {}
    total = 0.0
    for s in samples:
        for k in (s.frame_a, s.frame_b):
            if k not in cache:
                cache[k] = encode(params, traj.frames[k])
        total += contrastive_loss(cache[s.frame_a], cache[s.frame_b], s, cfg)
    return total / len(samples)


def train(trajs, scfg: SamplingConfig, lcfg: LossConfig, tcfg: TrainConfig, init: EncoderParams | None = None,
          val: tuple | None = None, val_every: int = 10, progress=None) -> TrainResult:
    """Adam on the contrastive loss plus an L2 penalty, one sample pair per step.

    Steps cycle through ``trajs``. A trajectory without any nonempty mask
    (distractor-only) contributes its frames as non-match background for a
    sample drawn from the next masked trajectory. ``val`` is an optional
    (trajectory, samples) pair evaluated every ``val_every`` steps.
    """
    trajs = list(trajs)
    masked = [i for i, t in enumerate(trajs) if _has_masks(t)]
    if not masked:
        raise ValueError("need at least one trajectory with a nonempty mask")
    rng = np.random.default_rng([tcfg.seed, scfg.rng_seed])
    samplers = {i: PairSampler(trajs[i], scfg, rng) for i in masked}
    params = init if init is not None else init_params(tcfg.seed)
    opt = Adam(params.arrays())
    result = TrainResult(params)
    for step in range(tcfg.steps):
        k = step % len(trajs)
        if k in samplers:
            t = trajs[k]
            s = samplers[k].sample()
            fa, fb, fnm = t.frames[s.frame_a], t.frames[s.frame_b], None
        else:
            src = next((i for i in masked if i > k), masked[0])
            t = trajs[src]
            s = samplers[src].sample()
            fa, fb = t.frames[s.frame_a], t.frames[s.frame_b]
            distractor = trajs[k]
            fnm = distractor.frames[rng.integers(len(distractor))]
            H, W = fnm.depth.shape
            nm = np.stack([rng.integers(0, W, (s.m, s.n)), rng.integers(0, H, (s.m, s.n))], axis=-1).astype(float)
            s = TrainingSample(s.frame_a, s.frame_b, s.target_label, s.ua, s.ub, nm)
        loss, grads = loss_gradient(params, fa, fb, s, lcfg, fnm)
        arrs = params.arrays()
        for name in grads:
            grads[name] = grads[name] + 2.0 * tcfg.weight_decay * arrs[name]
        params = params.with_arrays(opt.step(arrs, grads, tcfg.lr(step)))
        result.losses.append(loss)
        if val is not None and (step + 1) % val_every == 0:
            result.val_steps.append(step + 1)
            result.val_losses.append(validation_loss(params, val[0], val[1], lcfg))
        if progress is not None:
            progress(step, loss)
    result.params = params
    return result
