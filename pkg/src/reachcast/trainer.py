"""Training and evaluation: normalization, the optimization loop, ADE/FDE
metrics in all coordinate modes, and the constant-velocity baseline.

Batches pad every sample to the configured horizon; padded steps carry
zero loss. The observation count C is drawn per sample, either from a
fixed ratio or uniformly from a ratio range (the any-time protocol).
Metrics reduce per-sample values in sorted-id order, so evaluation is
invariant to input order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import model as M
from .geometry import normalize_pixel, project

OBSERVATION_MODES = ("fixed", "random")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    warmup_epochs: int = 10
    epochs: int = 200
    batch_size: int = 128
    observation_mode: str = "fixed"
    observation_ratio: float = 0.6
    ratio_low: float = 0.1
    ratio_high: float = 0.9
    seed: int = 0
    clip_norm: float = 10.0

    def __post_init__(self):
        if self.observation_mode not in OBSERVATION_MODES:
            raise ValueError(f"observation_mode must be one of {OBSERVATION_MODES}")
        if not 0 < self.observation_ratio < 1:
            raise ValueError("observation_ratio must be in (0, 1)")
        if not self.ratio_low < self.ratio_high:
            raise ValueError("ratio_low must be < ratio_high")


@dataclass
class MetricsRow:
    split: str
    ratio: float
    ade3d: float | None = None
    fde3d: float | None = None
    ade2d_from3d: float | None = None
    fde2d_from3d: float | None = None
    ade2d: float | None = None
    fde2d: float | None = None
    model: str = "model"

    CSV_HEADER = "model,split,ratio,ade3d,fde3d,ade2d_from3d,fde2d_from3d,ade2d,fde2d"

    def as_csv(self):
        cells = [self.model, self.split, f"{self.ratio:g}"]
        for v in (self.ade3d, self.fde3d, self.ade2d_from3d, self.fde2d_from3d,
                  self.ade2d, self.fde2d):
            cells.append("" if v is None else f"{v:.9g}")
        return ",".join(cells)


def normalize(points, lo, hi):
    """Affine map [lo, hi] -> [-1, 1] per axis."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if np.any(hi <= lo):
        raise ValueError(f"degenerate normalization range: {lo} vs {hi}")
    return 2.0 * (np.asarray(points, dtype=np.float64) - lo) / (hi - lo) - 1.0


def denormalize(points, lo, hi):
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if np.any(hi <= lo):
        raise ValueError(f"degenerate normalization range: {lo} vs {hi}")
    return (np.asarray(points, dtype=np.float64) + 1.0) * (hi - lo) / 2.0 + lo


def observation_count(horizon, cfg, rng=None):
    """C for one sample: clamp(round(ratio * T), 1, T-1)."""
    if horizon < 2:
        raise ValueError("horizon must be >= 2")
    if cfg.observation_mode == "fixed":
        ratio = cfg.observation_ratio
    else:
        if rng is None:
            raise ValueError("random observation mode needs an rng")
        ratio = rng.uniform(cfg.ratio_low, cfg.ratio_high)
    return int(np.clip(math.floor(ratio * horizon + 0.5), 1, horizon - 1))


def sample_targets(sample, cfg, norm):
    """Per-step model targets in [-1, 1] for the configured coordinate mode."""
    lo, hi = norm
    if cfg.coordinate_mode == "global-3d":
        return normalize(sample.points_global, lo, hi)
    if cfg.coordinate_mode == "local-3d":
        return normalize(sample.points_local, lo, hi)
    uv = project(sample.points_local, sample.intrinsics)
    return 2.0 * normalize_pixel(uv, sample.intrinsics) - 1.0


def assemble_batch(samples, cfg, norm, observed):
    """Pad samples to the horizon; returns (frames, points, C, lengths, valid)."""
    n, t = len(samples), cfg.horizon
    frames = np.zeros((n, t, cfg.frame_h, cfg.frame_w))
    points = np.zeros((n, t, cfg.point_dim))
    lengths = np.zeros(n, dtype=np.int64)
    for i, s in enumerate(samples):
        if s.horizon > t:
            raise ValueError(f"sample {s.id} longer ({s.horizon}) than horizon {t}")
        frames[i, : s.horizon] = s.frames
        points[i, : s.horizon] = sample_targets(s, cfg, norm)
        lengths[i] = s.horizon
    valid = np.arange(t)[None, :] < lengths[:, None]
    return frames, points, np.asarray(observed, dtype=np.int64), lengths, valid


class Adam:
    """Adaptive-moment optimizer over a parameter store's trainable tensors."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.trainable_items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.trainable_items()}

    def step(self, lr, clip_norm=None):
        items = self.params.trainable_items()
        grads = {n: p.grad_or_zeros() for n, p in items}
        if clip_norm is not None:
            total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if total > clip_norm:
                scale = clip_norm / total
                grads = {n: g * scale for n, g in grads.items()}
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for n, p in items:
            g = grads[n]
            self.m[n] = self.beta1 * self.m[n] + (1 - self.beta1) * g
            self.v[n] = self.beta2 * self.v[n] + (1 - self.beta2) * g * g
            p.data -= lr * (self.m[n] / b1c) / (np.sqrt(self.v[n] / b2c) + self.eps)


def lr_at(epoch, cfg):
    """Linear warmup for warmup_epochs, then cosine decay to 0."""
    if cfg.warmup_epochs > 0 and epoch < cfg.warmup_epochs:
        return cfg.lr * (epoch + 1) / cfg.warmup_epochs
    span = max(cfg.epochs - cfg.warmup_epochs, 1)
    progress = min((epoch - cfg.warmup_epochs) / span, 1.0)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def _epoch_rng(seed, epoch):
    return np.random.default_rng([seed, epoch])


def fit(params, cfg, samples, norm, train_cfg, loss_cfg=None, start_epoch=0, optimizer=None):
    """Train in place; returns (history, optimizer).

    history rows: (epoch, total, location, velocity) with losses averaged
    over the epoch's samples. Deterministic for a fixed seed: batch order
    comes from a per-epoch seeded shuffle, observation counts from the
    same stream.
    """
    if not samples:
        raise ValueError("empty training split")
    loss_cfg = loss_cfg or L.LossConfig()
    opt = optimizer or Adam(params)
    history = []
    order0 = sorted(range(len(samples)), key=lambda i: samples[i].id)
    for epoch in range(start_epoch, train_cfg.epochs):
        rng = _epoch_rng(train_cfg.seed, epoch)
        order = [order0[i] for i in rng.permutation(len(order0))]
        lr = lr_at(epoch, train_cfg)
        tot_sum = loc_sum = velo_sum = 0.0
        seen = 0
        for lo_idx in range(0, len(order), train_cfg.batch_size):
            chunk = [samples[i] for i in order[lo_idx : lo_idx + train_cfg.batch_size]]
            observed = np.array([observation_count(s.horizon, train_cfg, rng) for s in chunk])
            frames, points, obs, lengths, valid = assemble_batch(chunk, cfg, norm, observed)
            weights = (L.depth_stability_weights(points[..., 2], valid)
                       if cfg.point_dim == 3 else None)
            params.zero_grads()
            with ad.Graph() as g:
                out = M.forward_batch(params, cfg, frames, points, obs, lengths)
                total, loc, velo = L.total_batch(out["mean"], out["alpha"], out["beta"],
                                                 out["velocity"], points, weights, obs,
                                                 valid, loss_cfg)
                g.backward(total)
            opt.step(lr, clip_norm=train_cfg.clip_norm)
            n = len(chunk)
            tot_sum += float(total.data) * n
            loc_sum += float(loc.data) * n
            velo_sum += float(velo.data) * n
            seen += n
        history.append((epoch + 1, tot_sum / seen, loc_sum / seen, velo_sum / seen))
    return history, opt


# ---------------------------------------------------------------------------
# evaluation


def _future_errors_3d(pred_global, gt_global, observed, length):
    diffs = np.linalg.norm(pred_global[observed:length] - gt_global[observed:length], axis=-1)
    return float(diffs.mean()), float(diffs[-1])


def _to_normalized_2d(points_global, sample):
    local = np.stack([sample.poses.global_to_local(points_global[t], t + 1)
                      for t in range(len(points_global))])
    return normalize_pixel(project(local, sample.intrinsics), sample.intrinsics)


def _forecast_batch(params, cfg, samples, norm, ratio, batch_size=256):
    """Run the model over samples at one observation ratio; yields per-sample
    (sample, observed, mean ndarray)."""
    fixed = TrainConfig(observation_mode="fixed", observation_ratio=ratio)
    results = []
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo : lo + batch_size]
        observed = np.array([observation_count(s.horizon, fixed) for s in chunk])
        frames, points, obs, lengths, _ = assemble_batch(chunk, cfg, norm, observed)
        out = M.forward_batch(params, cfg, frames, points, obs, lengths)
        mean = out["mean"].data
        for i, s in enumerate(chunk):
            results.append((s, int(obs[i]), mean[i, : s.horizon]))
    return results


def evaluate(params, cfg, samples, norm, ratio, split="test", batch_size=256):
    """ADE/FDE over future steps at a fixed observation ratio.

    3D metrics are meters in the world frame; 2D metrics are normalized
    frame units. 3D-mode models also report projected 2D metrics; 2d-mode
    models report image-plane metrics only.
    """
    if not samples:
        raise ValueError(f"no samples in split {split!r}")
    samples = sorted(samples, key=lambda s: s.id)
    lo_n, hi_n = norm
    per = {"ade3d": [], "fde3d": [], "ade2d_from3d": [], "fde2d_from3d": [],
           "ade2d": [], "fde2d": []}
    for s, observed, mean in _forecast_batch(params, cfg, samples, norm, ratio, batch_size):
        t = s.horizon
        if cfg.coordinate_mode == "2d":
            pred = (mean + 1.0) / 2.0
            gt = (sample_targets(s, cfg, norm) + 1.0) / 2.0
            d = np.linalg.norm(pred[observed:t] - gt[observed:t], axis=-1)
            per["ade2d"].append(float(d.mean()))
            per["fde2d"].append(float(d[-1]))
            continue
        pred_global = denormalize(mean, lo_n, hi_n)
        if cfg.coordinate_mode == "local-3d":
            pred_local = pred_global
            pred_global = np.stack([s.poses.local_to_global(pred_local[i], i + 1)
                                    for i in range(t)])
        ade, fde = _future_errors_3d(pred_global, s.points_global, observed, t)
        per["ade3d"].append(ade)
        per["fde3d"].append(fde)
        uv_pred = _to_normalized_2d(pred_global, s)
        uv_gt = _to_normalized_2d(s.points_global, s)
        d2 = np.linalg.norm(uv_pred[observed:t] - uv_gt[observed:t], axis=-1)
        per["ade2d_from3d"].append(float(d2.mean()))
        per["fde2d_from3d"].append(float(d2[-1]))

    def agg(key):
        return float(np.mean(per[key])) if per[key] else None

    return MetricsRow(split=split, ratio=ratio,
                      ade3d=agg("ade3d"), fde3d=agg("fde3d"),
                      ade2d_from3d=agg("ade2d_from3d"), fde2d_from3d=agg("fde2d_from3d"),
                      ade2d=agg("ade2d"), fde2d=agg("fde2d"))


def constant_velocity_baseline(sample, observed):
    """Extrapolate the last observed step's velocity: p_{C+k} = p_C + k (p_C - p_{C-1})."""
    if observed < 2:
        raise ValueError("constant-velocity baseline needs at least 2 observed steps")
    if observed >= sample.horizon:
        raise ValueError("nothing to forecast")
    pts = sample.points_global
    v = pts[observed - 1] - pts[observed - 2]
    k = np.arange(1, sample.horizon - observed + 1)[:, None]
    return pts[observed - 1] + k * v


def evaluate_baseline(samples, ratio, split="test"):
    """Constant-velocity ADE/FDE rows; samples with C < 2 are skipped."""
    samples = sorted(samples, key=lambda s: s.id)
    fixed = TrainConfig(observation_mode="fixed", observation_ratio=ratio)
    per3, perf, per2, perf2 = [], [], [], []
    for s in samples:
        observed = observation_count(s.horizon, fixed)
        if observed < 2:
            continue
        pred_future = constant_velocity_baseline(s, observed)
        pred_global = np.concatenate([s.points_global[:observed], pred_future])
        ade, fde = _future_errors_3d(pred_global, s.points_global, observed, s.horizon)
        per3.append(ade)
        perf.append(fde)
        # projection can fail if the extrapolation leaves the camera frustum
        try:
            uv_pred = _to_normalized_2d(pred_global, s)
            uv_gt = _to_normalized_2d(s.points_global, s)
            d2 = np.linalg.norm(uv_pred[observed:] - uv_gt[observed:], axis=-1)
            per2.append(float(d2.mean()))
            perf2.append(float(d2[-1]))
        except ValueError:
            pass
    return MetricsRow(split=split, ratio=ratio, model="cv-baseline",
                      ade3d=float(np.mean(per3)) if per3 else None,
                      fde3d=float(np.mean(perf)) if perf else None,
                      ade2d_from3d=float(np.mean(per2)) if per2 else None,
                      fde2d_from3d=float(np.mean(perf2)) if perf2 else None)
