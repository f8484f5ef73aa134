"""Training losses: attenuated-residual regression, depth weighting, velocity.

The regression loss follows the heteroscedastic form exp(-a) * r + a,
where r is the squared (or Huber) location residual and a the predicted
log-variance. In 3D modes the uncertainty is split: one scalar for the
image-plane coordinates, one for depth, with the depth term weighted by
per-step stability weights derived from the ground truth. A velocity head
is supervised by first-order differences and by warping accumulated
velocities against predicted positions.

Batched variants consume autodiff tensors shaped (N, T, ...) plus numpy
target/mask constants; single-sample wrappers match the operation
contracts directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

RESIDUAL_KINDS = ("squared", "huber")


@dataclass(frozen=True)
class LossConfig:
    residual_kind: str = "huber"
    huber_delta: float = 1e-5
    gamma: float = 0.1
    velocity_weight: float = 1.0
    location_weight: float = 1.0

    def __post_init__(self):
        if self.residual_kind not in RESIDUAL_KINDS:
            raise ValueError(f"residual_kind must be one of {RESIDUAL_KINDS}")
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be > 0")
        if min(self.gamma, self.velocity_weight, self.location_weight) < 0:
            raise ValueError("loss weights must be >= 0")


def _as_tensor(x):
    return x if isinstance(x, ad.Tensor) else ad.constant(np.asarray(x, dtype=np.float64))


def residual_lastdim(diff, kind="squared", delta=1e-5):
    """Reduce a (..., d) difference tensor to a (..., 1) residual."""
    if kind == "squared":
        per = ad.mul(diff, diff)
    elif kind == "huber":
        per = ad.huber(diff, delta)
    else:
        raise ValueError(f"residual kind must be one of {RESIDUAL_KINDS}")
    return ad.reduce_sum(per, axis=-1, keepdims=True)


def residual(p, p_hat, kind="squared", delta=1e-5):
    """Scalar residual between two equal-width coordinate vectors."""
    p = _as_tensor(p)
    p_hat = _as_tensor(p_hat)
    if p.shape != p_hat.shape:
        raise ad.ShapeError(f"residual: widths differ, {p.shape} vs {p_hat.shape}")
    return ad.reduce_sum(residual_lastdim(ad.sub(p, p_hat), kind, delta))


def attenuated(alpha, resid):
    """exp(-alpha) * resid + alpha, elementwise."""
    return ad.add(ad.mul(ad.neg_exp(alpha), resid), alpha)


def aleatoric_loss(alpha, p_hat, p, cfg=None):
    """Uncertainty-attenuated location loss for one prediction."""
    cfg = cfg or LossConfig()
    alpha = ad.reshape(_as_tensor(alpha), ())
    return attenuated(alpha, residual(p, p_hat, cfg.residual_kind, cfg.huber_delta))


def depth_stability_weights(depths, valid=None):
    """Per-step simplex weights favoring stable ground-truth depth.

    weights = softmax(-|z_t - z_{t-1}|) over the horizon, with the first
    difference defined as zero. Accepts (T,) or (N, T); an optional valid
    mask restricts the softmax support (padded steps get weight 0).
    """
    z = np.asarray(depths, dtype=np.float64)
    squeeze = z.ndim == 1
    if squeeze:
        z = z[None, :]
    if valid is None:
        valid = np.ones_like(z, dtype=bool)
    else:
        valid = np.asarray(valid, dtype=bool)
        if squeeze and valid.ndim == 1:
            valid = valid[None, :]
    dz = np.abs(np.diff(z, axis=1, prepend=z[:, :1]))
    logits = np.where(valid, -dz, -np.inf)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    w = e / e.sum(axis=1, keepdims=True)
    return w[0] if squeeze else w


def drau_batch(mean, alpha, beta, targets, weights, valid, cfg):
    """Depth-decoupled attenuated loss, averaged over valid steps and batch.

    mean (N,T,3), alpha/beta (N,T,1) are graph tensors; targets (N,T,3),
    weights (N,T), valid (N,T) are numpy constants.
    """
    if mean.shape[-1] != 3:
        raise ValueError("depth-decoupled loss needs 3D predictions; use planar_batch in 2d mode")
    n, t, _ = mean.shape
    diff = ad.sub(mean, ad.constant(targets))
    s_xy = residual_lastdim(ad.slice_axis(diff, 2, 0, 2), cfg.residual_kind, cfg.huber_delta)
    s_z = residual_lastdim(ad.slice_axis(diff, 2, 2, 3), cfg.residual_kind, cfg.huber_delta)
    w = ad.constant(weights.reshape(n, t, 1))
    per_step = ad.add(attenuated(alpha, s_xy), ad.mul(w, attenuated(beta, s_z)))
    vmask = valid.reshape(n, t, 1).astype(np.float64)
    per_sample = ad.reduce_sum(ad.mul(per_step, ad.constant(vmask)), axis=1)  # (N,1)
    inv_count = ad.constant(1.0 / np.maximum(vmask.sum(axis=1), 1.0))
    return ad.mean(ad.mul(per_sample, inv_count))


def planar_batch(mean, alpha, targets, valid, cfg):
    """2d-mode counterpart: a single attenuated term over (x, y)."""
    n, t, _ = mean.shape
    diff = ad.sub(mean, ad.constant(targets))
    s = residual_lastdim(diff, cfg.residual_kind, cfg.huber_delta)
    per_step = attenuated(alpha, s)
    vmask = valid.reshape(n, t, 1).astype(np.float64)
    per_sample = ad.reduce_sum(ad.mul(per_step, ad.constant(vmask)), axis=1)
    inv_count = ad.constant(1.0 / np.maximum(vmask.sum(axis=1), 1.0))
    return ad.mean(ad.mul(per_sample, inv_count))


def drau_loss(mean, alpha, beta, targets, weights=None, cfg=None):
    """Single-trajectory depth-decoupled loss; mean (T,3), alpha/beta (T,) or (T,1)."""
    cfg = cfg or LossConfig()
    mean = _as_tensor(mean)
    if mean.shape[-1] != 3:
        raise ValueError("depth-decoupled loss needs 3D predictions; use aleatoric_loss in 2d mode")
    t = mean.shape[0]
    if weights is None:
        weights = depth_stability_weights(np.asarray(targets)[:, 2])
    mean3 = ad.reshape(mean, (1, t, mean.shape[-1]))
    a3 = ad.reshape(_as_tensor(alpha), (1, t, 1))
    b3 = ad.reshape(_as_tensor(beta), (1, t, 1))
    return drau_batch(mean3, a3, b3, np.asarray(targets, float).reshape(1, t, -1),
                      np.asarray(weights, float).reshape(1, t), np.ones((1, t), bool), cfg)


def velocity_batch(vel, mean, targets, first_future, valid, gamma):
    """Velocity supervision plus warped-position constraint, batch-averaged.

    vel/mean are graph tensors (N,T,d); targets (N,T,d) numpy. first_future
    (N,) gives the 0-based index of the first forecast step (== C), valid
    (N,T) masks real steps. Per-sample terms are the plain sums of the
    per-step squared norms; only the batch dimension is averaged.
    """
    n, t, d = vel.shape
    steps = np.arange(t)
    vmask = valid.astype(np.float64).reshape(n, t, 1)
    fut = ((steps[None, :] >= first_future[:, None]) & valid).astype(np.float64).reshape(n, t, 1)

    prev = np.concatenate([np.zeros((n, 1, d)), targets[:, :-1]], axis=1)
    gt_diff = ad.constant((targets - prev) * vmask)
    verr = ad.sub(gt_diff, ad.mul(vel, ad.constant(np.broadcast_to(vmask, (n, t, d)).copy())))
    term1 = ad.reduce_sum(ad.mul(verr, verr), axis=(1, 2))  # (N,)

    # p_C + cumulative future velocities, via a lower-triangular matmul
    lower = np.tril(np.ones((t, t)))
    fut_d = np.broadcast_to(fut, (n, t, d)).copy()
    cums = ad.matmul(ad.constant(lower), ad.mul(vel, ad.constant(fut_d)))
    anchor_idx = np.clip(first_future - 1, 0, t - 1)
    anchor = targets[np.arange(n), anchor_idx]  # p_C per sample
    anchor = np.where((first_future > 0)[:, None], anchor, 0.0)
    warp = ad.add(cums, ad.constant(np.broadcast_to(anchor[:, None, :], (n, t, d)).copy()))
    werr = ad.mul(ad.sub(warp, mean), ad.constant(fut_d))
    term2 = ad.reduce_sum(ad.mul(werr, werr), axis=(1, 2))

    return ad.mean(ad.add(term1, ad.scale(term2, gamma)))


def velocity_loss(v_hat, p_hat, p, observed_count, gamma=0.1):
    """Single-trajectory velocity constraint.

    v_hat (T,d) and p_hat (T,d) may be tensors; p (T,d) is ground truth.
    The first term supervises every step's first-order difference (p_0 is
    the zero point); the second warps accumulated future velocities from
    p_C against the predicted positions.
    """
    v_hat = _as_tensor(v_hat)
    p_hat = _as_tensor(p_hat)
    t, d = v_hat.shape
    v3 = ad.reshape(v_hat, (1, t, d))
    m3 = ad.reshape(p_hat, (1, t, d))
    return velocity_batch(v3, m3, np.asarray(p, float).reshape(1, t, d),
                          np.array([observed_count]), np.ones((1, t), bool), gamma)


def total_batch(mean, alpha, beta, vel, targets, weights, first_future, valid, cfg):
    """Weighted sum of the location and velocity objectives (batched)."""
    if mean.shape[-1] == 3:
        loc = drau_batch(mean, alpha, beta, targets, weights, valid, cfg)
    else:
        loc = planar_batch(mean, alpha, targets, valid, cfg)
    velo = velocity_batch(vel, mean, targets, first_future, valid, cfg.gamma)
    total = ad.add(ad.scale(loc, cfg.location_weight), ad.scale(velo, cfg.velocity_weight))
    return total, loc, velo
