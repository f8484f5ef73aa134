"""Trajectory annotation utilities: clip bounds, two-pass fusion, depth repair.

Depth repair fits z(t) = a1*t^3 + a2*t^2 + a3*t + a4 + a5*sin(a6*t) to the
valid depth samples of a track and fills the invalid ones from the fitted
curve. The model is linear in a1..a5 given a6, so the single nonlinear
parameter is found by a coarse log-grid scan followed by golden-section
refinement, with an exact (damped) linear solve at every candidate. Time
is normalized to [0, 1] before fitting to keep the cubic terms conditioned.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

MIN_VALID_POINTS = 10
GRID_SIZE = 200
RIDGE = 1e-9


class EmptyClipError(ValueError):
    """Manual and landmark bounds do not intersect."""


class InsufficientDataError(ValueError):
    """Fewer valid depth samples than the fitting minimum."""


def clip_bounds(s_m, e_m, t_s, t_e):
    """Intersect manual bounds with landmark bounds.

    Returns (max(s_m, t_s), min(e_m, t_e)); raises EmptyClipError when the
    intersection is empty.
    """
    if s_m > e_m or t_s > t_e:
        raise ValueError(f"bounds must be ordered: ({s_m},{e_m}) / ({t_s},{t_e})")
    start, end = max(s_m, t_s), min(e_m, t_e)
    if start > end:
        raise EmptyClipError(f"clip bounds ({s_m},{e_m}) and ({t_s},{t_e}) do not intersect")
    return start, end


def fusion_weight(t, horizon, floor=0.3):
    """Forward-pass weight at step t: floor + (1 - floor) / (1 + exp(t - T/2)).

    Decreases from ~1 at the start of the clip to ~floor at the end, so the
    fused track trusts the forward pass early and the backward pass late.
    """
    if not 0 <= floor < 1:
        raise ValueError(f"floor must be in [0, 1), got {floor}")
    t = np.asarray(t, dtype=np.float64)
    # sigmoid(T/2 - t) computed via tanh for overflow safety
    sig = 0.5 * (1.0 + np.tanh(0.5 * (horizon / 2.0 - t)))
    return floor + (1.0 - floor) * sig


def fuse_trajectories(forward, backward, floor=0.3):
    """Temporally weighted sum of forward- and backward-tracked 2D points."""
    fwd = np.asarray(forward, dtype=np.float64)
    bwd = np.asarray(backward, dtype=np.float64)
    if fwd.shape != bwd.shape:
        raise ValueError(f"forward/backward lengths differ: {fwd.shape} vs {bwd.shape}")
    horizon = fwd.shape[0]
    t = np.arange(1, horizon + 1, dtype=np.float64)
    w = fusion_weight(t, horizon, floor)[:, None]
    return w * fwd + (1.0 - w) * bwd


@dataclass(frozen=True)
class RawTrack:
    """One clip's raw annotation inputs."""

    forward_2d: np.ndarray
    backward_2d: np.ndarray
    depths: np.ndarray
    valid: np.ndarray
    manual_bounds: tuple = (0, 0)
    landmark_bounds: tuple = (0, 0)

    def __post_init__(self):
        if self.forward_2d.shape != self.backward_2d.shape:
            raise ValueError("forward/backward lengths differ")
        if len(self.depths) != len(self.valid):
            raise ValueError("depths/validity lengths differ")


@dataclass(frozen=True)
class DepthCurve:
    """Fitted depth model over normalized time tau = (t - t_lo) / (t_hi - t_lo)."""

    coeffs: tuple  # a1..a6
    t_lo: float
    t_hi: float
    rmse: float = field(default=0.0, compare=False)

    def __post_init__(self):
        if self.coeffs[5] < 0 or not np.all(np.isfinite(self.coeffs)):
            raise ValueError(f"bad depth-curve coefficients: {self.coeffs}")

    def evaluate(self, times):
        a1, a2, a3, a4, a5, a6 = self.coeffs
        span = self.t_hi - self.t_lo
        tau = (np.asarray(times, dtype=np.float64) - self.t_lo) / (span if span else 1.0)
        return a1 * tau**3 + a2 * tau**2 + a3 * tau + a4 + a5 * np.sin(a6 * tau)


def _basis(tau, a6):
    return np.stack([tau**3, tau**2, tau, np.ones_like(tau), np.sin(a6 * tau)], axis=1)


def _linear_solve(tau, z, a6):
    """Damped least squares for a1..a5 at fixed a6; returns (coeffs, sse)."""
    b = _basis(tau, a6)
    gram = b.T @ b + RIDGE * np.eye(5)
    coef = np.linalg.solve(gram, b.T @ z)
    resid = z - b @ coef
    return coef, float(resid @ resid)


def fit_depth_model(times, depths, valid):
    """Fit the cubic-plus-sine depth curve to the valid samples of a track.

    Needs at least MIN_VALID_POINTS valid samples. The sine frequency is
    scanned over a log grid up to pi times the sample rate and refined by
    golden-section search before the final linear solve.
    """
    times = np.asarray(times, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    n_valid = int(valid.sum())
    if n_valid < MIN_VALID_POINTS:
        raise InsufficientDataError(
            f"depth fit needs >= {MIN_VALID_POINTS} valid points, got {n_valid}"
        )
    t_lo, t_hi = float(times.min()), float(times.max())
    span = t_hi - t_lo
    tau = (times[valid] - t_lo) / (span if span else 1.0)
    z = depths[valid]

    rate = max(len(times) - 1, 4)
    grid = np.geomspace(1e-3, np.pi * rate, GRID_SIZE)
    sses = np.array([_linear_solve(tau, z, a6)[1] for a6 in grid])
    best = int(np.argmin(sses))

    lo = grid[max(best - 1, 0)]
    hi = grid[min(best + 1, GRID_SIZE - 1)]
    if lo < hi:
        res = optimize.minimize_scalar(
            lambda a6: _linear_solve(tau, z, a6)[1], bounds=(lo, hi), method="bounded",
            options={"xatol": 1e-10},
        )
        a6 = float(res.x) if res.fun <= sses[best] else float(grid[best])
    else:
        a6 = float(grid[best])

    coef, sse = _linear_solve(tau, z, a6)
    rmse = float(np.sqrt(sse / n_valid))
    return DepthCurve(coeffs=(*(float(c) for c in coef), a6), t_lo=t_lo, t_hi=t_hi, rmse=rmse)


def repair_depth(track):
    """Replace invalid depth entries with the fitted curve's values.

    Valid entries are returned untouched. Returns (repaired depths, curve).
    """
    depths = np.asarray(track.depths, dtype=np.float64)
    valid = np.asarray(track.valid, dtype=bool)
    times = np.arange(len(depths), dtype=np.float64)
    curve = fit_depth_model(times, depths, valid)
    repaired = depths.copy()
    if not valid.all():
        repaired[~valid] = curve.evaluate(times[~valid])
    return repaired, curve


@dataclass
class RepairRow:
    """One line of the repair report CSV."""

    track_id: str
    n_valid: int
    n_repaired: int
    rmse: float | None  # None when the track was skipped

    def as_csv(self):
        rmse = "" if self.rmse is None else f"{self.rmse:.9g}"
        return f"{self.track_id},{self.n_valid},{self.n_repaired},{rmse}"


def repair_sample_depths(sample):
    """Repair one dataset sample's local depths in place of a copy.

    Treats points_local[:, 2] with the validity flags as the raw depth
    track. Returns (new local points, new validity, report row).
    """
    depths = sample.points_local[:, 2]
    valid = np.asarray(sample.valid_depth, dtype=bool)
    n_valid = int(valid.sum())
    n_invalid = int((~valid).sum())
    if n_invalid == 0:
        return sample.points_local.copy(), valid.copy(), RepairRow(sample.id, n_valid, 0, 0.0)
    track = RawTrack(
        forward_2d=np.zeros((len(depths), 2)),
        backward_2d=np.zeros((len(depths), 2)),
        depths=depths,
        valid=valid,
    )
    repaired, curve = repair_depth(track)
    points = sample.points_local.copy()
    points[:, 2] = repaired
    return points, np.ones_like(valid), RepairRow(sample.id, n_valid, n_invalid, curve.rmse)
