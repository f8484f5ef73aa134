import math

import numpy as np
import pytest

from reachcast.annotate import (
    DepthCurve,
    EmptyClipError,
    InsufficientDataError,
    RawTrack,
    clip_bounds,
    fit_depth_model,
    fuse_trajectories,
    fusion_weight,
    repair_depth,
)

PLANTED = (0.001, -0.01, 0.05, 0.4, 0.02, 0.7)


def planted_track(n=30, noise=0.0, invalid_idx=(), seed=0):
    times = np.arange(n, dtype=float)
    curve = DepthCurve(coeffs=PLANTED, t_lo=0.0, t_hi=float(n - 1))
    z = curve.evaluate(times)
    if noise:
        z = z + np.random.default_rng(seed).normal(0, noise, size=n)
    valid = np.ones(n, dtype=bool)
    z_obs = z.copy()
    for i in invalid_idx:
        valid[i] = False
        z_obs[i] = 0.0
    return times, z_obs, valid, curve.evaluate(times)


class TestClipBounds:
    def test_formula(self):
        assert clip_bounds(5, 50, 8, 60) == (8, 50)

    def test_identity(self):
        assert clip_bounds(5, 50, 5, 50) == (5, 50)

    def test_disjoint(self):
        with pytest.raises(EmptyClipError):
            clip_bounds(5, 10, 20, 30)

    def test_unordered(self):
        with pytest.raises(ValueError):
            clip_bounds(50, 5, 8, 60)


class TestFusionWeight:
    def test_midpoint(self):
        assert abs(fusion_weight(20, 40) - 0.65) < 1e-12

    def test_start_is_nearly_one(self):
        assert abs(fusion_weight(1, 40) - 1.0) < 1e-8

    def test_end_is_nearly_floor(self):
        assert abs(fusion_weight(40, 40) - 0.3) < 1e-8

    def test_strictly_decreasing_and_bounded(self):
        t = np.arange(1, 41, dtype=float)
        w = fusion_weight(t, 40)
        assert np.all(np.diff(w) < 0)
        assert np.all(w > 0.3) and np.all(w < 1.0)

    def test_floor_validation(self):
        with pytest.raises(ValueError):
            fusion_weight(1, 10, floor=1.0)


class TestFuseTrajectories:
    def test_equal_tracks_fixed_point(self):
        rng = np.random.default_rng(1)
        fwd = rng.uniform(0, 100, size=(20, 2))
        fused = fuse_trajectories(fwd, fwd)
        np.testing.assert_allclose(fused, fwd, atol=1e-12)

    def test_midpoint_weighting(self):
        horizon = 40
        fwd = np.zeros((horizon, 2))
        bwd = np.ones((horizon, 2))
        fused = fuse_trajectories(fwd, bwd)
        # at t = T/2 the weight is 0.65, so the fused point is 0.35
        np.testing.assert_allclose(fused[horizon // 2 - 1], [0.35, 0.35], atol=1e-12)

    def test_matches_per_step_weights(self):
        rng = np.random.default_rng(2)
        fwd = rng.uniform(0, 50, size=(17, 2))
        bwd = rng.uniform(0, 50, size=(17, 2))
        fused = fuse_trajectories(fwd, bwd)
        for i in range(17):
            w = fusion_weight(i + 1, 17)
            np.testing.assert_allclose(fused[i], w * fwd[i] + (1 - w) * bwd[i], atol=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            fuse_trajectories(np.zeros((5, 2)), np.zeros((6, 2)))


class TestFitDepthModel:
    def test_constant_depth(self):
        times = np.arange(12, dtype=float)
        curve = fit_depth_model(times, np.full(12, 0.5), np.ones(12, dtype=bool))
        np.testing.assert_allclose(curve.evaluate(times), 0.5, atol=1e-6)

    def test_planted_curve_recovery(self):
        times, z, valid, truth = planted_track(30)
        curve = fit_depth_model(times, z, valid)
        assert np.max(np.abs(curve.evaluate(times) - truth)) < 1e-3

    def test_too_few_valid_points(self):
        times, z, valid, _ = planted_track(30)
        valid[8:] = False
        with pytest.raises(InsufficientDataError):
            fit_depth_model(times, z, valid)

    def test_objective_not_worse_than_planted(self):
        for seed in range(3):
            times, z, valid, _ = planted_track(30, noise=0.005, seed=seed)
            curve = fit_depth_model(times, z, valid)
            fit_sse = float(np.sum((z[valid] - curve.evaluate(times[valid])) ** 2))
            planted_sse = float(
                np.sum((z[valid] - DepthCurve(PLANTED, 0.0, 29.0).evaluate(times[valid])) ** 2)
            )
            assert fit_sse <= planted_sse + 1e-9


class TestRepairDepth:
    @staticmethod
    def _track(z, valid):
        n = len(z)
        return RawTrack(np.zeros((n, 2)), np.zeros((n, 2)), np.asarray(z, float),
                        np.asarray(valid, bool))

    def test_no_invalid_entries_is_identity(self):
        times, z, valid, _ = planted_track(20)
        repaired, _ = repair_depth(self._track(z, valid))
        np.testing.assert_array_equal(repaired, z)

    def test_constant_track_with_holes(self):
        z = np.full(15, 0.42)
        valid = np.ones(15, dtype=bool)
        for i in (3, 7, 11):
            z[i], valid[i] = 0.0, False
        repaired, _ = repair_depth(self._track(z, valid))
        np.testing.assert_allclose(repaired, 0.42, atol=1e-6)

    def test_never_modifies_valid_entries(self):
        rng = np.random.default_rng(5)
        times, z, valid, _ = planted_track(30, noise=0.01, invalid_idx=(2, 9, 17), seed=3)
        repaired, _ = repair_depth(self._track(z, valid))
        np.testing.assert_array_equal(repaired[valid], z[valid])

    def test_plant_corrupt_repair(self):
        n = 30
        rng = np.random.default_rng(8)
        invalid = rng.choice(n, size=6, replace=False)  # 20% corrupted
        times, z, valid, truth = planted_track(n, noise=0.005, invalid_idx=invalid, seed=8)
        repaired, _ = repair_depth(self._track(z, valid))
        assert np.max(np.abs(repaired[~valid] - truth[~valid])) < 2e-2

    def test_noiseless_repair_is_tight(self):
        times, z, valid, truth = planted_track(30, invalid_idx=(4, 12, 21))
        repaired, _ = repair_depth(self._track(z, valid))
        assert np.max(np.abs(repaired - truth)) < 1e-3


class TestDepthCurveValidation:
    def test_negative_frequency_rejected(self):
        with pytest.raises(ValueError):
            DepthCurve(coeffs=(0, 0, 0, 0.5, 0.1, -1.0), t_lo=0, t_hi=1)

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            DepthCurve(coeffs=(0, 0, 0, math.inf, 0, 1.0), t_lo=0, t_hi=1)
