import math

import numpy as np
import pytest
from scipy import optimize

from reachcast import autodiff as ad
from reachcast import losses
from reachcast.losses import (
    LossConfig,
    aleatoric_loss,
    depth_stability_weights,
    drau_loss,
    residual,
    total_batch,
    velocity_loss,
)

SQ = LossConfig(residual_kind="squared")


def scalar(t):
    return float(np.asarray(t.data).reshape(()))


class TestResidual:
    def test_zero_at_equality(self):
        p = np.array([0.1, 0.2, 0.3])
        assert scalar(residual(p, p, "squared")) == 0.0
        assert scalar(residual(p, p, "huber", 1e-5)) == 0.0

    def test_unit_squared(self):
        assert scalar(residual([1.0, 0.0, 0.0], [0.0, 0.0, 0.0], "squared")) == 1.0

    def test_huber_linear_branch(self):
        delta = 1e-5
        got = scalar(residual([1.0], [0.0], "huber", delta))
        assert abs(got - delta * (1 - delta / 2)) < 1e-18

    def test_width_mismatch(self):
        with pytest.raises(ad.ShapeError):
            residual([1.0, 2.0], [1.0, 2.0, 3.0])


class TestAleatoricLoss:
    def test_zero_alpha_perfect_prediction(self):
        p = np.array([0.3, -0.1, 0.5])
        assert scalar(aleatoric_loss(np.zeros(1), p, p, SQ)) == 0.0

    def test_zero_alpha_unit_residual(self):
        got = scalar(aleatoric_loss(np.zeros(1), [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], SQ))
        assert got == 1.0

    def test_minimizer_is_log_residual(self):
        for s in (0.1, 1.0, 10.0):
            res = optimize.minimize_scalar(
                lambda a: math.exp(-a) * s + a, bounds=(-30, 30), method="bounded",
                options={"xatol": 1e-12},
            )
            assert abs(res.x - math.log(s)) < 1e-6

    def test_stationary_point_beats_grid(self):
        for s in (0.1, 1.0, 10.0):
            star = aleatoric_loss([math.log(s)], np.zeros(3), [math.sqrt(s), 0, 0], SQ)
            for a in np.linspace(-5, 5, 101):
                trial = aleatoric_loss([a], np.zeros(3), [math.sqrt(s), 0, 0], SQ)
                assert scalar(star) <= scalar(trial) + 1e-12


class TestDepthWeights:
    def test_constant_depth_uniform(self):
        w = depth_stability_weights(np.full(7, 0.4))
        np.testing.assert_array_equal(w, np.full(7, 1.0 / 7))

    def test_two_step_forced_values(self):
        w = depth_stability_weights(np.array([1.0, 1.2]))
        # softmax of logits (0, -0.2), evaluated directly
        e = np.exp([0.0, -0.2])
        np.testing.assert_allclose(w, e / e.sum(), atol=1e-15)
        np.testing.assert_allclose(w, [0.5498, 0.4502], atol=1e-4)

    def test_sum_to_one_random(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            z = rng.uniform(0.2, 1.5, size=rng.integers(1, 40))
            w = depth_stability_weights(z)
            assert abs(w.sum() - 1.0) <= 1e-12
            assert np.all(w > 0)

    def test_shift_invariance_of_differences(self):
        z = np.array([0.5, 0.52, 0.6, 0.61])
        base = depth_stability_weights(z)
        # adding a constant to every |dz| shifts all logits equally
        dz = np.abs(np.diff(z, prepend=z[0]))
        shifted = np.exp(-(dz + 0.37))
        np.testing.assert_allclose(base, shifted / shifted.sum(), atol=1e-12)

    def test_palindrome_reversal(self):
        z = np.array([0.4, 0.5, 0.7, 0.5, 0.4])
        np.testing.assert_array_equal(depth_stability_weights(z),
                                      depth_stability_weights(z[::-1]))

    def test_masked_padding(self):
        z = np.array([[0.4, 0.5, 0.0, 0.0]])
        valid = np.array([[True, True, False, False]])
        w = depth_stability_weights(z, valid)
        assert w[0, 2] == 0.0 and w[0, 3] == 0.0
        assert abs(w.sum() - 1.0) <= 1e-12


class TestDrauLoss:
    def test_perfect_prediction_zero(self):
        p = np.array([[0.1, 0.2, 0.5], [0.2, 0.1, 0.6], [0.0, 0.0, 0.7]])
        got = drau_loss(p, np.zeros(3), np.zeros(3), p, cfg=SQ)
        assert scalar(got) == 0.0

    def test_zero_weight_removes_depth_term(self):
        p = np.array([[0.1, 0.2, 0.5], [0.2, 0.1, 0.9]])
        p_hat = p + np.array([0.0, 0.0, 0.3])
        w_on = drau_loss(p_hat, np.zeros(2), np.zeros(2), p, weights=np.array([0.5, 0.5]), cfg=SQ)
        w_off = drau_loss(p_hat, np.zeros(2), np.zeros(2), p, weights=np.array([0.0, 0.0]), cfg=SQ)
        assert scalar(w_off) == 0.0 and scalar(w_on) > 0.0

    def test_matches_hand_composition(self):
        rng = np.random.default_rng(3)
        t = 3
        p = rng.uniform(-0.5, 0.5, (t, 3))
        p_hat = p + rng.normal(0, 0.1, (t, 3))
        alpha = rng.normal(0, 0.5, t)
        beta = rng.normal(0, 0.5, t)
        w = depth_stability_weights(p[:, 2])
        got = scalar(drau_loss(p_hat, alpha, beta, p, weights=w, cfg=SQ))
        expected = 0.0
        for i in range(t):
            s_xy = float(np.sum((p[i, :2] - p_hat[i, :2]) ** 2))
            s_z = float((p[i, 2] - p_hat[i, 2]) ** 2)
            expected += (math.exp(-alpha[i]) * s_xy + alpha[i]
                         + w[i] * (math.exp(-beta[i]) * s_z + beta[i]))
        expected /= t
        assert abs(got - expected) < 1e-12

    def test_2d_mode_rejected(self):
        with pytest.raises(ValueError):
            drau_loss(np.zeros((3, 2)), np.zeros(3), np.zeros(3), np.zeros((3, 2)), cfg=SQ)


class TestVelocityLoss:
    def test_exact_linear_trajectory(self):
        u = np.array([0.1, 0.0, 0.05])
        t = 6
        p = np.arange(1, t + 1)[:, None] * u
        v = np.tile(u, (t, 1))
        v[0] = p[0]  # first step covers the jump from the zero origin
        got = velocity_loss(v, p, p, observed_count=3, gamma=0.1)
        assert scalar(got) < 1e-24

    def test_static_points_zero_velocity(self):
        p = np.tile([0.2, -0.1, 0.4], (5, 1))
        got = velocity_loss(np.zeros((5, 3)), p, p, observed_count=2, gamma=0.0)
        assert abs(scalar(got) - float(np.sum(p[0] ** 2))) < 1e-12

    def test_gamma_zero_removes_warp_term(self):
        rng = np.random.default_rng(1)
        p = rng.uniform(-0.5, 0.5, (5, 3))
        p_hat = rng.uniform(-0.5, 0.5, (5, 3))
        v = rng.uniform(-0.2, 0.2, (5, 3))
        g0 = scalar(velocity_loss(v, p_hat, p, 2, gamma=0.0))
        prev = np.vstack([np.zeros(3), p[:-1]])
        expected = float(np.sum((p - prev - v) ** 2))
        assert abs(g0 - expected) < 1e-12

    def test_nonnegative_and_zero_iff_terms_vanish(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            t = int(rng.integers(2, 8))
            p = rng.uniform(-1, 1, (t, 3))
            v = rng.uniform(-1, 1, (t, 3))
            ph = rng.uniform(-1, 1, (t, 3))
            val = scalar(velocity_loss(v, ph, p, 1, gamma=0.3))
            assert val >= 0.0

    def test_warp_term_value(self):
        # two future steps, hand-computed warp error
        p = np.array([[0.0, 0, 0], [0.1, 0, 0], [0.2, 0, 0], [0.3, 0, 0]])
        v = np.zeros((4, 3))
        v[0] = p[0]
        v[1:] = [0.1, 0, 0]
        p_hat = p.copy()
        p_hat[3] = [0.5, 0, 0]  # warp predicts 0.3, mean says 0.5
        got = scalar(velocity_loss(v, p_hat, p, observed_count=2, gamma=0.5))
        assert abs(got - 0.5 * 0.2**2) < 1e-12


class TestTotalLoss:
    @staticmethod
    def _batch(rng, n=2, t=4, d=3):
        mean = ad.tensor(rng.uniform(-0.5, 0.5, (n, t, d)), requires_grad=True)
        alpha = ad.tensor(rng.normal(0, 0.3, (n, t, 1)), requires_grad=True)
        beta = ad.tensor(rng.normal(0, 0.3, (n, t, 1)), requires_grad=True)
        vel = ad.tensor(rng.uniform(-0.2, 0.2, (n, t, d)), requires_grad=True)
        targets = rng.uniform(-0.5, 0.5, (n, t, d))
        valid = np.ones((n, t), dtype=bool)
        weights = depth_stability_weights(targets[..., 2], valid)
        first_future = np.array([2, 3])
        return mean, alpha, beta, vel, targets, weights, first_future, valid

    def test_zero_when_parts_zero(self):
        p = np.array([[[0.1, 0.2, 0.5], [0.2, 0.3, 0.5]]])
        mean = ad.constant(p)
        alpha = ad.constant(np.zeros((1, 2, 1)))
        beta = ad.constant(np.zeros((1, 2, 1)))
        v = np.zeros((1, 2, 3))
        v[0, 0] = p[0, 0]
        v[0, 1] = p[0, 1] - p[0, 0]
        valid = np.ones((1, 2), bool)
        w = depth_stability_weights(p[..., 2], valid)
        total, loc, velo = total_batch(mean, alpha, beta, ad.constant(v), p, w,
                                       np.array([1]), valid, SQ)
        assert scalar(total) < 1e-24

    def test_equals_weighted_parts(self):
        rng = np.random.default_rng(11)
        mean, alpha, beta, vel, targets, weights, ff, valid = self._batch(rng)
        cfg = LossConfig(residual_kind="squared", gamma=0.2, velocity_weight=0.7,
                         location_weight=1.3)
        total, loc, velo = total_batch(mean, alpha, beta, vel, targets, weights, ff, valid, cfg)
        assert abs(scalar(total) - (1.3 * scalar(loc) + 0.7 * scalar(velo))) < 1e-12

    def test_gradients_reach_all_heads(self):
        rng = np.random.default_rng(13)
        mean, alpha, beta, vel, targets, weights, ff, valid = self._batch(rng)
        with ad.Graph() as g:
            total, _, _ = total_batch(mean, alpha, beta, vel, targets, weights, ff, valid, SQ)
            g.backward(total)
        for t in (mean, alpha, beta, vel):
            assert t.grad is not None and np.any(t.grad != 0)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(17)
        mean, alpha, beta, vel, targets, weights, ff, valid = self._batch(rng)

        def build():
            total, _, _ = total_batch(mean, alpha, beta, vel, targets, weights, ff, valid, SQ)
            return total

        report = ad.check_gradients(build, {"mean": mean, "alpha": alpha, "beta": beta, "vel": vel},
                                    step=1e-5, tolerance=1e-4)
        assert report.passed, "\n".join(report.lines())

    def test_2d_mode_uses_planar_loss(self):
        rng = np.random.default_rng(19)
        n, t = 2, 4
        mean = ad.tensor(rng.uniform(-0.5, 0.5, (n, t, 2)), requires_grad=True)
        alpha = ad.tensor(rng.normal(0, 0.3, (n, t, 1)), requires_grad=True)
        vel = ad.tensor(rng.uniform(-0.2, 0.2, (n, t, 2)), requires_grad=True)
        targets = rng.uniform(-0.5, 0.5, (n, t, 2))
        valid = np.ones((n, t), bool)
        total, loc, velo = total_batch(mean, alpha, None, vel, targets, None,
                                       np.array([2, 2]), valid, SQ)
        assert np.isfinite(scalar(total))
