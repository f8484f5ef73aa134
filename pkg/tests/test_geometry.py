import numpy as np
import pytest

from reachcast.geometry import (
    EGOPAT3D_INTRINSICS,
    H2O_INTRINSICS,
    BehindCameraError,
    CameraIntrinsics,
    Pose,
    PoseChain,
    backproject,
    global_to_local,
    local_to_global,
    normalize_pixel,
    project,
)


def random_rotation(rng):
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def random_chain(rng, n, rot_scale=1.0, trans_scale=0.5):
    poses = []
    for _ in range(n):
        r = random_rotation(rng) if rot_scale else np.eye(3)
        t = rng.standard_normal(3) * trans_scale
        poses.append(Pose.from_rt(r, t))
    return PoseChain(poses)


class TestIntrinsics:
    def test_validation(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=-1, fy=1, ox=0, oy=0, width=10, height=10)
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=1, fy=1, ox=0, oy=0, width=0, height=10)

    def test_scaling(self):
        k = EGOPAT3D_INTRINSICS.scaled(0.25)
        assert k.width == 960 and k.height == 540
        assert abs(k.fx - 1808.203 * 0.25) < 1e-12

    def test_round_trip_dict(self):
        k = CameraIntrinsics.from_dict(H2O_INTRINSICS.to_dict())
        assert k == H2O_INTRINSICS


class TestProjection:
    def test_optical_axis_hits_principal_point(self):
        uv = project([0.0, 0.0, 1.0], EGOPAT3D_INTRINSICS)
        assert uv[0] == 1942.287 and uv[1] == 1123.822

    def test_unit_camera(self):
        k = CameraIntrinsics(fx=1, fy=1, ox=0, oy=0, width=2, height=2)
        np.testing.assert_array_equal(project([1.0, 0.0, 1.0], k), [1.0, 0.0])

    def test_behind_camera(self):
        with pytest.raises(BehindCameraError):
            project([0.0, 0.0, -1.0], EGOPAT3D_INTRINSICS)

    def test_backproject_principal_point(self):
        p = backproject([EGOPAT3D_INTRINSICS.ox, EGOPAT3D_INTRINSICS.oy], 2.0, EGOPAT3D_INTRINSICS)
        np.testing.assert_array_equal(p, [0.0, 0.0, 2.0])

    def test_backproject_zero_depth(self):
        with pytest.raises(BehindCameraError):
            backproject([10.0, 10.0], 0.0, H2O_INTRINSICS)

    def test_project_backproject_round_trip(self):
        rng = np.random.default_rng(42)
        uv = rng.uniform([0, 0], [1280, 720], size=(100, 2))
        z = rng.uniform(0.1, 5.0, size=100)
        uv2 = project(backproject(uv, z, H2O_INTRINSICS), H2O_INTRINSICS)
        assert np.max(np.abs(uv2 - uv)) < 1e-9

    def test_normalize_pixel(self):
        k = H2O_INTRINSICS
        np.testing.assert_array_equal(normalize_pixel([1280.0, 720.0], k), [1.0, 1.0])
        np.testing.assert_array_equal(normalize_pixel([0.0, 0.0], k), [0.0, 0.0])
        np.testing.assert_array_equal(normalize_pixel([640.0, 360.0], k), [0.5, 0.5])


class TestPose:
    def test_bottom_row_enforced(self):
        m = np.eye(4)
        m[3, 0] = 0.5
        with pytest.raises(ValueError):
            Pose(m)

    def test_orthonormality_enforced(self):
        m = np.eye(4)
        m[0, 0] = 1.1
        with pytest.raises(ValueError):
            Pose(m)

    def test_flat_round_trip(self):
        rng = np.random.default_rng(0)
        p = Pose.from_rt(random_rotation(rng), rng.standard_normal(3))
        p2 = Pose.from_flat(p.to_flat())
        np.testing.assert_array_equal(p.matrix, p2.matrix)

    def test_inverse(self):
        rng = np.random.default_rng(1)
        p = Pose.from_rt(random_rotation(rng), rng.standard_normal(3))
        np.testing.assert_allclose(p.matrix @ p.inverse_matrix(), np.eye(4), atol=1e-12)


class TestPoseChain:
    def test_identity_chain(self):
        chain = PoseChain([Pose.identity()] * 3)
        p = np.array([0.3, -0.2, 0.9])
        np.testing.assert_array_equal(local_to_global(p, chain, 2), p)
        np.testing.assert_array_equal(global_to_local(p, chain, 3), p)

    def test_translation_composition(self):
        step = np.eye(4)
        step[2, 3] = 0.1
        chain = PoseChain([step, step])
        out = local_to_global([0.0, 0.0, 0.0], chain, 2)
        np.testing.assert_allclose(out, [0.0, 0.0, 0.2], atol=1e-15)

    def test_translation_inverse_is_negated_cumulative(self):
        step = np.eye(4)
        step[:3, 3] = [0.1, -0.2, 0.3]
        chain = PoseChain([step, step, step])
        out = global_to_local([0.0, 0.0, 0.0], chain, 3)
        np.testing.assert_allclose(out, [-0.3, 0.6, -0.9], atol=1e-12)

    def test_round_trip_random_chain(self):
        rng = np.random.default_rng(7)
        chain = random_chain(rng, 10)
        for t in (1, 5, 10):
            p = rng.standard_normal((50, 3))
            back = global_to_local(local_to_global(p, chain, t), chain, t)
            assert np.max(np.abs(back - p)) < 1e-9

    def test_cumulative_consistency(self):
        rng = np.random.default_rng(9)
        chain = random_chain(rng, 6)
        for t in range(1, 7):
            np.testing.assert_allclose(
                chain.cumulative(t), chain.cumulative(t - 1) @ chain.poses[t - 1].matrix, atol=1e-12
            )

    def test_index_bounds(self):
        chain = random_chain(np.random.default_rng(3), 4)
        with pytest.raises(IndexError):
            chain.local_to_global([0, 0, 1], 0)
        with pytest.raises(IndexError):
            chain.local_to_global([0, 0, 1], 5)

    def test_orthonormality_drift_over_64_steps(self):
        rng = np.random.default_rng(11)
        chain = random_chain(rng, 64)
        assert chain.max_rotation_drift() < 1e-6

    def test_flat_round_trip(self):
        rng = np.random.default_rng(13)
        chain = random_chain(rng, 5)
        chain2 = PoseChain.from_flat(chain.to_flat())
        for a, b in zip(chain.poses, chain2.poses):
            np.testing.assert_array_equal(a.matrix, b.matrix)
