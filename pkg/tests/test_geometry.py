import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fgsn.geometry import (
    DegenerateConfiguration,
    Match2D3D,
    MatchSet,
    RansacConfig,
    _score_hypotheses,
    _uniform_triples,
    _weighted_triples,
    axis_angle,
    p3p_batch,
    p3p_solve,
    pose_error,
    project,
    project_points,
    ransac_pose,
    reprojection_errors,
)
from fgsn.model import LabeledPointCloud, PinholeCamera, Pose

CAM = PinholeCamera(500.0, 500.0, 320.0, 240.0, 640, 480)


def random_pose(rng):
    R = axis_angle(rng.normal(size=3), rng.uniform(0, np.pi))
    return Pose.from_center(R, rng.normal(size=3) * 2)


def visible_points(rng, pose, n, camera=CAM):
    """World points that project inside the image at depths 4-12 m."""
    u = rng.uniform(0, camera.width - 1, n)
    v = rng.uniform(0, camera.height - 1, n)
    z = rng.uniform(4, 12, n)
    cam_pts = np.column_stack([(u - camera.cx) / camera.fx * z, (v - camera.cy) / camera.fy * z, z])
    world = (cam_pts - pose.translation) @ pose.rotation
    return world, np.column_stack([u, v])


def synthetic_instance(seed, n=100, outlier_fraction=0.0, noise_px=0.0):
    rng = np.random.default_rng(seed)
    pose = random_pose(rng)
    pts, pix = visible_points(rng, pose, n)
    pix = pix + rng.normal(0, noise_px, pix.shape) if noise_px else pix
    n_out = int(round(outlier_fraction * n))
    out_idx = rng.choice(n, n_out, replace=False)
    pix[out_idx] = np.column_stack([rng.uniform(0, CAM.width - 1, n_out), rng.uniform(0, CAM.height - 1, n_out)])
    inlier = np.ones(n, bool)
    inlier[out_idx] = False
    cloud = LabeledPointCloud(pts, np.zeros(n, int), 1)
    return pose, cloud, MatchSet(pix, np.arange(n), is_inlier=inlier)


class TestProjection:
    def test_principal_point(self):
        assert project(CAM, Pose.identity(), [0, 0, 1]) == (320.0, 240.0)

    def test_behind_camera(self):
        assert project(CAM, Pose.identity(), [0, 0, -1]) is None
        assert project(CAM, Pose.identity(), [0, 0, 0]) is None

    def test_out_of_bounds(self):
        assert project(CAM, Pose.identity(), [10, 0, 1]) is None

    def test_homogeneous_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            pose = random_pose(rng)
            X = rng.normal(size=3) * 5
            P = CAM.K @ np.hstack([pose.rotation, pose.translation[:, None]])
            h = P @ np.append(X, 1.0)
            got = project(CAM, pose, X)
            inside = h[2] > 0 and -0.5 <= h[0] / h[2] < CAM.width - 0.5 and -0.5 <= h[1] / h[2] < CAM.height - 0.5
            if inside:
                np.testing.assert_allclose(got, h[:2] / h[2], atol=1e-9)
            else:
                assert got is None


class TestP3P:
    def test_recovers_known_pose(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            pose = random_pose(rng)
            pts, pix = visible_points(rng, pose, 3)
            sols = p3p_solve(CAM.bearings(pix), pts)
            errs = [pose_error(s, pose) for s in sols]
            assert min(errs)[0] < 1e-6
            assert min(e[1] for e in errs) < 1e-6

    def test_collinear_points(self):
        pts = np.array([[0, 0, 5.0], [1, 0, 5.0], [2, 0, 5.0]])
        b = CAM.bearings([[300, 240], [320, 240], [340, 240]])
        with pytest.raises(DegenerateConfiguration, match="degenerate configuration"):
            p3p_solve(b, pts)

    def test_at_most_four_solutions_and_exact_interpolation(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            pose = random_pose(rng)
            pts, pix = visible_points(rng, pose, 3)
            b = CAM.bearings(pix)
            sols = p3p_solve(b, pts)
            assert 0 < len(sols) <= 4
            for s in sols:
                cam = s.transform(pts)
                cam /= np.linalg.norm(cam, axis=1, keepdims=True)
                ang = np.arccos(np.clip((cam * b).sum(1), -1, 1))
                assert ang.max() < 1e-7

    def test_batch_matches_single(self):
        rng = np.random.default_rng(3)
        pose = random_pose(rng)
        pts, pix = visible_points(rng, pose, 3)
        b = CAM.bearings(pix)
        R, t, ok = p3p_batch(b[None], pts[None])
        single = p3p_solve(b, pts)
        assert ok[0].sum() >= len(single)


class TestRansac:
    def test_noise_free(self):
        for seed in range(10):
            pose, cloud, m = synthetic_instance(seed, n=50)
            res = ransac_pose(m, cloud, CAM, RansacConfig(200, 5.0, seed))
            assert res.inlier_ratio == 1.0
            p, r = pose_error(res.pose, pose)
            assert p < 1e-6 and r < 1e-6

    def test_too_few_matches(self):
        pose, cloud, m = synthetic_instance(0, n=10)
        with pytest.raises(ValueError):
            ransac_pose(m.subset(slice(0, 2)), cloud, CAM)

    def test_accepts_match_list(self):
        pose, cloud, m = synthetic_instance(4, n=20)
        res = ransac_pose([Match2D3D(tuple(p), int(i), 0.5) for p, i in zip(m.pixels, m.point_ids)], cloud, CAM, RansacConfig(50))
        assert res.inlier_count == 20

    def test_weights_on_three_inliers(self):
        pose, cloud, m = synthetic_instance(5, n=40, outlier_fraction=0.5)
        good = np.flatnonzero(m.is_inlier)[:3]
        w = np.zeros(len(m))
        w[good] = 1.0
        weighted = ransac_pose(m, cloud, CAM, RansacConfig(100, 5.0, 0), sampling_weights=w)
        alone = ransac_pose(m.subset(good), cloud, CAM, RansacConfig(100, 5.0, 0))
        np.testing.assert_allclose(weighted.pose.rotation, alone.pose.rotation, atol=1e-12)
        np.testing.assert_allclose(weighted.pose.translation, alone.pose.translation, atol=1e-12)

    def test_equal_weights_match_uniform(self):
        pose, cloud, m = synthetic_instance(6, n=60, outlier_fraction=0.4, noise_px=1.0)
        a = ransac_pose(m, cloud, CAM, RansacConfig(300, 5.0, 3))
        b = ransac_pose(m, cloud, CAM, RansacConfig(300, 5.0, 3), sampling_weights=np.full(len(m), 2.0))
        assert a.pose == b.pose

    def test_bad_weights(self):
        pose, cloud, m = synthetic_instance(7, n=10)
        with pytest.raises(ValueError):
            ransac_pose(m, cloud, CAM, sampling_weights=-np.ones(10))

    def test_inlier_count_monotone_in_threshold(self):
        pose, cloud, m = synthetic_instance(8, n=80, outlier_fraction=0.3, noise_px=2.0)
        res = ransac_pose(m, cloud, CAM, RansacConfig(500, 5.0, 0))
        counts = [int((reprojection_errors(CAM, res.pose.rotation, res.pose.translation, cloud.points[m.point_ids], m.pixels) < thr).sum()) for thr in (1, 2, 4, 8, 16)]
        assert counts == sorted(counts)
        best = [ransac_pose(m, cloud, CAM, RansacConfig(500, thr, 0)).inlier_count for thr in (1.0, 2.0, 4.0, 8.0, 16.0)]
        assert best == sorted(best)

    def test_deterministic(self):
        pose, cloud, m = synthetic_instance(9, n=60, outlier_fraction=0.5, noise_px=1.0)
        a = ransac_pose(m, cloud, CAM, RansacConfig(400, 5.0, 11))
        b = ransac_pose(m, cloud, CAM, RansacConfig(400, 5.0, 11))
        assert a.pose == b.pose and np.array_equal(a.inlier_mask, b.inlier_mask)


class TestScoringKernel:
    def test_matches_numpy_oracle(self):
        rng = np.random.default_rng(10)
        pose, cloud, m = synthetic_instance(10, n=120, outlier_fraction=0.4, noise_px=3.0)
        R = np.stack([axis_angle(rng.normal(size=3), rng.normal(0, 0.02)) @ pose.rotation for _ in range(30)])
        t = pose.translation + rng.normal(0, 0.05, (30, 3))
        pts = cloud.points[m.point_ids]
        counts, costs = _score_hypotheses(R, t, pts, m.pixels, CAM.fx, CAM.fy, CAM.cx, CAM.cy, 5.0)
        err = reprojection_errors(CAM, R, t, pts, m.pixels)
        inl = err < 5.0
        np.testing.assert_array_equal(counts, inl.sum(1))
        np.testing.assert_allclose(costs, np.where(inl, err, 0).sum(1), rtol=1e-12)


class TestSamplers:
    def test_uniform_triples_distinct(self):
        tr = _uniform_triples(np.random.default_rng(0), 5, 5000)
        assert np.all((tr[:, 0] != tr[:, 1]) & (tr[:, 0] != tr[:, 2]) & (tr[:, 1] != tr[:, 2]))
        assert tr.min() == 0 and tr.max() == 4

    def test_weighted_first_draw_follows_weights(self):
        w = np.array([0.75, 0.25, 0.0, 0.0, 0.0])
        w[2:] = 1e-12
        w /= w.sum()
        tr = _weighted_triples(np.random.default_rng(1), w, 20000)
        frac = np.bincount(tr[:, 0], minlength=5) / len(tr)
        np.testing.assert_allclose(frac[:2], [0.75, 0.25], atol=0.015)

    def test_weighted_zero_weight_never_drawn(self):
        w = np.array([0.5, 0.2, 0.2, 0.1, 0.0])
        tr = _weighted_triples(np.random.default_rng(2), w, 5000)
        assert not np.any(tr == 4)


class TestPoseError:
    def test_identical(self):
        p = random_pose(np.random.default_rng(0))
        assert pose_error(p, p) == (0.0, 0.0)

    def test_translation(self):
        a = Pose.identity()
        b = Pose.from_center(np.eye(3), [0, 1.0, 0])
        assert pose_error(a, b) == (1.0, 0.0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.1, 179.0))
    def test_rotation_about_any_axis(self, seed, deg):
        rng = np.random.default_rng(seed)
        base = random_pose(rng)
        delta = axis_angle(rng.normal(size=3), np.radians(deg))
        other = Pose.from_center(delta @ base.rotation, base.center)
        pos, rot = pose_error(other, base)
        assert pos == pytest.approx(0.0, abs=1e-9)
        assert rot == pytest.approx(deg, abs=1e-9)
        assert pose_error(base, other)[1] == pytest.approx(rot, abs=1e-9)
