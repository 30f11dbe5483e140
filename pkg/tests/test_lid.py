import numpy as np
import pytest

from esfr.lid import (
    CLAMP_EPSILON,
    DivergentEstimateError,
    LidConfig,
    NeighborDistances,
    TooFewPointsError,
    ZeroDistanceWarning,
    knn_distances,
    lid_mle,
    lid_summary,
    module_lid,
)


class TestKnnDistances:
    def test_line_points_index0(self):
        pts = np.array([[0.0], [1.0], [3.0], [7.0]])
        nd = knn_distances(0, pts, 2)
        np.testing.assert_allclose(nd.distances, [1.0, 3.0])

    def test_line_points_index1(self):
        pts = np.array([[0.0], [1.0], [3.0], [7.0]])
        nd = knn_distances(1, pts, 3)
        np.testing.assert_allclose(nd.distances, [1.0, 2.0, 6.0])

    def test_grid_corner(self):
        pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        nd = knn_distances(0, pts, 3)
        np.testing.assert_allclose(nd.distances, [1.0, 1.0, np.sqrt(2.0)])

    def test_too_few_points(self):
        with pytest.raises(TooFewPointsError):
            knn_distances(0, np.zeros((3, 2)) + np.arange(3)[:, None], 3)

    def test_all_identical_points_error(self):
        with pytest.raises(TooFewPointsError):
            knn_distances(0, np.ones((5, 2)), 2)

    def test_clamp_policy_warns(self):
        pts = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
        with pytest.warns(ZeroDistanceWarning):
            nd = knn_distances(0, pts, 2, zero_distance_policy=CLAMP_EPSILON)
        assert nd.distances[0] == pytest.approx(1e-12)


class TestLidMle:
    def test_two_neighbor_closed_form(self):
        # ln ratios are -1 and 0, mean -1/2
        nd = NeighborDistances(np.array([1.0, np.e]), 2)
        assert lid_mle(nd) == pytest.approx(2.0, rel=1e-12)

    def test_geometric_progression(self):
        nd = NeighborDistances(np.array([2.0, 4.0, 8.0]), 3)
        assert lid_mle(nd) == pytest.approx(1.0 / np.log(2.0), rel=1e-12)

    def test_all_equal_diverges(self):
        with pytest.raises(DivergentEstimateError):
            lid_mle(NeighborDistances(np.array([2.0, 2.0, 2.0]), 3))

    def test_gaussian_cloud_recovers_dimension(self):
        # Monte Carlo oracle: generator intrinsic dimension is 5.
        rng = np.random.default_rng(42)
        pts = rng.standard_normal((2000, 5))
        summary = lid_summary(pts, LidConfig(m=20))
        assert 3.5 <= summary.lid_mean <= 6.5


class TestLidSummary:
    def test_sum_matches_per_point_loop(self):
        rng = np.random.default_rng(3)
        pts = rng.standard_normal((40, 6))
        cfg = LidConfig(m=5)
        expected = sum(lid_mle(knn_distances(i, pts, 5)) for i in range(40))
        summary = lid_summary(pts, cfg)
        assert summary.lid_sum == pytest.approx(expected, rel=1e-12)
        assert summary.lid_mean == pytest.approx(expected / 40, rel=1e-12)
        assert summary.point_count == 40 and summary.skipped == 0

    def test_gaussian_in_ambient_band(self):
        # 3-d generator embedded in 3 dims, 80 points: mean in [2.0, 4.5]
        rng = np.random.default_rng(11)
        pts = rng.standard_normal((80, 3))
        summary = lid_summary(pts, LidConfig(m=20))
        assert 2.0 <= summary.lid_mean <= 4.5

    def test_duplicates_dropped_before_search(self):
        rng = np.random.default_rng(5)
        base = rng.standard_normal((40, 4))
        doubled = np.vstack([base, base])
        result = module_lid(doubled, LidConfig(m=10))
        assert np.isfinite(result)
        assert result == pytest.approx(module_lid(base, LidConfig(m=10)), rel=1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(9)
        pts = rng.standard_normal((60, 8))
        a = module_lid(pts, LidConfig(m=12))
        b = module_lid(pts * 10.0, LidConfig(m=12))
        assert abs(a - b) / a < 1e-9

    def test_permutation_invariance(self):
        rng = np.random.default_rng(13)
        pts = rng.standard_normal((50, 5))
        perm = rng.permutation(50)
        a = module_lid(pts, LidConfig(m=10))
        b = module_lid(pts[perm], LidConfig(m=10))
        assert abs(a - b) < 1e-9

    def test_monotone_recovery_in_generator_dimension(self):
        # ambient 64, N=2000: mean LID strictly increasing in d
        rng = np.random.default_rng(21)
        means = []
        for d in (2, 5, 8):
            pts = np.zeros((2000, 64))
            pts[:, :d] = rng.standard_normal((2000, d))
            means.append(lid_summary(pts, LidConfig(m=20)).lid_mean)
        assert means[0] < means[1] < means[2]

    def test_too_few_points(self):
        with pytest.raises(TooFewPointsError):
            lid_summary(np.random.default_rng(0).standard_normal((10, 3)), LidConfig(m=20))


class TestLidConfig:
    def test_m_minimum(self):
        with pytest.raises(ValueError):
            LidConfig(m=1)

    def test_unknown_policy(self):
        with pytest.raises(ValueError):
            LidConfig(m=5, zero_distance_policy="ignore")
