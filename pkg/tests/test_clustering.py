"""KDE oracles, valley clustering and pruning-rate assignment."""

import time

import numpy as np
import pytest

from fedsim.clustering import (
    ClientProfile,
    DensityEstimate,
    apply_durations,
    assign_pruning_rates,
    cluster_by_density,
    cluster_profiles,
    format_cluster_report,
    gaussian_kernel,
    kde_density,
    load_durations,
    measure_durations,
    refine_clusters,
    save_durations,
    silverman_bandwidth,
)
from fedsim.errors import ConfigError


def brute_force_kde(grid, sample, h):
    """The textbook double loop the vectorised estimator must reproduce."""

    out = np.zeros_like(grid)
    for gi, g in enumerate(grid):
        total = 0.0
        for x in sample:
            u = (g - x) / h
            total += np.exp(-0.5 * u * u) / np.sqrt(2 * np.pi)
        out[gi] = total / (len(sample) * h)
    return out


class TestGaussianKernel:
    def test_quadrature_integrates_to_one(self):
        u = np.linspace(-8, 8, 100_001)
        integral = np.trapezoid(gaussian_kernel(u), u)
        np.testing.assert_allclose(integral, 1.0, atol=1e-6)

    def test_symmetry_and_peak(self):
        u = np.linspace(0.1, 5, 50)
        np.testing.assert_array_equal(gaussian_kernel(u), gaussian_kernel(-u))
        np.testing.assert_allclose(gaussian_kernel(0.0), 1 / np.sqrt(2 * np.pi), rtol=1e-15)


class TestBandwidth:
    def test_matches_silverman_formula(self):
        rng = np.random.default_rng(42)
        x = rng.normal(3.0, 2.0, size=100)
        std = np.std(x, ddof=1)
        iqr = np.percentile(x, 75) - np.percentile(x, 25)
        expected = 0.9 * min(std, iqr / 1.34) * 100 ** (-0.2)
        np.testing.assert_allclose(silverman_bandwidth(x), expected, rtol=1e-12)

    def test_degenerate_sample_gets_positive_floor(self):
        assert silverman_bandwidth(np.full(10, 7.0)) > 0
        assert silverman_bandwidth(np.array([4.0])) > 0


class TestKdeDensity:
    def test_matches_brute_force_to_1e12(self):
        rng = np.random.default_rng(7)
        sample = rng.normal(5, 2, size=40)
        est = kde_density(sample, bandwidth=0.8)
        reference = brute_force_kde(est.grid, sample, 0.8)
        np.testing.assert_allclose(est.density, reference, rtol=1e-12, atol=1e-15)

    def test_grid_span_and_size(self):
        sample = np.array([2.0, 4.0, 9.0])
        est = kde_density(sample, bandwidth=0.5)
        assert est.grid.size == 512
        np.testing.assert_allclose(est.grid[0], 2.0 - 1.5)
        np.testing.assert_allclose(est.grid[-1], 9.0 + 1.5)

    def test_density_integrates_to_about_one(self):
        rng = np.random.default_rng(11)
        sample = rng.normal(0, 1, size=200)
        est = kde_density(sample)
        np.testing.assert_allclose(np.trapezoid(est.density, est.grid), 1.0, atol=5e-3)


class TestValleyClustering:
    def test_boundary_tie_goes_to_faster_cluster(self):
        grid = np.arange(11, dtype=np.float64)
        density = np.array([5, 4, 3, 2, 1, 0.5, 1, 2, 3, 4, 5], dtype=np.float64)
        est = DensityEstimate(grid, density, 1.0)
        assignment = cluster_by_density(est, np.array([4.9, 5.0, 5.1]))
        np.testing.assert_array_equal(assignment.boundaries, [5.0])
        np.testing.assert_array_equal(assignment.cluster_of, [0, 0, 1])

    def test_plateau_valley_uses_midpoint(self):
        grid = np.arange(7, dtype=np.float64)
        density = np.array([5, 4, 1, 1, 1, 4, 5], dtype=np.float64)
        est = DensityEstimate(grid, density, 1.0)
        assignment = cluster_by_density(est, np.array([1.0, 5.0]))
        np.testing.assert_array_equal(assignment.boundaries, [3.0])

    def test_trimodal_sample_recovers_three_clusters(self):
        rng = np.random.default_rng(2024)
        means = [2.0, 8.0, 30.0]
        durations = np.concatenate([rng.normal(m, 0.3, size=10) for m in means])
        truth = np.repeat([0, 1, 2], 10)
        start = time.perf_counter()
        assignment = assign_pruning_rates(refine_clusters(durations))
        elapsed = time.perf_counter() - start
        assert elapsed < 1.0
        assert assignment.cluster_count == 3
        np.testing.assert_array_equal(assignment.cluster_of, truth)
        # brute force: every reported boundary separates generating components
        comp_max = [durations[truth == c].max() for c in range(3)]
        comp_min = [durations[truth == c].min() for c in range(3)]
        for b in assignment.boundaries:
            assert all(b < comp_min[c] or b > comp_max[c] for c in range(3))
        expected_rates = assignment.fastest_mean / assignment.cluster_means
        np.testing.assert_allclose(assignment.rates, expected_rates, atol=1e-4)
        assert assignment.rates[0] == 1.0

    def test_single_pass_resolves_trimodal_at_moderate_bandwidth(self):
        rng = np.random.default_rng(2024)
        durations = np.concatenate([rng.normal(m, 0.3, size=10) for m in (2.0, 8.0, 30.0)])
        est = kde_density(durations, bandwidth=0.5)
        assignment = cluster_by_density(est, durations)
        assert assignment.cluster_count == 3
        np.testing.assert_array_equal(assignment.cluster_of, np.repeat([0, 1, 2], 10))

    def test_refinement_leaves_unimodal_sample_alone(self):
        rng = np.random.default_rng(5)
        durations = rng.normal(10, 0.5, size=30)
        single = cluster_by_density(kde_density(durations), durations)
        refined = refine_clusters(durations)
        assert single.cluster_count == 1
        assert refined.cluster_count == 1

    def test_refinement_is_permutation_invariant(self):
        rng = np.random.default_rng(12)
        durations = np.concatenate(
            [rng.normal(m, 0.3, size=8) for m in (2.0, 8.0, 30.0)]
        )
        base = refine_clusters(durations)
        perm = rng.permutation(durations.size)
        shuffled = refine_clusters(durations[perm])
        np.testing.assert_array_equal(shuffled.cluster_of, base.cluster_of[perm])

    def test_membership_is_permutation_invariant(self):
        rng = np.random.default_rng(3)
        durations = np.concatenate([rng.normal(2, 0.2, 8), rng.normal(10, 0.2, 8)])
        est = kde_density(durations)
        base = cluster_by_density(est, durations)
        perm = rng.permutation(durations.size)
        shuffled = cluster_by_density(kde_density(durations[perm]), durations[perm])
        np.testing.assert_array_equal(shuffled.cluster_of, base.cluster_of[perm])

    def test_duplication_invariance_at_fixed_bandwidth(self):
        rng = np.random.default_rng(4)
        durations = np.concatenate([rng.normal(3, 0.2, 6), rng.normal(12, 0.2, 6)])
        est = kde_density(durations, bandwidth=0.5)
        base = cluster_by_density(est, durations)
        doubled = np.concatenate([durations, durations])
        est2 = kde_density(doubled, bandwidth=0.5)
        dup = cluster_by_density(est2, doubled)
        np.testing.assert_array_equal(dup.cluster_of[: durations.size], base.cluster_of)
        np.testing.assert_array_equal(dup.cluster_of[durations.size :], base.cluster_of)

    def test_unimodal_sample_is_one_cluster(self):
        rng = np.random.default_rng(5)
        durations = rng.normal(10, 0.5, size=30)
        assignment = assign_pruning_rates(cluster_by_density(kde_density(durations), durations))
        assert assignment.cluster_count == 1
        np.testing.assert_array_equal(assignment.rates, [1.0])

    def test_cluster_means_strictly_increase(self):
        rng = np.random.default_rng(6)
        durations = np.concatenate(
            [rng.normal(m, 0.3, size=12) for m in (1.5, 6.0, 14.0, 40.0)]
        )
        assignment = cluster_by_density(kde_density(durations), durations)
        assert np.all(np.diff(assignment.cluster_means) > 0)


class TestRates:
    def test_rates_are_fastest_over_mean_and_monotone(self):
        rng = np.random.default_rng(8)
        durations = np.concatenate([rng.normal(m, 0.2, 10) for m in (2.0, 5.0, 9.0)])
        assignment = assign_pruning_rates(cluster_by_density(kde_density(durations), durations))
        np.testing.assert_allclose(
            assignment.rates, assignment.fastest_mean / assignment.cluster_means, rtol=1e-12
        )
        assert assignment.rates[0] == 1.0
        assert np.all(np.diff(assignment.rates) < 0)
        assert np.all(assignment.rates <= 1.0)

    def test_ladder_snapping_nearest(self):
        grid = np.arange(11, dtype=np.float64)
        density = np.array([5, 4, 3, 2, 1, 0.5, 1, 2, 3, 4, 5], dtype=np.float64)
        est = DensityEstimate(grid, density, 1.0)
        assignment = cluster_by_density(est, np.array([2.0, 2.0, 8.0, 8.0]))
        snapped = assign_pruning_rates(assignment, ladder=[1.0, 0.8, 0.6])
        # raw rates are [1.0, 0.25] -> snapped to [1.0, 0.6]
        np.testing.assert_array_equal(snapped.rates, [1.0, 0.6])

    def test_ladder_tie_prefers_smaller(self):
        grid = np.arange(11, dtype=np.float64)
        density = np.array([5, 4, 3, 2, 1, 0.5, 1, 2, 3, 4, 5], dtype=np.float64)
        est = DensityEstimate(grid, density, 1.0)
        assignment = cluster_by_density(est, np.array([3.5, 3.5, 10.0, 10.0]))
        # raw slow rate = 3.5/10 = 0.35, equidistant from 0.3 and 0.4
        snapped = assign_pruning_rates(assignment, ladder=[0.3, 0.4, 1.0])
        np.testing.assert_array_equal(snapped.rates, [1.0, 0.3])

    def test_bad_ladder_rejected(self):
        grid = np.arange(3, dtype=np.float64)
        est = DensityEstimate(grid, np.array([1.0, 0.5, 1.0]), 1.0)
        assignment = cluster_by_density(est, np.array([0.5, 1.5]))
        with pytest.raises(ConfigError):
            assign_pruning_rates(assignment, ladder=[0.0, 1.0])
        with pytest.raises(ConfigError):
            assign_pruning_rates(assignment, ladder=[0.5, 1.2])


class TestProfiling:
    def _profiles(self, speeds):
        return [ClientProfile(i, s, data_size=10) for i, s in enumerate(speeds)]

    def test_zero_noise_is_exact_product(self):
        measured = measure_durations(self._profiles([1.0, 2.0, 4.0]), 3.0, 0.0, seed=0)
        np.testing.assert_allclose(
            [p.measured_duration for p in measured], [3.0, 6.0, 12.0], rtol=1e-15
        )

    def test_noise_is_bounded_and_seeded(self):
        profiles = self._profiles([2.0] * 200)
        measured = measure_durations(profiles, 5.0, 0.05, seed=1)
        durations = np.array([p.measured_duration for p in measured])
        assert np.all(durations >= 10.0 * (1 - 0.15) - 1e-12)
        assert np.all(durations <= 10.0 * (1 + 0.15) + 1e-12)
        again = measure_durations(profiles, 5.0, 0.05, seed=1)
        np.testing.assert_array_equal(durations, [p.measured_duration for p in again])

    def test_noise_sd_bounds(self):
        with pytest.raises(ConfigError):
            measure_durations(self._profiles([1.0]), 1.0, 0.34, seed=0)
        with pytest.raises(ConfigError):
            measure_durations(self._profiles([1.0]), 0.0, 0.01, seed=0)

    def test_durations_file_round_trip(self, tmp_path):
        measured = measure_durations(self._profiles([1.0, 3.0, 9.0]), 2.0, 0.05, seed=7)
        path = tmp_path / "durations.csv"
        save_durations(path, measured)
        loaded = load_durations(path)
        reattached = apply_durations(self._profiles([1.0, 3.0, 9.0]), loaded)
        for a, b in zip(measured, reattached):
            assert a.measured_duration == b.measured_duration  # repr round-trip is exact

    def test_durations_file_errors(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("0,1.5\nnot a line\n")
        with pytest.raises(ConfigError, match="bad.csv:2"):
            load_durations(path)
        path.write_text("0,1.5\n0,2.5\n")
        with pytest.raises(ConfigError, match="duplicate"):
            load_durations(path)
        path.write_text("0,-3\n")
        with pytest.raises(ConfigError, match="positive"):
            load_durations(path)
        with pytest.raises(ConfigError, match="exist"):
            load_durations(tmp_path / "missing.csv")
        path.write_text("# only comments\n")
        with pytest.raises(ConfigError, match="no duration"):
            load_durations(path)

    def test_apply_durations_id_mismatch(self, tmp_path):
        profiles = self._profiles([1.0, 2.0])
        with pytest.raises(ConfigError, match="lacks"):
            apply_durations(profiles, {0: 1.0})
        with pytest.raises(ConfigError, match="unknown"):
            apply_durations(profiles, {0: 1.0, 1: 2.0, 5: 9.0})

    def test_end_to_end_profile_clustering_report(self):
        profiles = self._profiles([1.0] * 5 + [2.5] * 5)
        measured = measure_durations(profiles, 4.0, 0.02, seed=3)
        assignment = cluster_profiles(measured, ladder=[1.0, 0.8, 0.6, 0.4])
        assert assignment.cluster_count == 2
        assert assignment.rates[0] == 1.0
        assert assignment.rates[1] == 0.4  # 1/2.5
        report = format_cluster_report(assignment, measured)
        assert "clusters: 2" in report
        assert "cluster 0" in report and "cluster 1" in report
        assert "rate=0.4000" in report
