import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import stats

from authsim.stats_core import (
    NoncentralChi2,
    RandomStream,
    as_generator,
    block_counts,
    db_to_linear,
    linear_to_db,
    nc_chi2_cdf,
    nc_chi2_quantile,
    parallel_map,
    sample_complex_gaussian,
    snr_db_to_variance,
    wilson_interval,
)


class TestRandomStream:
    def test_same_triple_replays(self):
        a = RandomStream(42, (1, 2)).generator().standard_normal(16)
        b = RandomStream(42, (1, 2)).generator().standard_normal(16)
        np.testing.assert_array_equal(a, b)

    def test_paths_are_disjoint(self):
        a = RandomStream(42, (1, 2)).generator().standard_normal(16)
        b = RandomStream(42, (1, 3)).generator().standard_normal(16)
        assert not np.array_equal(a, b)

    def test_substream_extends_path(self):
        child = RandomStream(7, (1,)).substream(2, 3)
        assert child == RandomStream(7, (1, 2, 3))

    def test_seed_changes_key(self):
        assert RandomStream(1).key() != RandomStream(2).key()

    def test_as_generator_passes_generators_through(self, rng):
        assert as_generator(rng) is rng


class TestComplexGaussian:
    def test_total_variance_split_evenly(self, stream):
        z = sample_complex_gaussian(200_000, 2.0, stream)
        assert_allclose(np.mean(np.abs(z) ** 2), 2.0, rtol=0.02)
        assert_allclose(np.var(z.real), 1.0, rtol=0.02)
        assert_allclose(np.var(z.imag), 1.0, rtol=0.02)
        assert abs(np.mean(z.real * z.imag)) < 0.01

    def test_per_channel_variance_broadcasts(self, stream):
        z = sample_complex_gaussian((100_000, 2), np.array([1.0, 4.0]), stream)
        assert_allclose(np.mean(np.abs(z) ** 2, axis=0), [1.0, 4.0], rtol=0.03)

    def test_fourth_moments_are_gaussian(self, stream):
        n, variance = 1_000_000, 2.0
        z = sample_complex_gaussian(n, variance, stream)
        # real part ~ N(0, 1): E x^4 = 3, Var x^4 = 105 - 9
        assert abs(np.mean(z.real**4) - 3.0) <= 5 * math.sqrt(96.0 / n)
        # |z|^2 ~ Exp(mean 2): E|z|^4 = 2 v^2, Var |z|^4 = 24 * 16 - 64
        assert abs(np.mean(np.abs(z) ** 4) - 2 * variance**2) <= 5 * math.sqrt(320.0 / n)

    def test_zero_variance_gives_zeros(self, stream):
        z = sample_complex_gaussian(8, 0.0, stream)
        np.testing.assert_array_equal(z, np.zeros(8, dtype=complex))

    def test_rejects_negative_variance(self, stream):
        with pytest.raises(ValueError):
            sample_complex_gaussian(4, -1.0, stream)

    def test_rejects_empty_sample(self, stream):
        with pytest.raises(ValueError):
            sample_complex_gaussian(0, 1.0, stream)


class TestNoncentralChi2:
    @pytest.mark.parametrize("x", [0.1, 1.0, 5.0, 18.4207, 40.0])
    def test_central_two_dof_is_exponential(self, x):
        assert abs(nc_chi2_cdf(x, NoncentralChi2(2)) - (1.0 - math.exp(-x / 2.0))) <= 1e-10

    @pytest.mark.parametrize("dof, lam", [(2, 0.5), (6, 3.5), (12, 20.0)])
    def test_matches_scipy(self, dof, lam):
        x = np.array([0.5, 2.0, 8.0, 20.0, 50.0])
        assert_allclose(nc_chi2_cdf(x, NoncentralChi2(dof, lam)), stats.ncx2.cdf(x, dof, lam), atol=1e-8)

    def test_nonpositive_x_has_zero_mass(self):
        assert nc_chi2_cdf(0.0, NoncentralChi2(2, 1.0)) == 0.0
        assert nc_chi2_cdf(-3.0, NoncentralChi2(4)) == 0.0

    def test_array_in_array_out(self):
        out = nc_chi2_cdf(np.linspace(0.0, 10.0, 7), NoncentralChi2(4, 1.0))
        assert out.shape == (7,)
        assert np.all(np.diff(out) > 0)

    @pytest.mark.parametrize("dof", [2, 6])
    def test_nonincreasing_in_noncentrality(self, dof):
        lams = np.linspace(0.0, 30.0, 31)
        for x in (0.5, 2.0, 8.0, 20.0, 45.0):
            values = np.array([nc_chi2_cdf(x, NoncentralChi2(dof, lam)) for lam in lams])
            assert np.all(np.diff(values) <= 1e-10)

    def test_matches_sampled_squares(self, rng):
        # (Z1 + 1)^2 + Z2^2 is noncentral chi-square with 2 dof and lambda 1
        n = 4_000_000
        hits = 0
        for _ in range(4):
            z = rng.standard_normal((n // 4, 2))
            hits += int(np.sum((z[:, 0] + 1.0) ** 2 + z[:, 1] ** 2 <= 2.0))
        expected = nc_chi2_cdf(2.0, NoncentralChi2(2, 1.0))
        assert abs(hits / n - expected) <= 4 * math.sqrt(expected * (1 - expected) / n)

    def test_median_matches_sampled_squares(self, rng):
        n = 1_000_000
        median = nc_chi2_quantile(0.5, NoncentralChi2(4, 5.0))
        z = rng.standard_normal((n, 4))
        z[:, 0] += math.sqrt(5.0)
        below = np.mean(np.sum(z**2, axis=1) <= median)
        assert abs(below - 0.5) <= 4 * math.sqrt(0.25 / n)

    @pytest.mark.parametrize("dof, lam", [(2, 0.0), (6, 1.2), (12, 10.0)])
    @pytest.mark.parametrize("p", [0.5, 0.9, 0.9999])
    def test_quantile_roundtrip(self, dof, lam, p):
        dist = NoncentralChi2(dof, lam)
        assert abs(nc_chi2_cdf(nc_chi2_quantile(p, dist), dist) - p) <= 1e-8

    def test_quantile_central_two_dof(self):
        assert_allclose(nc_chi2_quantile(0.9999, NoncentralChi2(2)), -2.0 * math.log(1e-4), rtol=1e-9)

    def test_quantile_grows_with_noncentrality(self):
        assert nc_chi2_quantile(0.99, NoncentralChi2(4, 2.0)) > nc_chi2_quantile(0.99, NoncentralChi2(4))

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.1])
    def test_quantile_rejects_degenerate_probability(self, p):
        with pytest.raises(ValueError):
            nc_chi2_quantile(p, NoncentralChi2(2))

    def test_rejects_bad_parameters(self):
        with pytest.raises(ValueError):
            NoncentralChi2(0)
        with pytest.raises(ValueError):
            NoncentralChi2(2, -1.0)


class TestWilsonInterval:
    def test_half_proportion(self):
        lo, hi = wilson_interval(50, 100)
        assert lo == pytest.approx(0.4038, abs=1e-3)
        assert hi == pytest.approx(0.5962, abs=1e-3)

    def test_zero_events_starts_at_zero(self):
        lo, hi = wilson_interval(0, 1000)
        assert lo == 0.0
        assert 1.0 / 1000 < hi < 0.01

    def test_no_trials(self):
        assert wilson_interval(0, 0) == (0.0, 1.0)

    def test_coverage_of_rigged_detector(self):
        rng = np.random.default_rng(2024)
        p, n = 0.1, 500
        events = rng.binomial(n, p, size=1000)
        covered = sum(lo <= p <= hi for lo, hi in (wilson_interval(int(e), n) for e in events))
        assert covered >= 930

    def test_estimate_inside_interval(self):
        for events in (0, 1, 7, 99, 100):
            lo, hi = wilson_interval(events, 100)
            assert lo <= events / 100 <= hi


class TestHelpers:
    def test_decibels(self):
        assert db_to_linear(20.0) == pytest.approx(100.0)
        assert linear_to_db(1000.0) == pytest.approx(30.0)
        assert snr_db_to_variance(20.0) == pytest.approx(0.01)
        assert snr_db_to_variance(math.inf) == 0.0

    def test_block_counts(self):
        assert block_counts(10, 4) == [4, 4, 2]
        assert block_counts(8, 4) == [4, 4]
        assert block_counts(0, 4) == []

    def test_parallel_map_keeps_order(self):
        items = list(range(12))
        expected = [math.factorial(i) for i in items]
        assert parallel_map(math.factorial, items, workers=1) == expected
        assert parallel_map(math.factorial, items, workers=2) == expected

    def test_parallel_map_rejects_zero_workers(self):
        with pytest.raises(ValueError):
            parallel_map(abs, [1], workers=0)
