import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from authsim.channel_model import (
    Hypothesis,
    SystemParams,
    draw_channel,
    draw_trials,
    eve_observations,
    forged_observation,
    legit_observation,
    setup_estimate,
)
from authsim.stats_core import RandomStream


def _identity_forge(h_ae, h_eb):
    return h_ae


class TestSystemParams:
    def test_uniform_from_decibels(self, table2_params):
        assert table2_params.alpha == (1.0,)
        assert table2_params.sigma2_i == pytest.approx(10 ** -1.5)
        assert table2_params.sigma2_ii == pytest.approx(0.01)
        assert table2_params.snr_ii_db == pytest.approx(20.0)
        assert table2_params.power_delay == (1.0,)

    def test_noiseless_phase_ii_has_infinite_snr(self):
        params = SystemParams.uniform(2, rho_ae=0.1, snr_i_db=15.0, sigma2_ii=0.0)
        assert params.snr_ii_db == math.inf

    @pytest.mark.parametrize(
        "changes",
        [
            {"alpha": (1.5,)},
            {"alpha": (1.0, 1.0)},
            {"rho_ae": -0.1},
            {"sigma2_i": -1.0},
            {"n_channels": 0, "alpha": ()},
            {"power_delay": (1.0, 2.0)},
        ],
    )
    def test_rejects_invalid_fields(self, changes):
        base = dict(n_channels=1, alpha=(1.0,), sigma2_i=0.1, sigma2_ii=0.1, rho_ae=0.5)
        with pytest.raises(ValueError):
            SystemParams(**{**base, **changes})

    def test_uniform_needs_noise_levels(self):
        with pytest.raises(ValueError):
            SystemParams.uniform(1, rho_ae=0.1, snr_i_db=15.0)

    def test_with_channels_and_alpha(self, table2_params):
        wide = table2_params.with_channels(4).with_alpha(0.8)
        assert wide.n_channels == 4
        assert wide.alpha == (0.8,) * 4
        assert wide.power_delay == (1.0,) * 4
        assert wide.rho_ae == table2_params.rho_ae


class TestGenerators:
    def test_channel_power(self, stream):
        params = SystemParams(2, (1.0, 1.0), 0.0, 0.0, 0.5, power_delay=(1.0, 0.25))
        h = draw_channel(params, stream, size=100_000)
        assert h.shape == (100_000, 2)
        assert_allclose(np.mean(np.abs(h) ** 2, axis=0), [1.0, 0.25], rtol=0.03)

    def test_flat_noiseless_observation_equals_channel(self, stream):
        params = SystemParams.uniform(3, 1.0, rho_ae=0.5, sigma2_i=0.0, sigma2_ii=0.0)
        h = draw_channel(params, stream.substream(0))
        np.testing.assert_array_equal(legit_observation(h, params, stream.substream(1)), h)
        np.testing.assert_array_equal(setup_estimate(h, params, stream.substream(2)), h)

    def test_setup_error_variance_at_fifteen_decibels(self, stream):
        params = SystemParams.uniform(3, rho_ae=0.5, snr_i_db=15.0, sigma2_ii=0.0)
        h = draw_channel(params, stream.substream(0), size=100_000)
        error = setup_estimate(h, params, stream.substream(1)) - h
        assert_allclose(np.mean(np.sum(np.abs(error) ** 2, axis=1)), 3 * 10**-1.5, rtol=0.03)

    def test_fully_faded_observation_forgets_the_channel(self, stream):
        params = SystemParams.uniform(1, 0.0, rho_ae=0.5, sigma2_i=0.0, sigma2_ii=0.01)
        h = draw_channel(params, stream.substream(0), size=100_000)
        obs = legit_observation(h, params, stream.substream(1))
        corr = np.mean(obs * np.conj(h)) / math.sqrt(np.mean(np.abs(obs) ** 2) * np.mean(np.abs(h) ** 2))
        assert abs(corr) < 0.02

    def test_time_correlation(self, stream):
        params = SystemParams.uniform(1, 0.8, rho_ae=0.5, sigma2_i=0.0, sigma2_ii=0.0)
        h = draw_channel(params, stream.substream(0), size=200_000)
        obs = legit_observation(h, params, stream.substream(1))
        assert_allclose(np.mean(obs * np.conj(h)).real, 0.8, atol=0.01)
        assert_allclose(np.mean(np.abs(obs) ** 2), 1.0, rtol=0.02)

    def test_eve_spatial_correlation(self, stream):
        params = SystemParams.uniform(1, rho_ae=0.6, rho_eb=0.2, sigma2_i=0.0, sigma2_ii=0.0)
        h = draw_channel(params, stream.substream(0), size=200_000)
        h_ae, h_eb = eve_observations(h, params, stream.substream(1))
        assert_allclose(np.mean(h_ae * np.conj(h)).real, 0.6, atol=0.01)
        assert_allclose(np.mean(h_eb * np.conj(h)).real, 0.2, atol=0.01)
        assert_allclose(np.mean(np.abs(h_ae) ** 2), 1.0, rtol=0.02)

    def test_perfectly_correlated_eve_sees_the_channel(self, stream):
        params = SystemParams.uniform(2, rho_ae=1.0, sigma2_i=0.0, sigma2_ii=0.0)
        h = draw_channel(params, stream.substream(0))
        h_ae, _ = eve_observations(h, params, stream.substream(1))
        assert_allclose(h_ae, h)

    def test_noiseless_forgery_is_exact(self, stream):
        params = SystemParams.uniform(2, rho_ae=0.5, sigma2_i=0.1, sigma2_ii=0.0)
        g = np.array([1 + 1j, -2j])
        np.testing.assert_array_equal(forged_observation(g, params, stream), g)

    def test_rejects_length_mismatch(self, stream, table2_params):
        with pytest.raises(ValueError):
            legit_observation(np.zeros(2, dtype=complex), table2_params, stream)


class TestDrawTrials:
    def test_shapes_and_truth(self, stream, table2_params):
        sample = draw_trials(table2_params.with_channels(3), stream, 10, Hypothesis.H0)
        assert sample.observation.shape == (10, 3)
        assert sample.h_ab_hat.shape == (10, 3)
        assert sample.truth is Hypothesis.H0

    def test_replays_for_the_same_stream(self, table2_params):
        a = draw_trials(table2_params, RandomStream(9, (3,)), 50, Hypothesis.H0)
        b = draw_trials(table2_params, RandomStream(9, (3,)), 50, Hypothesis.H0)
        np.testing.assert_array_equal(a.observation, b.observation)

    def test_h1_needs_forge(self, stream, table2_params):
        with pytest.raises(ValueError):
            draw_trials(table2_params, stream, 4, Hypothesis.H1)

    def test_h1_batches_do_not_depend_on_alpha(self, table2_params):
        params = table2_params.with_channels(3)
        flat = draw_trials(params, RandomStream(5), 100, Hypothesis.H1, forge=_identity_forge)
        fading = draw_trials(params.with_alpha(0.8), RandomStream(5), 100, Hypothesis.H1, forge=_identity_forge)
        np.testing.assert_array_equal(flat.observation, fading.observation)

    def test_h0_and_h1_share_channel_and_reference(self, table2_params):
        h0 = draw_trials(table2_params, RandomStream(5), 20, Hypothesis.H0)
        h1 = draw_trials(table2_params, RandomStream(5), 20, Hypothesis.H1, forge=_identity_forge)
        np.testing.assert_array_equal(h0.h_ab, h1.h_ab)
        np.testing.assert_array_equal(h0.h_ab_hat, h1.h_ab_hat)
        np.testing.assert_array_equal(h0.h_ae_hat, h1.h_ae_hat)

    def test_eve_estimates_share_their_residual(self, stream):
        params = SystemParams(2, (1.0, 1.0), 0.0, 0.0, 0.6, rho_eb=0.3, power_delay=(1.0, 0.25))
        sample = draw_trials(params, stream, 200_000, Hypothesis.H0)
        r_ae = sample.h_ae_hat - params.rho_ae * sample.h_ab
        r_eb = sample.h_eb_hat - params.rho_eb * sample.h_ab
        expected = math.sqrt(1 - 0.6**2) * math.sqrt(1 - 0.3**2) * np.array([1.0, 0.25])
        cross = np.mean(r_ae * np.conj(r_eb), axis=0)
        assert_allclose(cross.real, expected, atol=0.01)
        assert_allclose(cross.imag, 0.0, atol=0.01)

    def test_fixed_realization_is_broadcast(self, stream, table2_params):
        h = np.array([0.3 - 0.4j])
        sample = draw_trials(table2_params, stream, 6, Hypothesis.H0, h_ab=h)
        np.testing.assert_array_equal(sample.h_ab, np.broadcast_to(h, (6, 1)))
