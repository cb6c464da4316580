import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smcd import ConfigError, NoiseSchedule, ShapeError, ddpm_step, make_schedule, q_sample


def linear_betas_oracle(T, b0, b1):
    if T == 1:
        return np.array([b0])
    return np.array([b0 + i * (b1 - b0) / (T - 1) for i in range(T)])


class TestMakeSchedule:
    def test_single_step(self):
        s = make_schedule(1, 0.1, 0.1)
        assert s.betas.tolist() == [0.1]
        assert s.alpha_bars.tolist() == pytest.approx([0.9])

    def test_linear_interpolation_endpoints_inclusive(self):
        s = make_schedule(4, 0.1, 0.2)
        np.testing.assert_allclose(s.betas, linear_betas_oracle(4, 0.1, 0.2), rtol=1e-12)

    def test_hand_multiplied_cumulative_product(self):
        s = make_schedule(4, 0.1, 0.2)
        expected = np.cumprod(1.0 - linear_betas_oracle(4, 0.1, 0.2))
        np.testing.assert_allclose(s.alpha_bars, expected, rtol=1e-12)
        assert s.alpha_bars[3] == pytest.approx(0.52, abs=1e-4)

    @pytest.mark.parametrize("args", [(0, 0.1, 0.2), (5, 0.0, 0.2), (5, 0.3, 0.2),
                                      (5, 0.1, 1.0), (5, -0.1, 0.2)])
    def test_rejects_bad_arguments(self, args):
        with pytest.raises(ConfigError):
            make_schedule(*args)

    def test_pure(self):
        a, b = make_schedule(50, 1e-4, 0.02), make_schedule(50, 1e-4, 0.02)
        assert a.betas.tobytes() == b.betas.tobytes()
        assert a.alpha_bars.tobytes() == b.alpha_bars.tobytes()

    @settings(max_examples=50, deadline=None)
    @given(T=st.integers(2, 300), b0=st.floats(1e-6, 0.4), frac=st.floats(0.0, 1.0))
    def test_invariants_hold_for_any_valid_schedule(self, T, b0, frac):
        b1 = b0 + frac * (0.999 - b0)
        s = make_schedule(T, b0, b1)
        assert np.all(s.betas > 0) and np.all(s.betas < 1)
        assert np.all(np.diff(s.betas) >= 0)
        assert np.all(np.diff(s.alpha_bars) < 0)
        np.testing.assert_allclose(s.alpha_bars, np.cumprod(s.alphas), rtol=1e-12)
        snr = s.alpha_bars / (1.0 - s.alpha_bars)
        assert np.all(np.diff(snr) < 0)


class TestQSample:
    def test_zero_noise(self):
        s = make_schedule(10, 0.1, 0.2)
        z0 = np.full((2, 3), 1.5)
        out = q_sample(z0, 4, np.zeros_like(z0), s)
        np.testing.assert_allclose(out, math.sqrt(s.alpha_bars[4]) * z0, rtol=1e-15)

    def test_degenerate_alpha_bar_one_is_identity(self):
        s = NoiseSchedule(T=1, betas=np.array([0.0]), alphas=np.array([1.0]),
                          alpha_bars=np.array([1.0]))
        z0 = np.array([3.0, -2.0])
        np.testing.assert_array_equal(q_sample(z0, 0, np.ones_like(z0), s), z0)

    def test_scalar_closed_form(self):
        s = NoiseSchedule(T=1, betas=np.array([0.5]), alphas=np.array([0.5]),
                          alpha_bars=np.array([0.25]))
        out = q_sample(np.array([2.0]), 0, np.array([1.0]), s)
        assert out[0] == pytest.approx(0.5 * 2.0 + math.sqrt(0.75), abs=1e-12)
        assert out[0] == pytest.approx(1.8660, abs=1e-4)

    def test_shape_mismatch_rejected(self):
        s = make_schedule(10)
        with pytest.raises(ShapeError):
            q_sample(np.zeros(3), 0, np.zeros(4), s)

    def test_monte_carlo_moments(self):
        s = make_schedule(100)
        rng = np.random.default_rng(7)
        z0 = np.array([1.7])
        for t in (1, 50, 98):
            draws = np.array([q_sample(z0, t, rng.standard_normal(1), s)[0]
                              for _ in range(10_000)])
            abar = s.alpha_bars[t]
            se = math.sqrt(1.0 - abar) / math.sqrt(draws.size)
            assert abs(draws.mean() - math.sqrt(abar) * 1.7) < 4 * se
            assert abs(draws.var() - (1.0 - abar)) < 0.05 * (1.0 - abar)


class TestDdpmStep:
    def test_final_step_ignores_noise(self):
        s = make_schedule(10, 0.1, 0.2)
        z = np.array([0.4, -0.2])
        eps = np.array([0.1, 0.3])
        a = ddpm_step(z, eps, 0, np.full(2, 100.0), s)
        b = ddpm_step(z, eps, 0, np.full(2, -5.0), s)
        np.testing.assert_array_equal(a, b)

    def test_posterior_mean_matches_scalar_oracle(self):
        s = make_schedule(20, 0.05, 0.3)
        rng = np.random.default_rng(3)
        for t in (1, 7, 19):
            z0, eps = rng.standard_normal(2)
            z_t = q_sample(np.array([z0]), t, np.array([eps]), s)
            got = ddpm_step(z_t, np.array([eps]), t, np.zeros(1), s)
            beta, alpha, abar = s.betas[t], s.alphas[t], s.alpha_bars[t]
            want = (z_t[0] - beta / math.sqrt(1 - abar) * eps) / math.sqrt(alpha)
            assert got[0] == pytest.approx(want, rel=1e-12)

    def test_noop_when_alpha_one(self):
        s = NoiseSchedule(T=1, betas=np.array([0.0]), alphas=np.array([1.0]),
                          alpha_bars=np.array([1.0]))
        z = np.array([1.25, -0.5])
        np.testing.assert_array_equal(ddpm_step(z, np.array([9.0, 9.0]), 0, None, s), z)

    def test_variance_is_beta(self):
        s = make_schedule(10, 0.1, 0.2)
        z = np.zeros(1)
        eps = np.zeros(1)
        out = ddpm_step(z, eps, 5, np.ones(1), s)
        base = ddpm_step(z, eps, 5, np.zeros(1), s)
        assert out[0] - base[0] == pytest.approx(math.sqrt(s.betas[5]), rel=1e-12)

    def test_bad_t_rejected(self):
        s = make_schedule(10)
        with pytest.raises(ConfigError):
            ddpm_step(np.zeros(1), np.zeros(1), 10, np.zeros(1), s)
