import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from guided_i2i.errors import ConfigError, DimensionError
from guided_i2i.schedule import (
    REFERENCE_BETA_END,
    REFERENCE_BETA_START,
    REFERENCE_STEPS,
    forward_noise,
    make_linear_schedule,
    sample_noise_level,
)


def product_loop_gamma(beta_start, beta_end, steps):
    """Independent oracle: plain-float betas and a running product."""
    out, g = [1.0], 1.0
    for i in range(steps):
        beta = beta_start + (beta_end - beta_start) * i / (steps - 1)
        g *= 1.0 - beta
        out.append(g)
    return out


def test_reference_schedule_defaults():
    s = make_linear_schedule()
    assert (REFERENCE_BETA_START, REFERENCE_BETA_END, REFERENCE_STEPS) == (1e-5, 1e-3, 2000)
    assert s.T == 2000
    assert s.beta[0] == pytest.approx(1e-5, abs=1e-18)
    assert s.beta[-1] == pytest.approx(1e-3, abs=1e-18)


def test_reference_gamma_matches_product_loop():
    s = make_linear_schedule(1e-5, 1e-3, 2000)
    oracle = product_loop_gamma(1e-5, 1e-3, 2000)
    np.testing.assert_allclose(s.gamma, oracle, rtol=0, atol=1e-12)


def test_single_step():
    s = make_linear_schedule(0.5, 0.5, 1)
    assert s.gamma.tolist() == [1.0, 0.5]


@pytest.mark.parametrize("args", [(0.0, 0.1, 10), (0.2, 0.1, 10), (0.1, 1.0, 10), (0.1, 0.2, 0), (-1e-3, 0.1, 5)])
def test_bad_bounds(args):
    with pytest.raises(ConfigError):
        make_linear_schedule(*args)


def test_schedule_is_immutable():
    s = make_linear_schedule(1e-4, 0.02, 10)
    with pytest.raises(ValueError):
        s.gamma[1] = 0.3


@settings(max_examples=50, deadline=None)
@given(
    start=st.floats(1e-6, 0.2),
    span=st.floats(0.0, 0.5),
    steps=st.integers(1, 300),
)
def test_schedule_invariants(start, span, steps):
    end = min(start + span, 0.9)
    s = make_linear_schedule(start, end, steps)
    assert np.all((s.beta > 0) & (s.beta < 1))
    np.testing.assert_array_equal(s.alpha, 1.0 - s.beta)
    assert s.gamma[0] == 1.0 and s.gamma[-1] > 0
    assert np.all(np.diff(s.gamma) < 0)
    for t in range(1, steps + 1):
        assert s.gamma[t] == s.gamma[t - 1] * s.alpha[t - 1]


class TestSampleNoiseLevel:
    def test_singleton(self):
        s = make_linear_schedule(0.3, 0.3, 1)
        rng = np.random.default_rng(0)
        for _ in range(20):
            t, g = sample_noise_level(s, rng)
            assert (t, g) == (1, s.gamma[1])

    def test_monte_carlo_mean(self):
        s = make_linear_schedule(5e-4, 0.1, 200)
        _, g = sample_noise_level(s, np.random.default_rng(7), size=100_000)
        target = s.gamma[1:].mean()
        se = s.gamma[1:].std() / np.sqrt(g.size)
        assert abs(g.mean() - target) < 3 * se

    def test_uniform_support(self):
        s = make_linear_schedule(1e-4, 0.02, 5)
        t, g = sample_noise_level(s, np.random.default_rng(1), size=5000)
        assert set(np.unique(t)) == {1, 2, 3, 4, 5}
        np.testing.assert_array_equal(g, s.gamma[t])

    def test_reproducible(self):
        s = make_linear_schedule()
        a = sample_noise_level(s, np.random.default_rng(3), size=50)
        b = sample_noise_level(s, np.random.default_rng(3), size=50)
        np.testing.assert_array_equal(a[0], b[0])


class TestForwardNoise:
    def test_gamma_one(self, rng):
        y0, eps = rng.standard_normal((2, 4, 4)), rng.standard_normal((2, 4, 4))
        np.testing.assert_array_equal(forward_noise(y0, 1.0, eps), y0)

    def test_gamma_zero(self, rng):
        y0, eps = rng.standard_normal((2, 4, 4)), rng.standard_normal((2, 4, 4))
        np.testing.assert_array_equal(forward_noise(y0, 0.0, eps), eps)

    def test_per_sample_gamma(self, rng):
        y0, eps = rng.standard_normal((3, 2, 2)), rng.standard_normal((3, 2, 2))
        g = np.array([0.1, 0.5, 0.9])
        out = forward_noise(y0, g, eps)
        for i in range(3):
            np.testing.assert_allclose(out[i], np.sqrt(g[i]) * y0[i] + np.sqrt(1 - g[i]) * eps[i], atol=1e-15)

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            forward_noise(np.zeros((2, 3)), 0.5, np.zeros((3, 2)))

    def test_gamma_out_of_range(self):
        with pytest.raises(ConfigError):
            forward_noise(np.zeros(3), 1.5, np.zeros(3))

    def test_monte_carlo_moments(self):
        rng = np.random.default_rng(11)
        y0 = np.array([2.0, -1.0, 0.5])
        gamma = 0.37
        n = 10_000
        draws = forward_noise(np.broadcast_to(y0, (n, 3)), gamma, rng.standard_normal((n, 3)))
        se_mean = np.sqrt((1 - gamma) / n)
        assert np.all(np.abs(draws.mean(0) - np.sqrt(gamma) * y0) < 3 * se_mean)
        se_var = (1 - gamma) * np.sqrt(2.0 / (n - 1))
        assert np.all(np.abs(draws.var(0, ddof=1) - (1 - gamma)) < 3 * se_var)


def test_iterated_noising_matches_marginal():
    s = make_linear_schedule(5e-4, 0.1, 200)
    rng = np.random.default_rng(5)
    n, t = 10_000, 60
    y0 = 1.5
    y = np.full(n, y0)
    for step in range(1, t + 1):
        a = s.alpha_at(step)
        y = np.sqrt(a) * y + np.sqrt(1 - a) * rng.standard_normal(n)
    g = s.gamma_at(t)
    assert abs(y.mean() - np.sqrt(g) * y0) < 3 * np.sqrt((1 - g) / n)
    assert abs(y.var(ddof=1) - (1 - g)) < 3 * (1 - g) * np.sqrt(2.0 / (n - 1))
