import csv

import numpy as np
import pytest
from scipy import stats

from simgen.schedule import (
    DEFAULT_NUM_STEPS,
    default_schedule,
    make_linear_schedule,
    p_sample_step,
    q_sample,
    save_schedule_csv,
    schedule_from_betas,
)


def test_single_step_product():
    s = make_linear_schedule(1, 0.5, 0.5)
    assert s.alpha_bars[0] == pytest.approx(0.5, abs=1e-15)


def test_two_step_hand_product():
    s = schedule_from_betas(np.array([0.1, 0.2]))
    assert np.allclose(s.alpha_bars, [0.9, 0.72], atol=1e-15)
    assert np.allclose(s.alphas, [0.9, 0.8], atol=1e-15)


def test_default_terminal_alpha_bar():
    s = default_schedule()
    assert s.num_steps == DEFAULT_NUM_STEPS == 250
    assert s.alpha_bars[-1] < 0.01
    # frozen from a direct cumulative-product evaluation
    assert s.alpha_bars[-1] == pytest.approx(3.264409135490725e-05, rel=1e-12)


def test_unscaled_thousand_step_range_at_250_steps():
    # the classic (1e-4, 0.02) range is tuned for 1000 steps; cut to 250 it
    # leaves ~8% of the signal at t=T, which is why the default rescales it
    s = make_linear_schedule(250, 1e-4, 0.02)
    assert s.alpha_bars[-1] == pytest.approx(0.07970254434466752, rel=1e-12)


def test_tables_monotone_and_finite():
    for s in (default_schedule(), make_linear_schedule(17, 1e-3, 0.3)):
        assert np.all(np.diff(s.alpha_bars) < 0)
        assert np.all((s.betas > 0) & (s.betas < 1))
        assert np.all(np.isfinite(s.posterior_variances))
        assert s.posterior_variances[0] == 0.0
        assert np.all(s.posterior_variances[1:] > 0)


def test_invalid_ranges_rejected():
    with pytest.raises(ValueError):
        make_linear_schedule(0, 0.1, 0.2)
    with pytest.raises(ValueError):
        make_linear_schedule(10, 0.0, 0.2)
    with pytest.raises(ValueError):
        make_linear_schedule(10, 0.3, 0.2)
    with pytest.raises(ValueError):
        make_linear_schedule(10, 0.5, 1.0)


def test_q_sample_zero_noise():
    s = schedule_from_betas(np.array([0.1, 0.2]))
    x0 = np.random.default_rng(0).uniform(-1, 1, size=(6, 5, 4))
    out = q_sample(x0, 2, np.zeros_like(x0), s)
    assert np.allclose(out, np.sqrt(0.72) * x0, atol=1e-15)


def test_q_sample_pure_noise_scaling():
    s = schedule_from_betas(np.array([0.1, 0.2]))  # alpha_bar_2 = 0.72
    eps = np.random.default_rng(1).standard_normal((6, 5, 4))
    out = q_sample(np.zeros_like(eps), 2, eps, s)
    assert np.allclose(out, np.sqrt(0.28) * eps, atol=1e-15)


def test_q_sample_monte_carlo_moments():
    s = default_schedule()
    t = 100
    ab = s.alpha_bars[t - 1]
    x0 = np.full((1,), 0.6)
    rng = np.random.default_rng(7)
    n = 10_000
    draws = np.array([q_sample(x0, t, rng.standard_normal(1), s)[0] for _ in range(n)])
    se_mean = np.sqrt((1 - ab) / n)
    assert abs(draws.mean() - np.sqrt(ab) * 0.6) < 3 * se_mean
    se_var = (1 - ab) * np.sqrt(2.0 / (n - 1))
    assert abs(draws.var(ddof=1) - (1 - ab)) < 3 * se_var


def test_q_sample_per_sample_timesteps_match_loop():
    s = default_schedule()
    rng = np.random.default_rng(2)
    x0 = rng.uniform(-1, 1, size=(4, 6, 3, 3))
    eps = rng.standard_normal(x0.shape)
    t = np.array([1, 50, 200, 250])
    batched = q_sample(x0, t, eps, s)
    for b in range(4):
        assert np.allclose(batched[b], q_sample(x0[b], int(t[b]), eps[b], s))


def test_q_sample_treats_all_channels_identically():
    s = default_schedule()
    x0 = np.ones((2, 6, 4, 4)) * np.arange(1, 7)[None, :, None, None]
    out = q_sample(x0, np.array([3, 77]), np.zeros_like(x0), s)
    scale = out / x0
    assert np.allclose(scale, scale[:, :1], atol=1e-15)


def test_q_sample_validation():
    s = default_schedule()
    x0 = np.zeros((2, 6, 4, 4))
    with pytest.raises(ValueError):
        q_sample(x0, 0, np.zeros_like(x0), s)
    with pytest.raises(ValueError):
        q_sample(x0, 251, np.zeros_like(x0), s)
    with pytest.raises(ValueError):
        q_sample(x0, 1, np.zeros((2, 6, 4, 3)), s)
    with pytest.raises(ValueError):
        q_sample(x0, np.array([1, 2, 3]), np.zeros_like(x0), s)


def test_terminal_marginal_is_standard_normal():
    """KS test of x_T against N(0,1) per channel at significance 0.01."""
    s = default_schedule()
    rng = np.random.default_rng(42)
    n = 10_000
    fixtures = {
        "ones": np.ones((n,)),
        "minus-ones": -np.ones((n,)),
        "uniform": rng.uniform(-1, 1, size=n),
    }
    for name, x0 in fixtures.items():
        for channel in range(6):
            eps = rng.standard_normal(n)
            x_t = q_sample(x0, s.num_steps, eps, s)
            result = stats.kstest(x_t, "norm")
            assert result.pvalue > 0.01, (name, channel, result)


def test_one_step_forward_reverse_identity():
    s = make_linear_schedule(1, 0.37, 0.37)
    rng = np.random.default_rng(5)
    x0 = rng.uniform(-1, 1, size=(6, 8, 8))
    eps = rng.standard_normal(x0.shape)
    x1 = q_sample(x0, 1, eps, s)
    back = p_sample_step(x1, 1, eps, s, np.zeros_like(x1))
    assert np.abs(back - x0).max() < 1e-6


def test_reverse_step_near_identity_for_tiny_beta():
    s = schedule_from_betas(np.array([1e-8]))
    rng = np.random.default_rng(6)
    x_t = rng.standard_normal((6, 4, 4))
    out = p_sample_step(x_t, 1, np.zeros_like(x_t), s, np.zeros_like(x_t))
    assert np.abs(out - x_t / np.sqrt(1 - 1e-8)).max() < 1e-6
    assert np.abs(out - x_t).max() < 1e-6


def test_reverse_step_deterministic_given_z():
    s = default_schedule()
    rng = np.random.default_rng(7)
    x_t = rng.standard_normal((6, 4, 4))
    eps_hat = rng.standard_normal(x_t.shape)
    z = rng.standard_normal(x_t.shape)
    a = p_sample_step(x_t, 100, eps_hat, s, z)
    b = p_sample_step(x_t, 100, eps_hat, s, z)
    assert np.array_equal(a, b)


def test_reverse_step_validation():
    s = default_schedule()
    x = np.zeros((6, 4, 4))
    with pytest.raises(ValueError):
        p_sample_step(x, 0, x, s, x)
    with pytest.raises(ValueError):
        p_sample_step(x, 1, x, s, np.ones_like(x))  # z must be zero at t=1
    with pytest.raises(ValueError):
        p_sample_step(x, 2, np.zeros((6, 4, 3)), s, x)


def test_schedule_csv_dump(tmp_path):
    s = make_linear_schedule(5, 0.01, 0.2)
    path = tmp_path / "sched.csv"
    save_schedule_csv(s, path)
    with path.open() as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["t", "beta", "alpha_bar"]
    assert len(rows) == 6
    for i, row in enumerate(rows[1:]):
        assert int(row[0]) == i + 1
        assert float(row[1]) == s.betas[i]
        assert float(row[2]) == s.alpha_bars[i]
