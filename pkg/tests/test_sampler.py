import math

import numpy as np
import pytest

from pairdiff.errors import ConfigError, ContractError
from pairdiff.rng import Rng
from pairdiff.sampler import (SamplerConfig, analytic_gaussian_eps, ddim_sample, posterior_sigma,
                              predict_x0, reverse_step)
from pairdiff.schedule import linear_schedule, q_sample, uniform_substeps


@pytest.fixture(scope="module")
def cfg():
    return SamplerConfig()


@pytest.fixture
def pair():
    r = Rng(4)
    x0 = r.uniform((3, 1, 8, 8)) * 2 - 1
    return x0, r.normal(x0.shape, np.float64)


def test_default_config(cfg):
    assert cfg.schedule.T == 1024 and len(cfg.steps) == 256 and not cfg.stochastic and cfg.clamp


def test_predict_x0_inverts_q_sample(cfg, pair):
    x0, eps = pair
    for t in (1, 300, 1024):
        xt = q_sample(x0, t, eps, cfg.schedule)
        np.testing.assert_allclose(predict_x0(xt, eps, t, cfg.schedule), x0, rtol=1e-5, atol=1e-9)


def test_predict_x0_zero_eps(cfg, pair):
    x0, _ = pair
    ab = cfg.schedule.alpha_bar(37)
    np.testing.assert_allclose(predict_x0(x0, np.zeros_like(x0), 37, cfg.schedule), x0 / math.sqrt(ab))


def test_predict_x0_t1_is_well_conditioned(cfg):
    x = np.array([0.5, -0.5])
    out = predict_x0(x, np.array([0.1, 0.2]), 1, cfg.schedule)
    want = (x - math.sqrt(1e-4) * np.array([0.1, 0.2])) / math.sqrt(0.9999)
    np.testing.assert_allclose(out, want, rtol=1e-12)


def test_predict_x0_contracts(cfg):
    with pytest.raises(ContractError):
        predict_x0(np.zeros(3), np.zeros(2), 5, cfg.schedule)
    with pytest.raises(ContractError):
        predict_x0(np.zeros(3), np.zeros(3), 0, cfg.schedule)


@pytest.mark.parametrize("n", [256, 1000, 3, 1])
def test_perfect_eps_stays_on_trajectory(pair, n):
    x0, eps = pair
    sched = linear_schedule()
    c = SamplerConfig(schedule=sched, steps=uniform_substeps(1024, n))
    x = q_sample(x0, 1024, eps, sched)
    for t, t_prev in c.steps:
        x = reverse_step(x, eps, t, t_prev, c)
        want = q_sample(x0, t_prev, eps, sched) if t_prev else x0
        assert np.max(np.abs(x - want)) < 1e-5
    assert np.max(np.abs(x - x0)) < 1e-9


def test_last_step_returns_x0_hat(cfg, pair):
    x0, eps = pair
    x1 = q_sample(x0, 4, eps, cfg.schedule)
    x0_hat = predict_x0(x1, eps * 0.5, 4, cfg.schedule)
    np.testing.assert_array_equal(reverse_step(x1, eps * 0.5, 4, 0, cfg), x0_hat)


def test_step_rearranges_to_x0_hat(cfg, pair):
    x0, eps = pair
    eps_hat = eps + 0.3
    for t, t_prev in [(1024, 1020), (500, 496), (8, 4)]:
        xt = q_sample(x0, t, eps, cfg.schedule)
        x_prev = reverse_step(xt, eps_hat, t, t_prev, cfg)
        ab = cfg.schedule.alpha_bar(t_prev)
        implied = (x_prev - math.sqrt(1 - ab) * eps_hat) / math.sqrt(ab)
        assert np.max(np.abs(implied - predict_x0(xt, eps_hat, t, cfg.schedule))) < 1e-6


def test_reverse_step_order_contract(cfg):
    with pytest.raises(ContractError):
        reverse_step(np.zeros(2), np.zeros(2), 4, 4, cfg)


def test_stochastic_needs_rng_and_adds_noise(pair):
    x0, eps = pair
    c = SamplerConfig(stochastic=True)
    xt = q_sample(x0, 500, eps, c.schedule)
    with pytest.raises(ContractError):
        reverse_step(xt, eps, 500, 496, c)
    a = reverse_step(xt, eps, 500, 496, c, rng=Rng(1))
    b = reverse_step(xt, eps, 500, 496, c, rng=Rng(1))
    np.testing.assert_array_equal(a, b)
    det = reverse_step(xt, eps, 500, 496, SamplerConfig())
    assert not np.allclose(a, det)


def test_stochastic_radicand_contract(pair):
    x0, eps = pair
    c = SamplerConfig(stochastic=True, eta=5.0)
    with pytest.raises(ConfigError):
        reverse_step(x0, eps, 1024, 4, c, rng=Rng(0))


def test_posterior_sigma_matches_ddpm_variance(cfg):
    s = cfg.schedule
    beta_tilde = (1 - s.alpha_bar(9)) / (1 - s.alpha_bar(10)) * s.beta(10)
    assert posterior_sigma(10, 9, s) == pytest.approx(math.sqrt(beta_tilde), rel=1e-12)


def test_deterministic_mode_consumes_no_randomness(cfg):
    rng = Rng(3)
    before = rng.state()
    ddim_sample(lambda x, t: np.zeros_like(x), np.ones(4), cfg, rng=rng)
    assert rng.state() == before


def test_gaussian_oracle_degenerate_std(cfg):
    s = cfg.schedule
    xt = np.array([0.1, -0.4, 2.0])
    ab = s.alpha_bar(200)
    want = (xt - math.sqrt(ab) * 0.3) / math.sqrt(1 - ab)
    np.testing.assert_allclose(analytic_gaussian_eps(xt, 200, 0.3, 1e-8, s), want, rtol=1e-9)


def test_gaussian_oracle_zero_at_prior_mean(cfg):
    s = cfg.schedule
    for t in (1, 512, 1024):
        x = np.array([math.sqrt(s.alpha_bar(t)) * 0.3])
        assert abs(analytic_gaussian_eps(x, t, 0.3, 0.1, s)[0]) < 1e-12


def test_gaussian_oracle_is_posterior_mean_of_noise(cfg):
    # regress sampled eps on x_t: for jointly Gaussian (x_t, eps) E[eps|x_t] is linear in x_t
    s = cfg.schedule
    r = Rng(8)
    t = 300
    ab = s.alpha_bar(t)
    x0 = 0.3 + 0.1 * r.normal((200_000,), np.float64)
    eps = r.normal(x0.shape, np.float64)
    xt = q_sample(x0, t, eps, s)
    slope, intercept = np.polyfit(xt, eps, 1)
    pred = analytic_gaussian_eps(np.array([0.0, 1.0]), t, 0.3, 0.1, s)
    assert pred[1] - pred[0] == pytest.approx(slope, rel=0.01)
    assert pred[0] == pytest.approx(intercept, abs=0.01)


def test_gaussian_oracle_end_to_end(cfg):
    x_T = Rng(0).normal((4096,), np.float64)
    out = ddim_sample(lambda x, t: analytic_gaussian_eps(x, t, 0.3, 0.1, cfg.schedule), x_T, cfg)
    assert 0.28 <= out.mean() <= 0.32
    assert 0.08 <= out.std() <= 0.12


def test_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        SamplerConfig(eta=-1.0)
    with pytest.raises(ConfigError):
        SamplerConfig(schedule=linear_schedule(8), steps=uniform_substeps(16, 4))
