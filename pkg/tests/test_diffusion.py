import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from condisim.diffusion import (GuidanceConfig, cfg_combine, forward_posterior,
                                forward_sample, reverse_step, sample_posterior,
                                training_loss)
from condisim.net import DenoiserNetwork, DivergenceError
from condisim.schedule import loss_weight, make_schedule


@pytest.fixture(scope="module")
def schedule():
    return make_schedule("cosine", 50)


def test_guidance_config_rejects_negative():
    with pytest.raises(ValueError):
        GuidanceConfig(-0.1)


def test_forward_sample_identity_at_t0(schedule):
    theta0 = np.array([1.0, -2.0])
    out = forward_sample(theta0, 0, np.ones(2), schedule)
    assert np.array_equal(out, theta0)


def test_forward_sample_noiseless(schedule):
    theta0 = np.array([1.0, -2.0])
    t = 7
    out = forward_sample(theta0, t, np.zeros(2), schedule)
    assert np.allclose(out, np.sqrt(schedule.alpha_bar_at(t)) * theta0)


def test_forward_sample_pure_noise(schedule):
    t = 7
    e1 = np.array([1.0, 0.0])
    out = forward_sample(np.zeros(2), t, e1, schedule)
    assert np.allclose(out, np.sqrt(1 - schedule.alpha_bar_at(t)) * e1)


def test_forward_sample_shape_mismatch(schedule):
    with pytest.raises(ValueError):
        forward_sample(np.zeros(2), 1, np.zeros(3), schedule)


def test_forward_posterior_t1_collapses(schedule):
    theta0 = np.array([0.5, -0.5])
    theta_t = np.array([2.0, 1.0])
    mu, var = forward_posterior(theta_t, theta0, 1, schedule)
    assert np.allclose(mu, theta0)
    assert var == 0.0


def test_forward_posterior_small_beta_limit():
    # beta_t -> 0 pins the mean at theta0 when theta_t = theta0
    beta = np.array([1e-3, 1e-10])
    from condisim.schedule import NoiseSchedule
    s = NoiseSchedule(kind="linear", T=2, beta=beta, alpha_bar=np.cumprod(1 - beta))
    theta0 = np.array([0.7, -1.1])
    mu, _ = forward_posterior(theta0, theta0, 2, s)
    assert np.max(np.abs(mu - theta0)) < 1e-6


def test_reverse_matches_forward_posterior_mean(schedule):
    """Substituting theta0 = (theta_t - sqrt(1-ab) eps)/sqrt(ab) into the
    forward posterior mean must reproduce the reverse-step mean."""
    rng = np.random.default_rng(11)
    for _ in range(100):
        t = int(rng.integers(1, schedule.T + 1))
        theta0 = rng.standard_normal(3)
        eps = rng.standard_normal(3)
        theta_t = forward_sample(theta0, t, eps, schedule)
        mu_q, _ = forward_posterior(theta_t, theta0, t, schedule)
        out = reverse_step(theta_t, eps, t, schedule, np.zeros(3))
        assert np.max(np.abs(out - mu_q)) < 1e-10


def test_forward_marginal_consistency(schedule):
    """Iterating the one-step kernel matches the closed-form marginal."""
    rng = np.random.default_rng(5)
    n = 10_000
    t = 17
    theta0 = np.array([1.3])
    x = np.repeat(theta0, n)[:, None]
    for s in range(1, t + 1):
        b = schedule.beta_at(s)
        x = np.sqrt(1 - b) * x + np.sqrt(b) * rng.standard_normal(x.shape)
    ab = schedule.alpha_bar_at(t)
    want_mean = np.sqrt(ab) * theta0[0]
    want_var = 1 - ab
    se_mean = np.sqrt(want_var / n)
    se_var = want_var * np.sqrt(2.0 / (n - 1))
    assert abs(x.mean() - want_mean) < 4 * se_mean
    assert abs(x.var() - want_var) < 4 * se_var


def test_reverse_step_zero_eps(schedule):
    t = 5
    theta_t = np.array([2.0, -1.0])
    out = reverse_step(theta_t, np.zeros(2), t, schedule, np.zeros(2))
    assert np.allclose(out, theta_t / np.sqrt(1 - schedule.beta_at(t)))


def test_reverse_step_sigma_modes(schedule):
    rng = np.random.default_rng(0)
    theta_t, eps, z = rng.standard_normal((3, 2))
    t = 10
    a = reverse_step(theta_t, eps, t, schedule, z, sigma_mode="beta")
    b = reverse_step(theta_t, eps, t, schedule, z, sigma_mode="posterior")
    # posterior sigma is strictly smaller for t >= 2
    assert not np.allclose(a, b)
    with pytest.raises(ValueError):
        reverse_step(theta_t, eps, t, schedule, z, sigma_mode="weird")


def test_cfg_combine_cases():
    ec = np.array([1.0, 0.0])
    eu = np.array([0.0, 1.0])
    assert np.array_equal(cfg_combine(ec, eu, 0.0), ec)
    assert np.array_equal(cfg_combine(ec, eu, 1.0), [2.0, -1.0])
    assert np.array_equal(cfg_combine(ec, ec, 7.3), ec)


@given(st.floats(min_value=0.0, max_value=10.0, allow_nan=False))
@settings(max_examples=30, deadline=None)
def test_cfg_combine_affine_property(lam):
    rng = np.random.default_rng(1)
    ec, eu = rng.standard_normal((2, 4))
    out = cfg_combine(ec, eu, lam)
    assert np.allclose(out, ec + lam * (ec - eu), rtol=1e-12, atol=1e-12)


class _StubNet:
    """Denoiser stand-in with a fixed response, for loss oracles."""

    def __init__(self, dim, mode):
        self.input_dim = dim
        self.cond_dim = dim
        self.mode = mode
        self.saw_real_y = False

    def forward(self, theta_t, y, t):
        if y is not None:
            self.saw_real_y = True
        out = np.zeros_like(np.atleast_2d(theta_t))
        return out, {"n": len(out)}

    def backward(self, cache, d_eps):
        return {}


def test_training_loss_zero_for_perfect_net(schedule):
    # inject the drawn noise back as the prediction via a wrapper
    rng = np.random.default_rng(2)

    class Perfect(_StubNet):
        def __init__(self, dim, theta0, sched):
            super().__init__(dim, "perfect")
            self.theta0 = theta0
            self.sched = sched

        def forward(self, theta_t, y, t):
            ab = self.sched.alpha_bar_at(t)[:, None]
            eps = (np.atleast_2d(theta_t) - np.sqrt(ab) * self.theta0) / np.sqrt(1 - ab)
            return eps, {}

    theta0 = rng.standard_normal((16, 2))
    net = Perfect(2, theta0, schedule)
    loss, _ = training_loss(net, schedule, theta0, theta0, rng)
    assert loss == pytest.approx(0.0, abs=1e-20)


def test_training_loss_zero_net_expectation(schedule):
    # eps_hat = 0 gives E[loss] = E[w_t] * dim
    rng = np.random.default_rng(3)
    dim = 2
    net = _StubNet(dim, "zero")
    t_all = np.arange(1, schedule.T + 1)
    expect = loss_weight(schedule, t_all, 5.0).mean() * dim
    n_batches, B = 200, 64
    losses = [training_loss(net, schedule, np.zeros((B, dim)),
                            np.zeros((B, dim)), rng)[0]
              for _ in range(n_batches)]
    # theta0 = 0 so theta_t is pure noise and ||eps||^2 has mean dim per draw
    got = np.mean(losses)
    se = np.std(losses) / np.sqrt(n_batches)
    assert abs(got - expect) < 3 * se + 1e-9


def test_training_loss_p_uncond_one_never_sees_y(schedule):
    rng = np.random.default_rng(4)
    net = _StubNet(2, "zero")
    training_loss(net, schedule, rng.standard_normal((32, 2)),
                  rng.standard_normal((32, 2)), rng, p_uncond=1.0)
    assert not net.saw_real_y


def test_training_loss_empty_batch(schedule):
    with pytest.raises(ValueError):
        training_loss(_StubNet(2, "zero"), schedule, np.empty((0, 2)),
                      np.empty((0, 2)), np.random.default_rng(0))


def test_training_loss_nonfinite_raises(schedule):
    class NanNet(_StubNet):
        def forward(self, theta_t, y, t):
            out = np.full_like(np.atleast_2d(theta_t), np.nan)
            return out, {}

    with pytest.raises(DivergenceError):
        training_loss(NanNet(2, "nan"), schedule, np.zeros((4, 2)),
                      np.zeros((4, 2)), np.random.default_rng(0))


def _trained_stubby_net(schedule, rng):
    net = DenoiserNetwork(2, 2, 16, 2, rng)
    for k in net.params:
        net.params[k] = 0.1 * rng.standard_normal(net.params[k].shape)
    return net


def test_sample_posterior_reproducible(schedule):
    rng = np.random.default_rng(8)
    net = _trained_stubby_net(schedule, rng)
    y0 = np.array([0.1, -0.2])
    a = sample_posterior(net, schedule, y0, 32, GuidanceConfig(), seed=9)
    b = sample_posterior(net, schedule, y0, 32, GuidanceConfig(), seed=9)
    assert np.array_equal(a.samples, b.samples)


def test_sample_posterior_batch_independent(schedule):
    # chain i's draw must not depend on how many chains run alongside it
    rng = np.random.default_rng(8)
    net = _trained_stubby_net(schedule, rng)
    y0 = np.array([0.1, -0.2])
    a = sample_posterior(net, schedule, y0, 8, GuidanceConfig(), seed=3)
    b = sample_posterior(net, schedule, y0, 4, GuidanceConfig(), seed=3)
    assert np.array_equal(a.samples[:4], b.samples)


def test_sample_posterior_empty(schedule):
    net = _trained_stubby_net(schedule, np.random.default_rng(8))
    out = sample_posterior(net, schedule, np.zeros(2), 0, GuidanceConfig(), seed=0)
    assert out.samples.shape == (0, 2)
    assert out.n_excluded == 0


def test_sample_posterior_guidance_forced_off(schedule):
    net = _trained_stubby_net(schedule, np.random.default_rng(8))
    y0 = np.zeros(2)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        guided = sample_posterior(net, schedule, y0, 8, GuidanceConfig(2.0),
                                  seed=1, uncond_trained=False)
        assert any("guidance" in str(x.message) for x in w)
    plain = sample_posterior(net, schedule, y0, 8, GuidanceConfig(0.0), seed=1)
    assert np.array_equal(guided.samples, plain.samples)
    assert guided.guidance == 0.0


def test_sample_posterior_lambda0_skips_uncond_branch(schedule):
    calls = {"uncond": 0}
    net = _trained_stubby_net(schedule, np.random.default_rng(8))
    orig = net.forward

    def spy(theta_t, y, t):
        if y is None:
            calls["uncond"] += 1
        return orig(theta_t, y, t)

    net.forward = spy
    sample_posterior(net, schedule, np.zeros(2), 4, GuidanceConfig(0.0), seed=0)
    assert calls["uncond"] == 0


def test_sample_posterior_guided_uses_both_branches(schedule):
    calls = {"uncond": 0, "cond": 0}
    net = _trained_stubby_net(schedule, np.random.default_rng(8))
    orig = net.forward

    def spy(theta_t, y, t):
        calls["uncond" if y is None else "cond"] += 1
        return orig(theta_t, y, t)

    net.forward = spy
    sample_posterior(net, schedule, np.zeros(2), 4, GuidanceConfig(1.0), seed=0,
                     uncond_trained=True)
    assert calls["uncond"] == calls["cond"] == schedule.T


def test_sample_posterior_excludes_nonfinite_chains(schedule):
    net = _trained_stubby_net(schedule, np.random.default_rng(8))
    orig = net.forward

    def poison(theta_t, y, t):
        out, cache = orig(theta_t, y, t)
        out = out.copy()
        out[0] = np.inf  # blow up whichever chain is first in the batch
        return out, cache

    net.forward = poison
    res = sample_posterior(net, schedule, np.zeros(2), 4, GuidanceConfig(), seed=0)
    assert res.n_excluded >= 1
    assert len(res.samples) + res.n_excluded == 4
    assert np.all(np.isfinite(res.samples))


def test_sample_posterior_destandardizes(schedule):
    net = _trained_stubby_net(schedule, np.random.default_rng(8))
    raw = sample_posterior(net, schedule, np.zeros(2), 8, GuidanceConfig(), seed=2)
    shifted = sample_posterior(net, schedule, np.zeros(2), 8, GuidanceConfig(), seed=2,
                               theta_shift=np.array([1.0, -1.0]),
                               theta_scale=np.array([2.0, 0.5]))
    assert np.allclose(shifted.samples,
                       raw.samples * np.array([2.0, 0.5]) + np.array([1.0, -1.0]))
