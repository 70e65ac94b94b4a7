"""Diffusion math: forward noising, training loss, guided ancestral sampling.

All operations work in standardized parameter units; de-standardization of
posterior draws happens at the sampling boundary via the shift/scale passed
to `sample_posterior`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .net import DenoiserNetwork, DivergenceError
from .schedule import NoiseSchedule, loss_weight


@dataclass(frozen=True)
class GuidanceConfig:
    """Classifier-free guidance scale (0 = plain conditional sampling)."""

    lam: float = 0.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("guidance scale must be >= 0")


@dataclass
class PosteriorSamples:
    """Draws from the learned posterior with provenance."""

    samples: np.ndarray  # (n, theta_dim), de-standardized
    checkpoint_id: str
    guidance: float
    seed: int
    n_excluded: int = 0


def forward_sample(theta0, t, epsilon, schedule: NoiseSchedule):
    """Noised state sqrt(ab_t)*theta0 + sqrt(1-ab_t)*eps (identity at t=0)."""
    theta0 = np.asarray(theta0, dtype=np.float64)
    epsilon = np.asarray(epsilon, dtype=np.float64)
    if epsilon.shape != theta0.shape:
        raise ValueError("epsilon shape must match theta0")
    ab = schedule.alpha_bar_at(t)
    ab = np.reshape(ab, np.shape(ab) + (1,) * (theta0.ndim - np.ndim(ab)))
    return np.sqrt(ab) * theta0 + np.sqrt(1.0 - ab) * epsilon


def forward_posterior(theta_t, theta0, t, schedule: NoiseSchedule):
    """Closed-form q(theta_{t-1} | theta_t, theta0): (mean, scalar variance)."""
    theta_t = np.asarray(theta_t, dtype=np.float64)
    theta0 = np.asarray(theta0, dtype=np.float64)
    ab_t = schedule.alpha_bar_at(t)
    ab_prev = schedule.alpha_bar_at(t - 1)
    beta_t = schedule.beta_at(t)
    alpha_t = 1.0 - beta_t
    denom = 1.0 - ab_t
    mu = (np.sqrt(ab_prev) * beta_t * theta0 + np.sqrt(alpha_t) * (1.0 - ab_prev) * theta_t) / denom
    var = (1.0 - ab_prev) / denom * beta_t
    return mu, float(var)


def cfg_combine(eps_cond, eps_uncond, lam: float):
    """Guided prediction (1+lam)*eps_cond - lam*eps_uncond."""
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError("shape mismatch between conditional and unconditional predictions")
    if lam == 0.0:
        return eps_cond.copy()
    # algebraically (1+lam)*cond - lam*uncond; this form cancels exactly
    # when the two predictions coincide
    return eps_cond + lam * (eps_cond - eps_uncond)


def reverse_step(theta_t, eps_hat, t, schedule: NoiseSchedule, z, sigma_mode="beta"):
    """One ancestral update theta_t -> theta_{t-1}.

    sigma_mode "beta" uses sigma_t = sqrt(beta_t); "posterior" uses the
    forward-posterior variance (1-ab_{t-1})/(1-ab_t)*beta_t instead.
    Callers must pass z = 0 at t = 1 so the final step is deterministic.
    """
    theta_t = np.asarray(theta_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    beta_t = schedule.beta_at(t)
    alpha_t = 1.0 - beta_t
    ab_t = schedule.alpha_bar_at(t)
    mean = (theta_t - (1.0 - alpha_t) / np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(alpha_t)
    if sigma_mode == "beta":
        sigma = np.sqrt(beta_t)
    elif sigma_mode == "posterior":
        ab_prev = schedule.alpha_bar_at(t - 1)
        sigma = np.sqrt((1.0 - ab_prev) / (1.0 - ab_t) * beta_t)
    else:
        raise ValueError(f"unknown sigma_mode {sigma_mode!r}")
    return mean + sigma * np.asarray(z, dtype=np.float64)


def training_loss(net: DenoiserNetwork, schedule: NoiseSchedule, theta0, y, rng,
                  gamma_snr: float = 5.0, p_uncond: float = 0.0):
    """SNR-weighted noise-prediction loss and its gradients for one batch.

    Per element: t ~ Uniform{1..T}, eps ~ N(0,I); with probability p_uncond
    the observation is replaced by the null conditioning.  Returns
    (scalar loss, gradient dict).
    """
    theta0 = np.atleast_2d(np.asarray(theta0, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    B, d = theta0.shape
    if B == 0:
        raise ValueError("empty batch")
    t = rng.integers(1, schedule.T + 1, size=B)
    eps = rng.standard_normal((B, d))
    drop = rng.random(B) < p_uncond
    theta_t = forward_sample(theta0, t, eps, schedule)
    w = loss_weight(schedule, t, gamma_snr)

    eps_hat = np.empty_like(eps)
    grads = None
    for cond, idx in ((True, ~drop), (False, drop)):
        if not np.any(idx):
            continue
        out, cache = net.forward(theta_t[idx], y[idx] if cond else None, t[idx])
        eps_hat[idx] = out
        resid = out - eps[idx]
        d_eps = 2.0 * w[idx, None] * resid / B
        g = net.backward(cache, d_eps)
        if grads is None:
            grads = g
        else:
            for k in grads:
                grads[k] = grads[k] + g[k]

    loss = float(np.mean(w * np.sum((eps - eps_hat) ** 2, axis=1)))
    if not np.isfinite(loss):
        raise DivergenceError("non-finite training loss")
    return loss, grads


def _chain_rngs(seed: int, n: int):
    return [np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i,)))
            for i in range(n)]


def sample_posterior(net: DenoiserNetwork, schedule: NoiseSchedule, y0, n: int,
                     guidance: GuidanceConfig, seed: int,
                     theta_shift=None, theta_scale=None,
                     uncond_trained: bool = False, checkpoint_id: str = "",
                     sigma_mode: str = "beta") -> PosteriorSamples:
    """Draw n posterior samples at a (standardized) observation y0.

    Chains are independent with per-chain RNG streams keyed by (seed, index),
    so results do not depend on batching.  Chains that go non-finite are
    excluded and counted.  Draws are mapped back to simulator units with
    theta_shift/theta_scale.
    """
    lam = guidance.lam
    if lam > 0 and not uncond_trained:
        warnings.warn("guidance requested but the unconditional branch was never "
                      "trained (p_uncond == 0); forcing guidance scale to 0")
        lam = 0.0
    d = net.input_dim
    if n == 0:
        return PosteriorSamples(np.empty((0, d)), checkpoint_id, lam, seed, 0)

    T = schedule.T
    # per-chain noise: row 0 is theta_T, rows 1..T are the reverse-step z's
    noise = np.empty((n, T + 1, d))
    for i, rng in enumerate(_chain_rngs(seed, n)):
        noise[i] = rng.standard_normal((T + 1, d))

    theta = noise[:, 0, :].copy()
    y_batch = np.broadcast_to(np.asarray(y0, dtype=np.float64), (n, net.cond_dim))
    alive = np.ones(n, dtype=bool)
    for t in range(T, 0, -1):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        eps_c, _ = net.forward(theta[idx], y_batch[idx], t)
        if lam > 0:
            eps_u, _ = net.forward(theta[idx], None, t)
            eps_hat = cfg_combine(eps_c, eps_u, lam)
        else:
            eps_hat = eps_c
        z = noise[idx, T - t + 1, :] if t > 1 else 0.0
        theta[idx] = reverse_step(theta[idx], eps_hat, t, schedule, z, sigma_mode)
        bad = ~np.all(np.isfinite(theta[idx]), axis=1)
        if np.any(bad):
            alive[idx[bad]] = False

    samples = theta[alive]
    if theta_scale is not None:
        samples = samples * np.asarray(theta_scale)
    if theta_shift is not None:
        samples = samples + np.asarray(theta_shift)
    return PosteriorSamples(samples, checkpoint_id, lam, seed, int(n - alive.sum()))
