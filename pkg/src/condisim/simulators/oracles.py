"""Reference posteriors used to score learned ones.

Two tasks have closed-form posteriors; the rest can be approximated with
rejection ABC when a ground-truth comparison set is needed.
"""

from __future__ import annotations

import numpy as np
from scipy import stats


class GaussianPosterior:
    """Isotropic Gaussian with known mean vector and scalar variance."""

    def __init__(self, mean, var: float):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.var = float(var)

    def sample(self, n: int, rng) -> np.ndarray:
        return self.mean + np.sqrt(self.var) * rng.standard_normal((n, len(self.mean)))

    def log_density(self, theta) -> np.ndarray:
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        d = theta.shape[1]
        quad = np.sum((theta - self.mean) ** 2, axis=1) / self.var
        return -0.5 * (quad + d * np.log(2.0 * np.pi * self.var))


class TruncatedGaussianPosterior:
    """Product of independent N(mean_i, var) truncated to [low, high]."""

    def __init__(self, mean, var: float, low: float, high: float):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.var = float(var)
        self.low = float(low)
        self.high = float(high)
        sd = np.sqrt(self.var)
        self._a = (self.low - self.mean) / sd
        self._b = (self.high - self.mean) / sd
        self._sd = sd

    def sample(self, n: int, rng) -> np.ndarray:
        u = rng.random((n, len(self.mean)))
        lo = stats.norm.cdf(self._a)
        hi = stats.norm.cdf(self._b)
        return self.mean + self._sd * stats.norm.ppf(lo + u * (hi - lo))

    def marginal_mean(self) -> np.ndarray:
        return stats.truncnorm.mean(self._a, self._b, loc=self.mean, scale=self._sd)

    def marginal_var(self) -> np.ndarray:
        return stats.truncnorm.var(self._a, self._b, loc=self.mean, scale=self._sd)


def gaussian_linear_posterior(y) -> GaussianPosterior:
    """Conjugate posterior for prior N(0, 0.1 I), likelihood N(theta, 0.1 I)."""
    y = np.asarray(y, dtype=np.float64)
    return GaussianPosterior(y / 2.0, 0.05)


def gaussian_linear_uniform_posterior(y) -> TruncatedGaussianPosterior:
    """Posterior for prior U(-1,1)^d, likelihood N(theta, 0.1 I).

    The flat prior only truncates: each coordinate is N(y_i, 0.1) restricted
    to [-1, 1].
    """
    y = np.asarray(y, dtype=np.float64)
    return TruncatedGaussianPosterior(y, 0.1, -1.0, 1.0)


def rejection_abc(task, y_obs, n_keep: int, n_draws: int, seed: int,
                  chunk: int = 1_000_000) -> np.ndarray:
    """Keep the n_keep prior draws whose simulations fall closest to y_obs.

    Euclidean distance in observation space.  Uses the task's vectorized
    simulator when available, otherwise loops.
    """
    y_obs = np.asarray(y_obs, dtype=np.float64)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(55,)))
    thetas = np.empty((n_draws, task.theta_dim))
    dists = np.empty(n_draws)
    done = 0
    while done < n_draws:
        b = min(chunk, n_draws - done)
        th = task.sample_prior(b, rng)
        if task.simulate_batch is not None:
            ys = task.simulate_batch(th, rng)
        else:
            ys = np.stack([task.simulate(th[i], rng) for i in range(b)])
        thetas[done:done + b] = th
        dists[done:done + b] = np.linalg.norm(ys - y_obs, axis=1)
        done += b
    keep = np.argpartition(dists, n_keep - 1)[:n_keep]
    return thetas[keep]
