"""Benchmark priors and simulators.

Every simulator is a pure function of (theta, rng): the same seed gives a
bit-identical observation.  Tasks with fixed random designs (SLCP distractor
permutation, Bernoulli GLM stimulus matrix) freeze them with a task seed at
construction time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .integrators import rk4
from .ssa import gillespie_ssa
from . import oracles


@dataclass(frozen=True)
class TaskDefinition:
    name: str
    theta_dim: int
    y_dim: int
    sample_prior: Callable  # (n, rng) -> (n, theta_dim)
    simulate: Callable      # (theta, rng) -> (y_dim,)
    in_support: Callable    # (theta,) -> bool
    true_theta: np.ndarray
    analytic_posterior: Optional[Callable] = None  # (y,) -> posterior oracle
    simulate_batch: Optional[Callable] = None      # (thetas, rng) -> (n, y_dim)
    prior_label: str = ""

    def reference_observation(self, seed: int = 0) -> np.ndarray:
        """A fixed synthetic observation simulated at the true parameters."""
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(777,)))
        return self.simulate(self.true_theta, rng)


def sample_prior(task: TaskDefinition, n: int, rng) -> np.ndarray:
    """n i.i.d. prior draws for the task (empty batch allowed)."""
    if n < 0:
        raise ValueError("n must be >= 0")
    if n == 0:
        return np.empty((0, task.theta_dim))
    return task.sample_prior(n, rng)


def _box_support(low, high):
    low = np.asarray(low, dtype=np.float64)
    high = np.asarray(high, dtype=np.float64)
    return lambda th: bool(np.all(th >= low) and np.all(th <= high))


def _uniform_prior(low, high, dim):
    low = np.broadcast_to(np.asarray(low, dtype=np.float64), (dim,))
    high = np.broadcast_to(np.asarray(high, dtype=np.float64), (dim,))
    return lambda n, rng: rng.uniform(low, high, size=(n, dim))


# -- Two Moons ---------------------------------------------------------------

def two_moons(theta, rng) -> np.ndarray:
    """Crescent observation: y = r[cos a, sin a] + offset(theta)."""
    a = rng.uniform(-math.pi / 2, math.pi / 2)
    r = rng.normal(0.1, 0.01)
    return np.array([
        r * math.cos(a) - 0.25 * abs(theta[0] + theta[1]) / math.sqrt(2.0),
        r * math.sin(a) + 0.25 * (-theta[0] + theta[1]) / math.sqrt(2.0),
    ])


def two_moons_batch(thetas, rng) -> np.ndarray:
    thetas = np.asarray(thetas, dtype=np.float64)
    n = len(thetas)
    a = rng.uniform(-math.pi / 2, math.pi / 2, size=n)
    r = rng.normal(0.1, 0.01, size=n)
    return np.column_stack([
        r * np.cos(a) - 0.25 * np.abs(thetas[:, 0] + thetas[:, 1]) / math.sqrt(2.0),
        r * np.sin(a) + 0.25 * (-thetas[:, 0] + thetas[:, 1]) / math.sqrt(2.0),
    ])


# -- Gaussian families -------------------------------------------------------

def gaussian_mixture(theta, rng) -> np.ndarray:
    """Equal mixture of N(theta, I) and N(theta, 0.01 I)."""
    scale = 1.0 if rng.random() < 0.5 else 0.1
    return np.asarray(theta, dtype=np.float64) + scale * rng.standard_normal(2)


def gaussian_linear(theta, rng) -> np.ndarray:
    """y ~ N(theta, 0.1 I)."""
    theta = np.asarray(theta, dtype=np.float64)
    return theta + math.sqrt(0.1) * rng.standard_normal(theta.shape)


def _gaussian_linear_batch(thetas, rng):
    thetas = np.asarray(thetas, dtype=np.float64)
    return thetas + math.sqrt(0.1) * rng.standard_normal(thetas.shape)


# -- SLCP --------------------------------------------------------------------

def _slcp_draws(theta, rng):
    theta = np.asarray(theta, dtype=np.float64)
    mean = theta[:2]
    s1, s2 = theta[2], theta[3]
    rho = math.tanh(theta[4])
    cov = np.array([[s1 * s1, rho * s1 * s2], [rho * s1 * s2, s2 * s2]])
    cov[np.diag_indices(2)] += 1e-12  # jitter for rank-deficient corners
    L = np.linalg.cholesky(cov)
    z = rng.standard_normal((4, 2))
    return (mean + z @ L.T).ravel()


def slcp(theta, rng, permutation=None, n_distractors: int = 0) -> np.ndarray:
    """Four 2-D draws from a theta-parameterized Gaussian, flattened.

    With distractors, appends i.i.d. N(0,1) coordinates and applies a fixed
    permutation (the same for every call within one task instance).
    """
    base = _slcp_draws(theta, rng)
    if n_distractors == 0:
        return base
    y = np.concatenate([base, rng.standard_normal(n_distractors)])
    return y[permutation]


# -- Bernoulli GLM -----------------------------------------------------------

def _second_difference_operator(k: int) -> np.ndarray:
    f = 2.0 * np.eye(k)
    idx = np.arange(k - 1)
    f[idx, idx + 1] = -1.0
    f[idx + 1, idx] = -1.0
    return f


class BernoulliGlm:
    """GLM with logistic link, fixed random stimulus design V (100 x 9).

    theta = (beta, f) with beta ~ N(0, 2) and f ~ N(0, (F'F)^-1) for the
    second-difference smoothing operator F.
    """

    T_BINS = 100
    F_DIM = 9

    def __init__(self, task_seed: int = 0):
        design_rng = np.random.default_rng(np.random.SeedSequence(entropy=task_seed,
                                                                  spawn_key=(101,)))
        self.V = design_rng.standard_normal((self.T_BINS, self.F_DIM))
        F = _second_difference_operator(self.F_DIM)
        self._chol = np.linalg.cholesky(F.T @ F)

    def sample_prior(self, n, rng):
        beta = math.sqrt(2.0) * rng.standard_normal((n, 1))
        z = rng.standard_normal((self.F_DIM, n))
        f = np.linalg.solve(self._chol.T, z).T
        return np.concatenate([beta, f], axis=1)

    def simulate_bits(self, theta, rng):
        theta = np.asarray(theta, dtype=np.float64)
        z = self.V @ theta[1:] + theta[0]
        p = 1.0 / (1.0 + np.exp(-np.clip(z, -30.0, 30.0)))
        return (rng.random(self.T_BINS) < p).astype(np.float64)

    def simulate_suffstat(self, theta, rng):
        bits = self.simulate_bits(theta, rng)
        return np.concatenate([[bits.sum()], self.V.T @ bits])


# -- SIR ---------------------------------------------------------------------

SIR_N = 1_000_000.0
SIR_DURATION = 160.0
SIR_STEP = 0.1


def sir(theta, rng) -> np.ndarray:
    """Standard SIR dynamics with binomial observation noise.

    Integrates dS = -bSI/N, dI = bSI/N - gI, dR = gI with RK4 from
    (N-1, 1, 0) and samples Binomial(1000, I/N) at 10 evenly spaced times.
    """
    b, g = float(theta[0]), float(theta[1])
    n_pop = SIR_N

    def deriv(t, y):
        s, i, _ = y
        inf = b * s * i / n_pop
        return np.array([-inf, inf - g * i, g * i])

    t_grid = np.linspace(SIR_DURATION / 10, SIR_DURATION, 10)
    states = rk4(deriv, [n_pop - 1.0, 1.0, 0.0], t_grid, SIR_STEP)
    if np.any(states < -1e-6 * n_pop) or np.any(states > n_pop * (1 + 1e-6)):
        raise FloatingPointError("SIR state left [0, N]; integrator failure")
    p = np.clip(states[:, 1] / n_pop, 0.0, 1.0)
    return rng.binomial(1000, p).astype(np.float64)


def _sir_prior(n, rng):
    mu = np.array([math.log(0.4), math.log(1.0 / 8.0)])
    sigma = np.array([0.5, 0.2])
    return np.exp(mu + sigma * rng.standard_normal((n, 2)))


# -- Lotka-Volterra ----------------------------------------------------------

LV_DURATION = 20.0
LV_STEP = 0.01


def lotka_volterra(theta, rng, obs_sigma: float = 0.1) -> np.ndarray:
    """Predator-prey dynamics with lognormal observation noise.

    Returns 10 prey then 10 predator readouts at evenly spaced times.
    """
    a, b, g, d = (float(v) for v in theta)

    def deriv(t, y):
        x, yy = y
        return np.array([a * x - b * x * yy, -g * yy + d * x * yy])

    t_grid = np.linspace(LV_DURATION / 10, LV_DURATION, 10)
    states = rk4(deriv, [30.0, 1.0], t_grid, LV_STEP)
    log_xy = np.log(np.maximum(states, 1e-300)).T.ravel()  # X block then Y block
    return np.exp(log_xy + obs_sigma * rng.standard_normal(20))


def _lv_prior(n, rng):
    mu = np.array([-0.125, -3.0, -0.125, -3.0])
    return np.exp(mu + 0.5 * rng.standard_normal((n, 4)))


# -- Hodgkin-Huxley ----------------------------------------------------------

HH_V0 = -65.0
HH_DURATION = 200.0
HH_STEPS = 5000
HH_STIM_ON = 50.0
HH_STIM_OFF = 150.0
HH_SPIKE_THRESHOLD = -10.0

HH_PRIOR_LOW = np.array([1.0, 60.0, 10.0, 0.1, 40.0, -100.0, -90.0])
HH_PRIOR_HIGH = np.array([2.0, 120.0, 30.0, 0.5, 70.0, -60.0, -60.0])


def efun(x):
    """x/(e^x - 1) with the small-|x| expansion 1 - x/2 for stability."""
    x = np.asarray(x, dtype=np.float64)
    small = np.abs(x) < 1e-4
    safe = np.where(small, 1.0, x)
    return np.where(small, 1.0 - x / 2.0, safe / np.expm1(safe))


def _hh_rates(v):
    dv = v - HH_V0
    alpha_m = 0.32 * efun(-0.25 * (dv - 13.0)) / 0.25
    beta_m = 0.28 * efun(0.2 * (dv - 40.0)) / 0.2
    alpha_h = 0.128 * np.exp(-(dv - 17.0) / 18.0)
    beta_h = 4.0 / (1.0 + np.exp(-(dv - 40.0) / 5.0))
    alpha_n = 0.032 * efun(-0.2 * (dv - 15.0)) / 0.2
    beta_n = 0.5 * np.exp(-(dv - 10.0) / 40.0)
    return alpha_m, beta_m, alpha_h, beta_h, alpha_n, beta_n


def hh_voltage_trace(theta, rng, noise: float = 0.05, i_amp: float = 4.0):
    """Euler-Maruyama voltage trace plus accumulated sodium-channel energy.

    Gating variables use exponential (unconditionally stable) updates and
    start at their steady state for the initial voltage.
    """
    cm, g_na, g_k, g_l, e_na, e_k, e_l = (float(v) for v in theta)
    dt = HH_DURATION / HH_STEPS
    v = HH_V0
    am, bm, ah, bh, an, bn = _hh_rates(v)
    m = am / (am + bm)
    h = ah / (ah + bh)
    n = an / (an + bn)

    vs = np.empty(HH_STEPS + 1)
    vs[0] = v
    energy = 0.0
    xi = rng.standard_normal(HH_STEPS) if noise > 0 else np.zeros(HH_STEPS)
    sqrt_dt = math.sqrt(dt)
    for k in range(HH_STEPS):
        t = k * dt
        i_inj = i_amp if HH_STIM_ON <= t <= HH_STIM_OFF else 0.0
        i_na = g_na * m**3 * h * (v - e_na)
        i_k = g_k * n**4 * (v - e_k)
        i_l = g_l * (v - e_l)
        energy += dt * i_na
        v = v + dt * (i_inj - i_na - i_k - i_l) / cm + noise * sqrt_dt * xi[k]
        if not math.isfinite(v):
            raise FloatingPointError("HH voltage diverged")
        am, bm, ah, bh, an, bn = _hh_rates(v)
        m = am / (am + bm) + (m - am / (am + bm)) * math.exp(-dt * (am + bm))
        h = ah / (ah + bh) + (h - ah / (ah + bh)) * math.exp(-dt * (ah + bh))
        n = an / (an + bn) + (n - an / (an + bn)) * math.exp(-dt * (an + bn))
        vs[k + 1] = v
    return vs, energy


def hh_summaries(vs: np.ndarray, energy: float) -> np.ndarray:
    """Eight summary statistics of a voltage trace."""
    t = np.linspace(0.0, HH_DURATION, len(vs))
    stim = (t >= HH_STIM_ON) & (t <= HH_STIM_OFF)
    rest = ~stim
    crossings = np.sum((vs[:-1] < HH_SPIKE_THRESHOLD) & (vs[1:] >= HH_SPIKE_THRESHOLD))
    mu = vs.mean()
    sd = vs.std()
    if sd > 0:
        skew = float(np.mean(((vs - mu) / sd) ** 3))
        kurt = float(np.mean(((vs - mu) / sd) ** 4))
    else:
        skew = kurt = 0.0
    return np.array([
        float(crossings),
        vs[rest].mean(),
        vs[rest].std(),
        vs[stim].mean(),
        skew,
        kurt,
        energy,
        vs[stim].std(),
    ])


def hodgkin_huxley(theta, rng, noise: float = 0.05, i_amp: float = 4.0) -> np.ndarray:
    vs, energy = hh_voltage_trace(theta, rng, noise=noise, i_amp=i_amp)
    return hh_summaries(vs, energy)


# -- Genetic oscillator ------------------------------------------------------

# species: D_A, D_A*, M_A, D_R, D_R*, M_R, C, A, R
OSC_SPECIES = ("D_A", "D_A*", "M_A", "D_R", "D_R*", "M_R", "C", "A", "R")
OSC_X0 = np.array([1, 0, 0, 1, 0, 0, 10, 10, 10], dtype=np.int64)
OSC_T_GRID = np.arange(1, 201, dtype=np.float64)

# rates: alpha_a, alpha_a', alpha_r, alpha_r', beta_a, beta_r, delta_ma,
#        delta_mr, delta_a, delta_r, gamma_a, gamma_r, gamma_c, theta_a, theta_r
OSC_PRIOR_LOW = np.array([0, 100, 0, 20, 10, 1, 1, 0, 0, 0, 0.5, 0, 0, 0, 0], dtype=np.float64)
OSC_PRIOR_HIGH = np.array([80, 600, 4, 60, 60, 7, 12, 2, 3, 0.7, 2.5, 4, 3, 70, 300], dtype=np.float64)
OSC_TRUE_THETA = np.array([50.0, 500.0, 0.01, 50.0, 50.0, 5.0, 10.0, 0.5,
                           1.0, 0.2, 1.0, 1.0, 2.0, 50.0, 100.0])


def _osc_network():
    """Reactant stoichiometry, net change, and rate index per reaction."""
    S = len(OSC_SPECIES)
    d_a, d_as, m_a, d_r, d_rs, m_r, c, a, r = range(S)
    rows = [
        # (reactants {sp: order}, changes {sp: delta}, rate index)
        ({d_a: 1, a: 1}, {d_a: -1, a: -1, d_as: +1}, 10),   # D_A + A -> D_A*
        ({d_as: 1}, {d_as: -1, d_a: +1}, 13),               # D_A* -> D_A
        ({d_as: 1}, {d_as: -1, d_a: +1, a: +1}, 13),        # D_A* -> D_A + A
        ({d_as: 1}, {m_a: +1}, 1),                          # D_A* -> D_A* + M_A
        ({d_a: 1}, {m_a: +1}, 0),                           # D_A -> D_A + M_A
        ({d_r: 1, a: 1}, {d_r: -1, a: -1, d_rs: +1}, 11),   # D_R + A -> D_R*
        ({d_rs: 1}, {d_rs: -1, d_r: +1}, 14),               # D_R* -> D_R
        ({d_rs: 1}, {a: +1}, 13),                           # D_R* -> D_R* + A
        ({d_rs: 1}, {m_r: +1}, 3),                          # D_R* -> D_R* + M_R
        ({d_r: 1}, {m_r: +1}, 2),                           # D_R -> D_R + M_R
        ({m_a: 1}, {a: +1}, 4),                             # M_A -> M_A + A
        ({m_r: 1}, {r: +1}, 5),                             # M_R -> M_R + R
        ({m_a: 1}, {m_a: -1}, 6),                           # M_A -> 0
        ({m_r: 1}, {m_r: -1}, 7),                           # M_R -> 0
        ({a: 1, r: 1}, {a: -1, r: -1, c: +1}, 12),          # A + R -> C
        ({c: 1}, {c: -1, r: +1}, 8),                        # C -> R
        ({a: 1}, {a: -1}, 8),                               # A -> 0
        ({r: 1}, {r: -1}, 9),                               # R -> 0
    ]
    reactants = np.zeros((len(rows), S), dtype=np.int64)
    change = np.zeros((len(rows), S), dtype=np.int64)
    rate_idx = np.zeros(len(rows), dtype=np.int64)
    for i, (re, ch, k) in enumerate(rows):
        for sp, order in re.items():
            reactants[i, sp] = order
        for sp, delta in ch.items():
            change[i, sp] = delta
        rate_idx[i] = k
    return reactants, change, rate_idx


OSC_REACTANTS, OSC_CHANGE, OSC_RATE_IDX = _osc_network()


def genetic_oscillator_trajectory(theta, rng) -> np.ndarray:
    """SSA trajectory of (C, A, R) on the 200-point grid, shape (3, 200)."""
    rates = np.asarray(theta, dtype=np.float64)[OSC_RATE_IDX]
    states = gillespie_ssa(OSC_REACTANTS, OSC_CHANGE, rates, OSC_X0, OSC_T_GRID, rng)
    return states[:, [6, 7, 8]].T.astype(np.float64)


def _dominant_period(x: np.ndarray) -> float:
    """First local maximum lag of the autocorrelation, 0 if none."""
    x = x - x.mean()
    if np.allclose(x, 0.0):
        return 0.0
    ac = np.correlate(x, x, "full")[len(x) - 1:]
    ac = np.convolve(ac, np.ones(3) / 3.0, mode="same")  # light smoothing
    for lag in range(2, len(ac) - 1):
        if ac[lag] > 0 and ac[lag] >= ac[lag - 1] and ac[lag] >= ac[lag + 1]:
            return float(lag)
    return 0.0


def oscillator_summaries(traj: np.ndarray) -> np.ndarray:
    """Per species (C, A, R): mean, std, max, dominant period, final value."""
    traj = np.asarray(traj, dtype=np.float64)
    if traj.shape[0] != 3:
        raise ValueError("expected trajectories of shape (3, n_grid)")
    stats = []
    for row in traj:
        stats.extend([row.mean(), row.std(), row.max(),
                      _dominant_period(row), row[-1]])
    return np.array(stats)


def genetic_oscillator(theta, rng) -> np.ndarray:
    return oscillator_summaries(genetic_oscillator_trajectory(theta, rng))


# -- registry ----------------------------------------------------------------

def get_task(name: str, task_seed: int = 0) -> TaskDefinition:
    """Build a TaskDefinition by name (see `task_names`)."""
    if name == "two_moons":
        return TaskDefinition(
            name=name, theta_dim=2, y_dim=2,
            sample_prior=_uniform_prior(-1.0, 1.0, 2),
            simulate=two_moons, simulate_batch=two_moons_batch,
            in_support=_box_support([-1, -1], [1, 1]),
            true_theta=np.array([0.0, 0.0]),
            prior_label="U(-1, 1)^2",
        )
    if name == "gaussian_mixture":
        return TaskDefinition(
            name=name, theta_dim=2, y_dim=2,
            sample_prior=_uniform_prior(-10.0, 10.0, 2),
            simulate=gaussian_mixture,
            in_support=_box_support([-10, -10], [10, 10]),
            true_theta=np.array([0.0, 0.0]),
            prior_label="U(-10, 10)^2",
        )
    if name == "gaussian_linear":
        return TaskDefinition(
            name=name, theta_dim=10, y_dim=10,
            sample_prior=lambda n, rng: math.sqrt(0.1) * rng.standard_normal((n, 10)),
            simulate=gaussian_linear, simulate_batch=_gaussian_linear_batch,
            in_support=lambda th: True,
            true_theta=np.linspace(-0.3, 0.3, 10),
            analytic_posterior=oracles.gaussian_linear_posterior,
            prior_label="N(0, 0.1 I), 10-d",
        )
    if name == "gaussian_linear_uniform":
        return TaskDefinition(
            name=name, theta_dim=10, y_dim=10,
            sample_prior=_uniform_prior(-1.0, 1.0, 10),
            simulate=gaussian_linear, simulate_batch=_gaussian_linear_batch,
            in_support=_box_support([-1] * 10, [1] * 10),
            true_theta=np.linspace(-0.5, 0.5, 10),
            analytic_posterior=oracles.gaussian_linear_uniform_posterior,
            prior_label="U(-1, 1)^10",
        )
    if name in ("slcp", "slcp_distractors"):
        distract = name == "slcp_distractors"
        if distract:
            perm_rng = np.random.default_rng(np.random.SeedSequence(entropy=task_seed,
                                                                    spawn_key=(202,)))
            perm = perm_rng.permutation(100)
            sim = lambda th, rng: slcp(th, rng, permutation=perm, n_distractors=92)
        else:
            sim = slcp
        return TaskDefinition(
            name=name, theta_dim=5, y_dim=100 if distract else 8,
            sample_prior=_uniform_prior(-3.0, 3.0, 5),
            simulate=sim,
            in_support=_box_support([-3] * 5, [3] * 5),
            true_theta=np.array([0.5, -1.5, 1.0, 0.8, 0.6]),
            prior_label="U(-3, 3)^5",
        )
    if name in ("bernoulli_glm", "bernoulli_glm_raw"):
        glm = BernoulliGlm(task_seed)
        raw = name.endswith("raw")
        true_rng = np.random.default_rng(np.random.SeedSequence(entropy=task_seed,
                                                                spawn_key=(303,)))
        return TaskDefinition(
            name=name, theta_dim=10, y_dim=100 if raw else 10,
            sample_prior=glm.sample_prior,
            simulate=glm.simulate_bits if raw else glm.simulate_suffstat,
            in_support=lambda th: True,
            true_theta=glm.sample_prior(1, true_rng)[0],
            prior_label="beta ~ N(0,2), f ~ N(0,(F'F)^-1)",
        )
    if name == "sir":
        return TaskDefinition(
            name=name, theta_dim=2, y_dim=10,
            sample_prior=_sir_prior,
            simulate=sir,
            in_support=lambda th: bool(np.all(np.asarray(th) > 0)),
            true_theta=np.array([0.4, 0.125]),
            prior_label="LogNormal((log 0.4, log 1/8), (0.5, 0.2))",
        )
    if name == "lotka_volterra":
        return TaskDefinition(
            name=name, theta_dim=4, y_dim=20,
            sample_prior=_lv_prior,
            simulate=lotka_volterra,
            in_support=lambda th: bool(np.all(np.asarray(th) > 0)),
            true_theta=np.exp(np.array([-0.125, -3.0, -0.125, -3.0])),
            prior_label="LogNormal((-0.125, -3, -0.125, -3), 0.5)",
        )
    if name == "hodgkin_huxley":
        return TaskDefinition(
            name=name, theta_dim=7, y_dim=8,
            sample_prior=_uniform_prior(HH_PRIOR_LOW, HH_PRIOR_HIGH, 7),
            simulate=hodgkin_huxley,
            in_support=_box_support(HH_PRIOR_LOW, HH_PRIOR_HIGH),
            true_theta=np.array([1.437, 72.177, 24.209, 0.154, 66.87, -81.435, -67.606]),
            prior_label="U(box), 7-d",
        )
    if name == "genetic_oscillator":
        return TaskDefinition(
            name=name, theta_dim=15, y_dim=15,
            sample_prior=_uniform_prior(OSC_PRIOR_LOW, OSC_PRIOR_HIGH, 15),
            simulate=genetic_oscillator,
            in_support=_box_support(OSC_PRIOR_LOW, OSC_PRIOR_HIGH),
            true_theta=OSC_TRUE_THETA,
            prior_label="U(box), 15-d",
        )
    raise KeyError(f"unknown task {name!r}")


def task_names() -> list[str]:
    return [
        "two_moons", "gaussian_mixture", "gaussian_linear", "gaussian_linear_uniform",
        "slcp", "slcp_distractors", "bernoulli_glm", "bernoulli_glm_raw",
        "sir", "lotka_volterra", "hodgkin_huxley", "genetic_oscillator",
    ]
