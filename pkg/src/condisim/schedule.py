"""Discrete-time variance schedules for the forward diffusion chain.

A schedule fixes the per-step noise rates beta_1..beta_T together with the
cumulative signal retention alpha_bar_t = prod_{s<=t}(1 - beta_s).  Steps are
indexed 1..T externally; internally arrays are 0-based, and alpha_bar at t=0
is defined to be 1 so that noising at t=0 is the identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

KINDS = ("linear", "scaled_linear", "quadratic", "scaled_quadratic", "cosine")

BETA_START = 1e-4
BETA_END = 0.02
COSINE_OFFSET = 0.008
BETA_CLIP = 0.999

# alpha_bar is clamped into this range before SNR-type ratios to avoid
# division blow-ups at the schedule extremes
ALPHA_BAR_CLAMP = 1e-9


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable container for a T-step variance schedule."""

    kind: str
    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "sigma", np.sqrt(self.beta))
        self.beta.setflags(write=False)
        self.alpha_bar.setflags(write=False)
        self.sigma.setflags(write=False)

    def alpha_bar_at(self, t):
        """alpha_bar for step t in 0..T (alpha_bar_0 == 1)."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise IndexError(f"step out of range 0..{self.T}")
        return np.where(t == 0, 1.0, self.alpha_bar[np.maximum(t, 1) - 1])

    def beta_at(self, t):
        """beta for step t in 1..T."""
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise IndexError(f"step out of range 1..{self.T}")
        return self.beta[t - 1]


def make_schedule(kind: str, T: int) -> NoiseSchedule:
    """Build a schedule of the given kind with T diffusion steps.

    Scaled variants multiply the standard beta endpoints by s = 1000/T so
    the total amount of noise stays comparable as T varies.
    """
    if T < 2:
        raise ValueError(f"need T >= 2 diffusion steps, got {T}")
    if kind not in KINDS:
        raise ValueError(f"unknown schedule kind {kind!r}; choose from {KINDS}")

    s = 1000.0 / T
    if kind == "linear":
        beta = np.linspace(BETA_START, BETA_END, T)
    elif kind == "scaled_linear":
        beta = np.linspace(BETA_START * s, BETA_END * s, T)
    elif kind == "quadratic":
        beta = np.linspace(math.sqrt(BETA_START), math.sqrt(BETA_END), T) ** 2
    elif kind == "scaled_quadratic":
        beta = np.linspace(math.sqrt(BETA_START * s), math.sqrt(BETA_END * s), T) ** 2
    else:  # cosine
        steps = np.arange(T + 1, dtype=np.float64)
        f = np.cos((steps / T + COSINE_OFFSET) / (1 + COSINE_OFFSET) * math.pi / 2) ** 2
        alpha_bar = f / f[0]
        beta = np.minimum(1.0 - alpha_bar[1:] / alpha_bar[:-1], BETA_CLIP)

    if np.any(beta <= 0.0) or np.any(beta >= 1.0):
        raise ValueError(f"schedule {kind!r} with T={T} produces beta outside (0,1)")

    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(kind=kind, T=T, beta=beta, alpha_bar=alpha_bar)


def snr(schedule: NoiseSchedule, t) -> np.ndarray:
    """Signal-to-noise ratio alpha_bar_t / (1 - alpha_bar_t) at step t (1..T)."""
    ab = np.clip(schedule.alpha_bar_at(t), ALPHA_BAR_CLAMP, 1.0 - ALPHA_BAR_CLAMP)
    return ab / (1.0 - ab)


def loss_weight(schedule: NoiseSchedule, t, gamma: float) -> np.ndarray:
    """Truncated-SNR loss weight min(SNR_t, gamma)/SNR_t, in (0, 1]."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    s = snr(schedule, t)
    return np.minimum(s, gamma) / s
