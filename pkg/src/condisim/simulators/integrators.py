"""Fixed-step integrators used by the ODE/SDE benchmark simulators."""

from __future__ import annotations

import numpy as np


def rk4(deriv, y0, t_grid, h):
    """Classic fourth-order Runge-Kutta on a uniform internal step h.

    deriv(t, y) -> dy/dt.  Integrates from t=0 and records the state at each
    time in t_grid (which must be positive multiples of h, within rounding).
    Returns an array of shape (len(t_grid), len(y0)).
    """
    t_grid = np.asarray(t_grid, dtype=np.float64)
    y = np.array(y0, dtype=np.float64)
    out = np.empty((len(t_grid), len(y)))
    t = 0.0
    k_rec = 0
    n_steps = int(round(t_grid[-1] / h))
    for i in range(n_steps):
        k1 = deriv(t, y)
        k2 = deriv(t + 0.5 * h, y + 0.5 * h * k1)
        k3 = deriv(t + 0.5 * h, y + 0.5 * h * k2)
        k4 = deriv(t + h, y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t = (i + 1) * h
        if not np.all(np.isfinite(y)):
            raise FloatingPointError(f"integrator produced non-finite state at t={t}")
        while k_rec < len(t_grid) and t_grid[k_rec] <= t + 1e-9:
            out[k_rec] = y
            k_rec += 1
    if k_rec != len(t_grid):
        raise ValueError("t_grid extends past the integration horizon")
    return out
