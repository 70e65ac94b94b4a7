"""Exact stochastic simulation (Gillespie SSA) for mass-action networks.

The inner event loop is JIT-compiled with numba; at the event counts the
genetic-oscillator model produces (millions per trajectory) a pure-Python
loop would be impractical.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _ssa_loop(reactants, change, rates, x, t, k_rec, t_grid, out, u_time, u_pick):
    """Advance the chain until t_grid is exhausted or the uniforms run out.

    Mutates x and out in place.  Returns (t, k_rec, status) with status
    1 = finished, 0 = needs more randomness, -1 = negative propensity.
    """
    n_species = x.shape[0]
    n_reactions = rates.shape[0]
    n_rec = t_grid.shape[0]
    props = np.zeros(n_reactions)
    for ev in range(u_time.shape[0]):
        total = 0.0
        for r in range(n_reactions):
            a = rates[r]
            for s in range(n_species):
                m = reactants[r, s]
                if m == 1:
                    a *= x[s]
                elif m == 2:
                    a *= x[s] * (x[s] - 1) * 0.5
            if a < 0.0:
                return t, k_rec, -1
            props[r] = a
            total += a
        if total <= 0.0:
            # nothing can fire: state frozen until the horizon
            while k_rec < n_rec:
                out[k_rec] = x
                k_rec += 1
            return t, k_rec, 1
        t_next = t - np.log(u_time[ev]) / total
        while k_rec < n_rec and t_grid[k_rec] < t_next:
            out[k_rec] = x
            k_rec += 1
        if k_rec == n_rec:
            return t, k_rec, 1
        t = t_next
        target = u_pick[ev] * total
        acc = 0.0
        pick = n_reactions - 1
        for r in range(n_reactions):
            acc += props[r]
            if acc >= target:
                pick = r
                break
        for s in range(n_species):
            x[s] += change[pick, s]
    return t, k_rec, 0


def gillespie_ssa(reactants, change, rates, x0, t_grid, rng, chunk=4_000_000):
    """Simulate a mass-action reaction network exactly.

    reactants: (R, S) reactant stoichiometry (orders 0..2 per species);
    change: (R, S) net state change per firing; rates: (R,) nonnegative
    rate constants; x0: (S,) integer initial state; t_grid: increasing
    record times.  Returns integer states of shape (len(t_grid), S).
    """
    rates = np.asarray(rates, dtype=np.float64)
    if np.any(rates < 0):
        raise ValueError("reaction rates must be nonnegative")
    reactants = np.asarray(reactants, dtype=np.int64)
    change = np.asarray(change, dtype=np.int64)
    x = np.asarray(x0, dtype=np.int64).copy()
    t_grid = np.asarray(t_grid, dtype=np.float64)

    out = np.zeros((len(t_grid), len(x)), dtype=np.int64)
    t, k_rec = 0.0, 0
    while True:
        u_time = rng.random(chunk)
        u_pick = rng.random(chunk)
        t, k_rec, status = _ssa_loop(reactants, change, rates, x, t, k_rec,
                                     t_grid, out, u_time, u_pick)
        if status == -1:
            raise RuntimeError("negative propensity (programming error)")
        if status == 1:
            return out
