"""Posterior diagnostics: two-sample tests and simulation-based calibration.

c2st trains a small classifier to distinguish two sample sets; 0.5 means
indistinguishable.  mmd returns the (squared) kernel maximum mean
discrepancy.  sbc_ranks / ecdf_band implement rank-based calibration checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .net import silu, _silu_grad, _sigmoid


@dataclass
class C2stResult:
    score: float
    n_folds: int
    per_fold: np.ndarray

    def __float__(self):
        return self.score


@dataclass
class MmdResult:
    value: float
    kernel_bandwidth: float
    estimator: str

    def __float__(self):
        return self.value


# -- classifier two-sample test ----------------------------------------------

class _Mlp:
    """Binary classifier: two SiLU hidden layers and a logistic output."""

    def __init__(self, dim, hidden, rng):
        def glorot(n_in, n_out):
            s = np.sqrt(6.0 / (n_in + n_out))
            return rng.uniform(-s, s, size=(n_in, n_out))

        self.params = {
            "W1": glorot(dim, hidden), "b1": np.zeros(hidden),
            "W2": glorot(hidden, hidden), "b2": np.zeros(hidden),
            "W3": glorot(hidden, 1), "b3": np.zeros(1),
        }
        self.m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.step = 0

    def logits(self, x):
        p = self.params
        h1 = silu(x @ p["W1"] + p["b1"])
        h2 = silu(h1 @ p["W2"] + p["b2"])
        return (h2 @ p["W3"] + p["b3"]).ravel()

    def loss_and_grads(self, x, labels):
        p = self.params
        a1 = x @ p["W1"] + p["b1"]
        h1 = silu(a1)
        a2 = h1 @ p["W2"] + p["b2"]
        h2 = silu(a2)
        z = (h2 @ p["W3"] + p["b3"]).ravel()
        # stable log(1 + e^-|z|) form of binary cross-entropy
        loss = float(np.mean(np.maximum(z, 0) - z * labels + np.log1p(np.exp(-np.abs(z)))))
        prob = _sigmoid(z)
        dz = ((prob - labels) / len(labels))[:, None]
        g = {}
        g["W3"] = h2.T @ dz
        g["b3"] = dz.sum(0)
        dh2 = dz @ p["W3"].T
        da2 = dh2 * _silu_grad(a2)
        g["W2"] = h1.T @ da2
        g["b2"] = da2.sum(0)
        dh1 = da2 @ p["W2"].T
        da1 = dh1 * _silu_grad(a1)
        g["W1"] = x.T @ da1
        g["b1"] = da1.sum(0)
        return loss, g

    def adam_step(self, grads, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.step += 1
        b1, b2 = betas
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mh = self.m[k] / (1 - b1 ** self.step)
            vh = self.v[k] / (1 - b2 ** self.step)
            p -= lr * mh / (np.sqrt(vh) + eps)


def _fit_classifier(x_train, y_train, x_val, y_val, rng,
                    max_epochs=100, batch=128, patience=10):
    net = _Mlp(x_train.shape[1], 10 * x_train.shape[1], rng)
    best_loss = np.inf
    best_params = {k: v.copy() for k, v in net.params.items()}
    bad = 0
    n = len(x_train)
    for _ in range(max_epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch):
            idx = order[s:s + batch]
            _, g = net.loss_and_grads(x_train[idx], y_train[idx])
            net.adam_step(g)
        val_loss, _ = net.loss_and_grads(x_val, y_val)
        if val_loss < best_loss - 1e-6:
            best_loss = val_loss
            best_params = {k: v.copy() for k, v in net.params.items()}
            bad = 0
        else:
            bad += 1
            if bad >= patience:
                break
    net.params = best_params
    return net


def c2st(x, y, seed: int = 0, n_folds: int = 5) -> C2stResult:
    """Classifier two-sample test accuracy under n_folds cross-validation.

    Both sets are jointly z-scored; each fold trains a fresh classifier with
    a 10% early-stopping split carved out of the training part.  Values near
    0.5 indicate the two samples are indistinguishable.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[1] != y.shape[1]:
        raise ValueError("sample dimensionality mismatch")
    if len(x) < 10 or len(y) < 10:
        raise ValueError("c2st needs at least 10 samples per class")

    data = np.concatenate([x, y])
    labels = np.concatenate([np.zeros(len(x)), np.ones(len(y))])
    mu = data.mean(0)
    sd = np.maximum(data.std(0), 1e-8)
    data = (data - mu) / sd

    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(11,)))
    order = rng.permutation(len(data))
    folds = np.array_split(order, n_folds)
    accs = []
    for f in range(n_folds):
        test_idx = folds[f]
        train_idx = np.concatenate([folds[g] for g in range(n_folds) if g != f])
        n_val = max(1, int(0.1 * len(train_idx)))
        val_idx, fit_idx = train_idx[:n_val], train_idx[n_val:]
        net = _fit_classifier(data[fit_idx], labels[fit_idx],
                              data[val_idx], labels[val_idx], rng)
        pred = (net.logits(data[test_idx]) > 0).astype(np.float64)
        accs.append(np.mean(pred == labels[test_idx]))
    accs = np.array(accs)
    return C2stResult(float(accs.mean()), n_folds, accs)


# -- maximum mean discrepancy ------------------------------------------------

def _median_heuristic(pooled, rng, max_points=2048):
    if len(pooled) > max_points:
        pooled = pooled[rng.choice(len(pooled), max_points, replace=False)]
    sq = np.sum(pooled ** 2, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * pooled @ pooled.T, 0.0)
    iu = np.triu_indices(len(pooled), k=1)
    return max(float(np.median(np.sqrt(d2[iu]))), 1e-8)


def _kernel_sums(a, b, h, chunk=2048):
    """(sum of k(a_i, b_j), sum of diagonal k(a_i, b_i) if square) in chunks."""
    total = 0.0
    diag = 0.0
    sq_b = np.sum(b ** 2, axis=1)
    same = a is b
    for s in range(0, len(a), chunk):
        blk = a[s:s + chunk]
        d2 = np.maximum(np.sum(blk ** 2, axis=1)[:, None] + sq_b[None, :]
                        - 2.0 * blk @ b.T, 0.0)
        k = np.exp(-d2 / (2.0 * h * h))
        total += float(k.sum())
        if same:
            diag += float(np.trace(k[:, s:s + len(blk)]))
    return total, diag


def mmd(x, y, bandwidth: float | None = None, unbiased: bool = True,
        seed: int = 0) -> MmdResult:
    """Squared MMD with an RBF kernel and median-heuristic bandwidth.

    The bandwidth is the median pairwise distance of the pooled samples
    (subsampled above 2048 points, floored at 1e-8).  The unbiased
    U-statistic can be slightly negative; the biased V-statistic is >= 0
    and exactly 0 when x is y.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[1] != y.shape[1]:
        raise ValueError("sample dimensionality mismatch")
    m, n = len(x), len(y)
    if unbiased and (m < 2 or n < 2):
        raise ValueError("unbiased mmd needs at least 2 samples per set")

    if bandwidth is None:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(22,)))
        h = _median_heuristic(np.concatenate([x, y]), rng)
    else:
        h = max(float(bandwidth), 1e-8)
    kxx, dxx = _kernel_sums(x, x, h)
    kyy, dyy = _kernel_sums(y, y, h)
    kxy, _ = _kernel_sums(x, y, h)
    if unbiased:
        value = ((kxx - dxx) / (m * (m - 1)) + (kyy - dyy) / (n * (n - 1))
                 - 2.0 * kxy / (m * n))
        return MmdResult(value, h, "unbiased_u")
    value = kxx / (m * m) + kyy / (n * n) - 2.0 * kxy / (m * n)
    return MmdResult(value, h, "biased_v")


# -- simulation-based calibration --------------------------------------------

def sbc_ranks(theta_true, posterior_draws, rng):
    """Fractional ranks of each true parameter within its posterior draws.

    theta_true: (M, d); posterior_draws: (M, L, d).  Non-finite draws are
    dropped per observation; an observation whose effective draw count falls
    below L/2 is skipped entirely.  Ties are broken uniformly at random, so
    ranks of a calibrated posterior are Uniform(0, 1).
    """
    theta_true = np.atleast_2d(np.asarray(theta_true, dtype=np.float64))
    posterior_draws = np.asarray(posterior_draws, dtype=np.float64)
    M, L, d = posterior_draws.shape
    if theta_true.shape != (M, d):
        raise ValueError("theta_true and posterior_draws disagree on (M, d)")
    ranks = []
    for i in range(M):
        draws = posterior_draws[i]
        ok = np.all(np.isfinite(draws), axis=1)
        if ok.sum() < L / 2:
            continue
        draws = draws[ok]
        less = np.sum(draws < theta_true[i], axis=0)
        equal = np.sum(draws == theta_true[i], axis=0)
        u = rng.random(d)
        ranks.append((less + u * equal) / len(draws))
    return np.array(ranks).reshape(-1, d)


@dataclass
class EcdfBand:
    u: np.ndarray           # interior grid points
    curves: np.ndarray      # (d, n_grid) ECDF(u) - u per dimension
    half_width: np.ndarray  # simultaneous band half-width at each u

    def in_band(self) -> np.ndarray:
        """Per-dimension: does the whole curve stay inside the band?"""
        return np.all(np.abs(self.curves) <= self.half_width, axis=1)


def band_half_width(m: int, n_grid: int = 20, coverage: float = 0.9,
                    n_rep: int = 10_000, seed: int = 0):
    """Simultaneous ECDF-difference band for m Uniform(0,1) ranks.

    Returns (u, half_width), calibrated by Monte Carlo so that under
    uniformity the whole ECDF stays inside with probability `coverage`.
    """
    if m < 50:
        raise ValueError("ecdf band calibration needs at least 50 ranks")
    u = (np.arange(1, n_grid + 1)) / (n_grid + 1)
    sigma = np.sqrt(u * (1.0 - u) / m)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(33,)))
    reps = np.empty(n_rep)
    for r in range(n_rep):
        draws = rng.random(m)
        ecdf = np.searchsorted(np.sort(draws), u, side="right") / m
        reps[r] = np.max(np.abs(ecdf - u) / sigma)
    k = float(np.quantile(reps, coverage))
    return u, k * sigma


def ecdf_band(ranks, coverage: float = 0.9, n_grid: int = 20,
              n_rep: int = 10_000, seed: int = 0) -> EcdfBand:
    """Per-dimension ECDF-difference curves with a simultaneous band."""
    ranks = np.atleast_2d(np.asarray(ranks, dtype=np.float64))
    m, d = ranks.shape
    u, half = band_half_width(m, n_grid, coverage, n_rep, seed)
    curves = np.empty((d, len(u)))
    for j in range(d):
        col = np.sort(ranks[:, j])
        curves[j] = np.searchsorted(col, u, side="right") / m - u
    return EcdfBand(u, curves, half)
