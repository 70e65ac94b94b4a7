"""Dense denoising network with FiLM conditioning, written from scratch.

The network predicts the noise added to a parameter vector at diffusion step
t, conditioned on an observation y.  A condition encoder and a sinusoidal
timestep encoder produce a context vector; a small MLP maps the context to
per-block FiLM scale/shift pairs that modulate each hidden block.

Everything is float64 numpy: forward passes cache activations, backward
passes return exact gradients (checked against finite differences in the
test suite), and the optimizer is a hand-rolled AdamW with global-norm
gradient clipping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class DivergenceError(RuntimeError):
    """Raised when non-finite gradients or losses abort an update."""


def _sigmoid(x):
    # overflow-free: exp of a nonpositive argument on both branches
    pos = x >= 0
    e = np.exp(np.where(pos, -x, x))
    return np.where(pos, 1.0 / (1.0 + e), e / (1.0 + e))


def silu(x):
    return x * _sigmoid(x)


def _silu_grad(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def film_modulate(h, gamma, beta_shift):
    """Feature-wise linear modulation: gamma * h + beta, elementwise."""
    h = np.asarray(h, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    beta_shift = np.asarray(beta_shift, dtype=np.float64)
    if not (h.shape == gamma.shape == beta_shift.shape):
        raise ValueError(
            f"shape mismatch: h {h.shape}, gamma {gamma.shape}, beta {beta_shift.shape}"
        )
    return gamma * h + beta_shift


def timestep_embed(t, dim: int, T: int | None = None) -> np.ndarray:
    """Sinusoidal embedding of step t: pairs (sin(t*w_k), cos(t*w_k)).

    Frequencies follow w_k = 10000^(-2k/dim), independent of the horizon T
    (kept in the signature for callers that pass it along).  Accepts a scalar
    step or an array of steps; output shape is (..., dim).
    """
    if dim % 2 != 0:
        raise ValueError(f"embedding dim must be even, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    k = np.arange(dim // 2, dtype=np.float64)
    omega = 10000.0 ** (-2.0 * k / dim)
    angles = t[..., None] * omega
    out = np.empty(t.shape + (dim,), dtype=np.float64)
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def _glorot(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class DenoiserNetwork:
    """FiLM-modulated MLP predicting the injected noise eps(theta_t, y, t).

    Blocks are dense -> FiLM -> SiLU -> dense with a residual connection.
    The output head starts at zero so the initial prediction is exactly 0.
    A learned null-conditioning vector stands in for the condition-encoder
    output when no observation is given (classifier-free guidance).
    """

    def __init__(self, input_dim, cond_dim, hidden_dim, n_blocks, rng=None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.input_dim = input_dim
        self.cond_dim = cond_dim
        self.hidden_dim = hidden_dim
        self.n_blocks = n_blocks

        h = hidden_dim
        p = {}
        p["in.W"] = _glorot(rng, input_dim, h)
        p["in.b"] = np.zeros(h)
        for l in range(n_blocks):
            p[f"block{l}.Wa"] = _glorot(rng, h, h)
            p[f"block{l}.ba"] = np.zeros(h)
            p[f"block{l}.Wb"] = _glorot(rng, h, h)
            p[f"block{l}.bb"] = np.zeros(h)
        p["cond.W1"] = _glorot(rng, cond_dim, h)
        p["cond.b1"] = np.zeros(h)
        p["cond.W2"] = _glorot(rng, h, h)
        p["cond.b2"] = np.zeros(h)
        p["time.W1"] = _glorot(rng, h, h)
        p["time.b1"] = np.zeros(h)
        p["time.W2"] = _glorot(rng, h, h)
        p["time.b2"] = np.zeros(h)
        p["film.W1"] = _glorot(rng, 2 * h, h)
        p["film.b1"] = np.zeros(h)
        p["film.W2"] = _glorot(rng, h, 2 * h * n_blocks)
        p["film.b2"] = np.zeros(2 * h * n_blocks)
        p["out.W"] = np.zeros((h, input_dim))
        p["out.b"] = np.zeros(input_dim)
        p["null_cond"] = np.zeros(h)
        self.params = p

    # -- forward / backward ------------------------------------------------

    def forward(self, theta_t, y, t):
        """Predict noise for a batch.

        theta_t: (B, input_dim) or (input_dim,); y: (B, cond_dim) or None
        (None routes the whole batch through the null-conditioning vector,
        never reading y); t: scalar step or (B,) of steps in 1..T.

        Returns (eps_hat, cache) where cache feeds `backward`.
        """
        theta_t = np.atleast_2d(np.asarray(theta_t, dtype=np.float64))
        B = theta_t.shape[0]
        if theta_t.shape[1] != self.input_dim:
            raise ValueError(f"theta_t dim {theta_t.shape[1]} != {self.input_dim}")
        if not np.all(np.isfinite(theta_t)):
            raise ValueError("non-finite theta_t")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        p = self.params
        h = self.hidden_dim

        # timestep encoder on the sinusoidal embedding
        emb = timestep_embed(t, h)
        ta1 = emb @ p["time.W1"] + p["time.b1"]
        th1 = silu(ta1)
        ft = th1 @ p["time.W2"] + p["time.b2"]

        # condition encoder or null embedding
        if y is None:
            fy = np.broadcast_to(p["null_cond"], (B, h)).copy()
            ya1 = yh1 = None
        else:
            y = np.atleast_2d(np.asarray(y, dtype=np.float64))
            if y.shape != (B, self.cond_dim):
                raise ValueError(f"y shape {y.shape} != ({B}, {self.cond_dim})")
            if not np.all(np.isfinite(y)):
                raise ValueError("non-finite y")
            ya1 = y @ p["cond.W1"] + p["cond.b1"]
            yh1 = silu(ya1)
            fy = yh1 @ p["cond.W2"] + p["cond.b2"]

        c = np.concatenate([fy, ft], axis=1)
        fa1 = c @ p["film.W1"] + p["film.b1"]
        fh1 = silu(fa1)
        g = fh1 @ p["film.W2"] + p["film.b2"]  # (B, 2*h*n_blocks)

        hid = theta_t @ p["in.W"] + p["in.b"]
        blocks = []
        for l in range(self.n_blocks):
            gamma = 1.0 + g[:, 2 * l * h : (2 * l + 1) * h]
            beta = g[:, (2 * l + 1) * h : (2 * l + 2) * h]
            u = hid @ p[f"block{l}.Wa"] + p[f"block{l}.ba"]
            v = film_modulate(u, gamma, beta)
            w = silu(v)
            z = w @ p[f"block{l}.Wb"] + p[f"block{l}.bb"]
            blocks.append((hid, u, v, w, gamma))
            hid = hid + z
        eps_hat = hid @ p["out.W"] + p["out.b"]

        cache = {
            "theta_t": theta_t, "y": y, "emb": emb, "ta1": ta1, "th1": th1,
            "ya1": ya1, "yh1": yh1, "c": c, "fa1": fa1, "fh1": fh1,
            "blocks": blocks, "h_final": hid, "uncond": y is None, "B": B,
        }
        return eps_hat, cache

    def backward(self, cache, d_eps_hat):
        """Exact gradients of a scalar loss with output-gradient d_eps_hat."""
        p = self.params
        h = self.hidden_dim
        B = cache["B"]
        d_eps_hat = np.atleast_2d(np.asarray(d_eps_hat, dtype=np.float64))
        grads = {k: np.zeros_like(v) for k, v in p.items()}

        grads["out.W"] = cache["h_final"].T @ d_eps_hat
        grads["out.b"] = d_eps_hat.sum(axis=0)
        dhid = d_eps_hat @ p["out.W"].T
        dg = np.zeros((B, 2 * h * self.n_blocks))

        for l in reversed(range(self.n_blocks)):
            hid_in, u, v, w, gamma = cache["blocks"][l]
            dz = dhid  # residual: dhid flows to both z and hid_in
            grads[f"block{l}.Wb"] = w.T @ dz
            grads[f"block{l}.bb"] = dz.sum(axis=0)
            dw = dz @ p[f"block{l}.Wb"].T
            dv = dw * _silu_grad(v)
            dg[:, 2 * l * h : (2 * l + 1) * h] = dv * u
            dg[:, (2 * l + 1) * h : (2 * l + 2) * h] = dv
            du = dv * gamma
            grads[f"block{l}.Wa"] = hid_in.T @ du
            grads[f"block{l}.ba"] = du.sum(axis=0)
            dhid = dhid + du @ p[f"block{l}.Wa"].T

        grads["in.W"] = cache["theta_t"].T @ dhid
        grads["in.b"] = dhid.sum(axis=0)

        # FiLM MLP
        grads["film.W2"] = cache["fh1"].T @ dg
        grads["film.b2"] = dg.sum(axis=0)
        dfh1 = dg @ p["film.W2"].T
        dfa1 = dfh1 * _silu_grad(cache["fa1"])
        grads["film.W1"] = cache["c"].T @ dfa1
        grads["film.b1"] = dfa1.sum(axis=0)
        dc = dfa1 @ p["film.W1"].T
        dfy, dft = dc[:, :h], dc[:, h:]

        # timestep encoder (embedding itself has no parameters)
        grads["time.W2"] = cache["th1"].T @ dft
        grads["time.b2"] = dft.sum(axis=0)
        dth1 = dft @ p["time.W2"].T
        dta1 = dth1 * _silu_grad(cache["ta1"])
        grads["time.W1"] = cache["emb"].T @ dta1
        grads["time.b1"] = dta1.sum(axis=0)

        # condition path
        if cache["uncond"]:
            grads["null_cond"] = dfy.sum(axis=0)
        else:
            grads["cond.W2"] = cache["yh1"].T @ dfy
            grads["cond.b2"] = dfy.sum(axis=0)
            dyh1 = dfy @ p["cond.W2"].T
            dya1 = dyh1 * _silu_grad(cache["ya1"])
            grads["cond.W1"] = cache["y"].T @ dya1
            grads["cond.b1"] = dya1.sum(axis=0)

        return grads

    def copy_params(self):
        return {k: v.copy() for k, v in self.params.items()}

    def set_params(self, params):
        self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}


@dataclass
class OptimizerState:
    """AdamW accumulators for one network."""

    base_lr: float
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def _init_moments(self, params):
        for k, v in params.items():
            self.first_moment[k] = np.zeros_like(v)
            self.second_moment[k] = np.zeros_like(v)


def adamw_apply(state: OptimizerState, net: DenoiserNetwork, grads, lr_now, clip_norm):
    """One AdamW step with global-norm clipping and decoupled weight decay."""
    if lr_now <= 0:
        raise ValueError("lr_now must be positive")
    total = 0.0
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient; aborting update")
        total += float(np.sum(g * g))
    gnorm = math.sqrt(total)
    scale = clip_norm / gnorm if (clip_norm > 0 and gnorm > clip_norm) else 1.0

    if not state.first_moment:
        state._init_moments(net.params)
    state.step_count += 1
    b1, b2 = state.betas
    bc1 = 1.0 - b1**state.step_count
    bc2 = 1.0 - b2**state.step_count
    for k, w in net.params.items():
        g = grads[k] * scale
        m = state.first_moment[k]
        v = state.second_moment[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        w -= lr_now * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        w -= lr_now * state.weight_decay * w


LR_FLOOR = 1e-6
WARMUP_FRACTION = 0.10
FINAL_FRACTION = 0.05


def lr_at(step: int, total_steps: int, eta: float) -> float:
    """Learning rate at a global step: quadratic warmup from 0.2*eta to eta
    over the first 10% of steps, cosine annealing to 1e-6, then constant
    1e-6 for the final 5%."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    warmup = WARMUP_FRACTION * total_steps
    const_start = (1.0 - FINAL_FRACTION) * total_steps
    if step < warmup:
        u = step / warmup
        return 0.2 * eta + 0.8 * eta * u * u
    if step >= const_start:
        return LR_FLOOR
    progress = (step - warmup) / (const_start - warmup)
    return LR_FLOOR + 0.5 * (eta - LR_FLOOR) * (1.0 + math.cos(math.pi * progress))
