"""End-to-end orchestration: datasets, training, checkpoints, evaluation.

A run is fully determined by (config, seed): dataset rows use per-element RNG
streams, validation noise is frozen once per run, and checkpoints serialize
to deterministic bytes.
"""

from __future__ import annotations

import base64
import dataclasses
import hashlib
import json
import math
import os
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .diffusion import GuidanceConfig, PosteriorSamples, forward_sample, sample_posterior, training_loss
from .net import DenoiserNetwork, DivergenceError, OptimizerState, adamw_apply, lr_at
from .schedule import NoiseSchedule, loss_weight, make_schedule
from .simulators import get_task

CKPT_MAGIC = "CONDISIM-CKPT-v1"
SCALE_FLOOR = 1e-8


# -- configuration -----------------------------------------------------------

@dataclass
class TrainingConfig:
    task: str
    budget: int = 10_000
    schedule_kind: str = "cosine"
    schedule_steps: int = 160
    n_blocks: int = 4
    hidden_dim: int = 64
    batch_size: int = 32
    base_lr: float = 1e-3
    gamma_snr: float = 5.0
    p_uncond: float = 0.0
    clip_norm: float = 5.0
    val_fraction: float = 0.30
    patience: int = 30
    patience_start_epoch: int = 50
    max_epochs: int = 500
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.budget < self.batch_size:
            raise ValueError("budget must be at least one batch")
        if not 0.0 <= self.p_uncond <= 1.0:
            raise ValueError("p_uncond must lie in [0, 1]")


# per-task settings; "linear"/"quadratic" here always mean the scaled variants
# so the endpoint noise level is comparable across step counts
PRESETS = {
    "slcp": dict(n_blocks=6, hidden_dim=128, schedule_kind="scaled_linear",
                 schedule_steps=200, batch_size=32, base_lr=1e-3),
    "slcp_distractors": dict(n_blocks=6, hidden_dim=128, schedule_kind="scaled_quadratic",
                             schedule_steps=1000, batch_size=50, base_lr=1e-3),
    "two_moons": dict(n_blocks=4, hidden_dim=64, schedule_kind="cosine",
                      schedule_steps=160, batch_size=32, base_lr=1e-3),
    "gaussian_mixture": dict(n_blocks=4, hidden_dim=64, schedule_kind="cosine",
                             schedule_steps=160, batch_size=32, base_lr=1e-3),
    "gaussian_linear": dict(n_blocks=6, hidden_dim=64, schedule_kind="scaled_linear",
                            schedule_steps=100, batch_size=50, base_lr=2e-4),
    "gaussian_linear_uniform": dict(n_blocks=6, hidden_dim=64, schedule_kind="cosine",
                                    schedule_steps=200, batch_size=50, base_lr=2e-4),
    "sir": dict(n_blocks=4, hidden_dim=64, schedule_kind="scaled_linear",
                schedule_steps=100, batch_size=32, base_lr=1e-4),
    "bernoulli_glm": dict(n_blocks=6, hidden_dim=128, schedule_kind="scaled_linear",
                          schedule_steps=200, batch_size=32, base_lr=1e-3),
    "bernoulli_glm_raw": dict(n_blocks=6, hidden_dim=128, schedule_kind="scaled_linear",
                              schedule_steps=200, batch_size=32, base_lr=1e-3),
    "lotka_volterra": dict(n_blocks=6, hidden_dim=128, schedule_kind="cosine",
                           schedule_steps=200, batch_size=50, base_lr=2e-4),
    "hodgkin_huxley": dict(n_blocks=6, hidden_dim=128, schedule_kind="scaled_quadratic",
                           schedule_steps=1000, batch_size=50, base_lr=1e-3),
    "genetic_oscillator": dict(n_blocks=6, hidden_dim=128, schedule_kind="cosine",
                               schedule_steps=300, batch_size=64, base_lr=1e-4),
}

_INT_KEYS = {"budget", "schedule.steps", "n_blocks", "hidden_dim", "batch_size",
             "patience", "patience_start_epoch", "max_epochs", "seed"}
_FLOAT_KEYS = {"base_lr", "gamma_snr", "p_uncond", "clip_norm", "val_fraction"}
_STR_KEYS = {"task", "schedule.kind"}
_ALL_KEYS = _INT_KEYS | _FLOAT_KEYS | _STR_KEYS


def _key_to_field(key: str) -> str:
    return {"schedule.kind": "schedule_kind", "schedule.steps": "schedule_steps"}.get(key, key)


def default_config(task: str, **overrides) -> TrainingConfig:
    cfg = dict(PRESETS.get(task, {}), task=task)
    cfg.update(overrides)
    return TrainingConfig(**cfg)


def parse_config_text(text: str) -> dict:
    """Flat key=value lines; '#' starts a comment; unknown keys rejected."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in _ALL_KEYS:
            raise ValueError(f"unknown config key {key!r}")
        values[key] = val
    return values


def resolve_config(file_values: dict | None = None, overrides: dict | None = None) -> TrainingConfig:
    """Preset for the task, then config-file values, then --set overrides."""
    merged = dict(file_values or {})
    for key, val in (overrides or {}).items():
        if key not in _ALL_KEYS:
            raise ValueError(f"unknown config key {key!r}")
        merged[key] = val
    if "task" not in merged:
        raise ValueError("config must name a task")
    kwargs = {}
    for key, val in merged.items():
        f = _key_to_field(key)
        if key in _INT_KEYS:
            kwargs[f] = int(val)
        elif key in _FLOAT_KEYS:
            kwargs[f] = float(val)
        else:
            kwargs[f] = str(val)
    return default_config(kwargs.pop("task"), **kwargs)


def config_items(config: TrainingConfig) -> list[tuple[str, str]]:
    """Canonical (key, value) pairs, for manifests and checkpoint echoes."""
    out = []
    for key in sorted(_ALL_KEYS):
        v = getattr(config, _key_to_field(key))
        out.append((key, repr(v) if isinstance(v, float) else str(v)))
    return out


# -- standardization ---------------------------------------------------------

@dataclass
class Standardizer:
    theta_shift: np.ndarray
    theta_scale: np.ndarray
    y_shift: np.ndarray
    y_scale: np.ndarray

    def transform_theta(self, theta):
        return (np.asarray(theta, dtype=np.float64) - self.theta_shift) / self.theta_scale

    def invert_theta(self, theta):
        return np.asarray(theta, dtype=np.float64) * self.theta_scale + self.theta_shift

    def transform_y(self, y):
        return (np.asarray(y, dtype=np.float64) - self.y_shift) / self.y_scale

    def invert_y(self, y):
        return np.asarray(y, dtype=np.float64) * self.y_scale + self.y_shift


def _mean_scale(x):
    scale = x.std(axis=0)
    if np.any(scale < SCALE_FLOOR):
        warnings.warn("constant coordinate in training split; scale floored")
    return x.mean(axis=0), np.maximum(scale, SCALE_FLOOR)


def fit_standardizer(theta_train, y_train) -> Standardizer:
    """Per-coordinate mean/std of the training split only."""
    theta_train = np.atleast_2d(np.asarray(theta_train, dtype=np.float64))
    y_train = np.atleast_2d(np.asarray(y_train, dtype=np.float64))
    if len(theta_train) == 0:
        raise ValueError("empty training split")
    ts, tc = _mean_scale(theta_train)
    ys, yc = _mean_scale(y_train)
    return Standardizer(ts, tc, ys, yc)


# -- datasets ----------------------------------------------------------------

@dataclass
class Dataset:
    theta: np.ndarray
    y: np.ndarray
    n_resampled: int = 0


def generate_dataset(task, N: int, seed: int) -> Dataset:
    """N (theta, y) prior-predictive pairs with per-element RNG streams.

    Element i uses its own stream keyed by (seed, i), so the result does not
    depend on batching or worker count.  A simulator abort resamples theta
    from the same stream, up to 10 times per element.
    """
    if isinstance(task, str):
        task = get_task(task)
    theta = np.empty((N, task.theta_dim))
    y = np.empty((N, task.y_dim))
    n_resampled = 0
    for i in range(N):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1, i)))
        for attempt in range(10):
            th = task.sample_prior(1, rng)[0]
            try:
                obs = task.simulate(th, rng)
            except (FloatingPointError, RuntimeError):
                n_resampled += 1
                continue
            theta[i], y[i] = th, obs
            break
        else:
            raise RuntimeError(f"simulator failed 10 times for element {i} "
                               f"(last theta {th})")
    return Dataset(theta, y, n_resampled)


def save_dataset(dataset: Dataset, path: str, task_name: str = "",
                 seed: int | None = None) -> None:
    d, k = dataset.theta.shape[1], dataset.y.shape[1]
    header = ",".join([f"theta_{j}" for j in range(d)] + [f"y_{j}" for j in range(k)])
    rows = np.concatenate([dataset.theta, dataset.y], axis=1)
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
    if task_name:
        with open(path + ".meta.txt", "w") as fh:
            fh.write(f"task={task_name}\nseed={seed}\nn={len(rows)}\n"
                     f"n_resampled={dataset.n_resampled}\n")


def load_dataset(path: str) -> Dataset:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    d = sum(1 for c in header if c.startswith("theta_"))
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return Dataset(data[:, :d], data[:, d:])


def save_posterior(ps: PosteriorSamples, path: str) -> None:
    d = ps.samples.shape[1]
    with open(path, "w") as fh:
        fh.write(",".join(f"theta_{j}" for j in range(d)) + "\n")
        for row in ps.samples:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
    with open(path + ".meta.txt", "w") as fh:
        fh.write(f"checkpoint_id={ps.checkpoint_id}\nguidance={ps.guidance!r}\n"
                 f"seed={ps.seed}\nn_excluded={ps.n_excluded}\n")


# -- checkpoints -------------------------------------------------------------

def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_array(entry: dict) -> np.ndarray:
    buf = base64.b64decode(entry["data"])
    return np.frombuffer(buf, dtype=np.float64).reshape(entry["shape"]).copy()


@dataclass
class Checkpoint:
    net: DenoiserNetwork
    schedule: NoiseSchedule
    standardizer: Standardizer
    config: TrainingConfig
    opt_step: int
    uncond_trained: bool
    checkpoint_id: str = ""


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    doc = {
        "magic": CKPT_MAGIC,
        "config": dict(config_items(ckpt.config)),
        "dims": {"theta": ckpt.net.input_dim, "y": ckpt.net.cond_dim},
        "schedule": {"kind": ckpt.schedule.kind, "T": ckpt.schedule.T},
        "standardizer": {k: _encode_array(getattr(ckpt.standardizer, k))
                         for k in ("theta_shift", "theta_scale", "y_shift", "y_scale")},
        "weights": {name: _encode_array(w) for name, w in sorted(ckpt.net.params.items())},
        "opt_step": ckpt.opt_step,
        "uncond_trained": ckpt.uncond_trained,
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("ascii")


def save_checkpoint(ckpt: Checkpoint, path: str) -> str:
    """Write the checkpoint; returns its content digest (also stored on ckpt)."""
    blob = checkpoint_bytes(ckpt)
    ckpt.checkpoint_id = hashlib.sha256(blob).hexdigest()
    with open(path, "wb") as fh:
        fh.write(blob)
    return ckpt.checkpoint_id


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    doc = json.loads(blob)
    if doc.get("magic") != CKPT_MAGIC:
        raise ValueError(f"{path} is not a {CKPT_MAGIC} checkpoint")
    config = resolve_config(doc["config"])
    schedule = make_schedule(doc["schedule"]["kind"], doc["schedule"]["T"])
    std = Standardizer(**{k: _decode_array(v) for k, v in doc["standardizer"].items()})
    net = DenoiserNetwork(doc["dims"]["theta"], doc["dims"]["y"], config.hidden_dim,
                          config.n_blocks, np.random.default_rng(0))
    net.set_params({name: _decode_array(v) for name, v in doc["weights"].items()})
    return Checkpoint(net, schedule, std, config, int(doc["opt_step"]),
                      bool(doc["uncond_trained"]),
                      hashlib.sha256(blob).hexdigest())


# -- training ----------------------------------------------------------------

@dataclass
class TrainingReport:
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = ""
    wall_clock: float = 0.0
    checkpoint_path: str = ""


def _should_stop(epoch: int, best_epoch: int, patience: int, start_epoch: int) -> bool:
    """Patience counts only epochs after start_epoch without improvement."""
    return epoch - max(best_epoch, start_epoch) > patience


def _validation_loss(net, schedule, theta0, y, t_val, eps_val, gamma_snr, batch=512):
    theta_t = forward_sample(theta0, t_val, eps_val, schedule)
    w = loss_weight(schedule, t_val, gamma_snr)
    total = 0.0
    for s in range(0, len(theta0), batch):
        sl = slice(s, s + batch)
        eps_hat, _ = net.forward(theta_t[sl], y[sl], t_val[sl])
        total += float(np.sum(w[sl] * np.sum((eps_val[sl] - eps_hat) ** 2, axis=1)))
    return total / len(theta0)


def train(config: TrainingConfig, dataset: Dataset | None = None,
          run_dir: str | None = None):
    """Train a denoiser per the config; returns (Checkpoint, TrainingReport)."""
    t_start = time.time()
    task = get_task(config.task)
    if dataset is None:
        dataset = generate_dataset(task, config.budget, config.seed)
    schedule = make_schedule(config.schedule_kind, config.schedule_steps)

    run_rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed, spawn_key=(2,)))
    n = len(dataset.theta)
    order = run_rng.permutation(n)
    n_val = max(1, int(round(config.val_fraction * n)))
    val_idx, train_idx = order[:n_val], order[n_val:]

    std = fit_standardizer(dataset.theta[train_idx], dataset.y[train_idx])
    th_train = std.transform_theta(dataset.theta[train_idx])
    y_train = std.transform_y(dataset.y[train_idx])
    th_val = std.transform_theta(dataset.theta[val_idx])
    y_val = std.transform_y(dataset.y[val_idx])

    init_rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed, spawn_key=(3,)))
    net = DenoiserNetwork(task.theta_dim, task.y_dim, config.hidden_dim,
                          config.n_blocks, init_rng)
    opt = OptimizerState(base_lr=config.base_lr)

    # frozen validation noise: early stopping compares like with like
    val_rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed, spawn_key=(4,)))
    t_val = val_rng.integers(1, schedule.T + 1, size=len(th_val))
    eps_val = val_rng.standard_normal(th_val.shape)

    n_train = len(th_train)
    steps_per_epoch = math.ceil(n_train / config.batch_size)
    total_steps = config.max_epochs * steps_per_epoch

    report = TrainingReport()
    best_val = np.inf
    best_params = net.copy_params()
    best_step = 0
    stop_reason = "max_epochs"
    for epoch in range(1, config.max_epochs + 1):
        perm = run_rng.permutation(n_train)
        epoch_loss = 0.0
        try:
            for s in range(0, n_train, config.batch_size):
                idx = perm[s:s + config.batch_size]
                loss, grads = training_loss(net, schedule, th_train[idx], y_train[idx],
                                            run_rng, config.gamma_snr, config.p_uncond)
                lr_now = lr_at(opt.step_count, total_steps, config.base_lr)
                adamw_apply(opt, net, grads, lr_now, config.clip_norm)
                epoch_loss += loss * len(idx)
        except DivergenceError as exc:
            stop_reason = f"diverged: {exc}"
            break
        report.train_losses.append(epoch_loss / n_train)
        val_loss = _validation_loss(net, schedule, th_val, y_val, t_val, eps_val,
                                    config.gamma_snr)
        report.val_losses.append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_params = net.copy_params()
            best_step = opt.step_count
            report.best_epoch = epoch
        if _should_stop(epoch, report.best_epoch, config.patience,
                        config.patience_start_epoch):
            stop_reason = "early_stopping"
            break

    net.set_params(best_params)
    report.stop_reason = stop_reason
    report.wall_clock = time.time() - t_start
    ckpt = Checkpoint(net, schedule, std, config, best_step,
                      uncond_trained=config.p_uncond > 0)
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        path = os.path.join(run_dir, "ckpt.json")
        save_checkpoint(ckpt, path)
        report.checkpoint_path = path
    else:
        ckpt.checkpoint_id = hashlib.sha256(checkpoint_bytes(ckpt)).hexdigest()
    return ckpt, report


# -- posterior sampling at an observation ------------------------------------

def sample_at(ckpt: Checkpoint, y_obs, n: int, seed: int,
              guidance: GuidanceConfig | None = None) -> PosteriorSamples:
    """Draw posterior samples at a raw (simulator-units) observation."""
    std = ckpt.standardizer
    y0 = std.transform_y(y_obs)
    return sample_posterior(ckpt.net, ckpt.schedule, y0, n,
                            guidance or GuidanceConfig(), seed,
                            theta_shift=std.theta_shift, theta_scale=std.theta_scale,
                            uncond_trained=ckpt.uncond_trained,
                            checkpoint_id=ckpt.checkpoint_id)


# -- evaluation --------------------------------------------------------------

def evaluate(ckpt: Checkpoint, task, reference, budget_eval: int, seed: int,
             run_dir: str | None = None) -> dict:
    """Posterior draws at the reference observation, scored against a reference.

    reference: "analytic" (use the task's closed-form posterior), a path to a
    CSV of reference samples, an array, or None (metrics skipped).
    """
    if isinstance(task, str):
        task = get_task(task)
    report: dict = {"task": task.name, "budget_eval": budget_eval,
                    "checkpoint_id": ckpt.checkpoint_id}
    if budget_eval == 0:
        report["notice"] = "budget_eval is 0; nothing to do"
        return report

    y_obs = task.reference_observation(seed=0)
    ps = sample_at(ckpt, y_obs, budget_eval, seed)
    report["n_excluded"] = ps.n_excluded
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        save_posterior(ps, os.path.join(run_dir, "posterior.csv"))

    ref_samples = None
    if isinstance(reference, str) and reference == "analytic":
        if task.analytic_posterior is None:
            report["notice"] = "task has no analytic posterior; metrics skipped"
        else:
            oracle = task.analytic_posterior(y_obs)
            ref_rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(66,)))
            ref_samples = oracle.sample(budget_eval, ref_rng)
    elif isinstance(reference, str):
        ref_samples = np.loadtxt(reference, delimiter=",", skiprows=1, ndmin=2)
    elif reference is not None:
        ref_samples = np.asarray(reference, dtype=np.float64)
    else:
        report["notice"] = "no reference given; metrics skipped"

    if ref_samples is not None:
        report["c2st"] = metrics.c2st(ps.samples, ref_samples, seed=seed).score
        report["mmd"] = metrics.mmd(ps.samples, ref_samples).value
    if run_dir is not None:
        with open(os.path.join(run_dir, "report.txt"), "w") as fh:
            for k, v in report.items():
                fh.write(f"{k}={v}\n")
    return report


def calibrate(ckpt: Checkpoint, task, M: int = 500, L: int = 250, seed: int = 0,
              run_dir: str | None = None):
    """Simulation-based calibration: (ranks, band) with optional CSV export.

    For M prior draws theta_i with simulated y_i, ranks theta_i within L
    posterior draws at y_i.  Calibrated posteriors give uniform ranks.
    """
    if isinstance(task, str):
        task = get_task(task)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(77,)))
    thetas = task.sample_prior(M, rng)
    draws = np.empty((M, L, task.theta_dim))
    for i in range(M):
        y_i = task.simulate(thetas[i], rng)
        ps = sample_at(ckpt, y_i, L, seed=int(rng.integers(2 ** 62)))
        got = ps.samples
        if len(got) < L:
            pad = np.full((L - len(got), task.theta_dim), np.nan)
            got = np.concatenate([got, pad])
        draws[i] = got
    ranks = metrics.sbc_ranks(thetas, draws, rng)
    band = metrics.ecdf_band(ranks)
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        np.savetxt(os.path.join(run_dir, "sbc_ranks.csv"), ranks, delimiter=",",
                   header=",".join(f"theta_{j}" for j in range(task.theta_dim)),
                   comments="")
        cols = [band.u] + list(band.curves) + [-band.half_width, band.half_width]
        names = (["u"] + [f"ecdf_diff_{j}" for j in range(task.theta_dim)]
                 + ["band_lo", "band_hi"])
        np.savetxt(os.path.join(run_dir, "ecdf_band.csv"), np.column_stack(cols),
                   delimiter=",", header=",".join(names), comments="")
    return ranks, band
