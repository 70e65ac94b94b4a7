"""Command-line front end: simulate / train / sample / evaluate / calibrate / tasks.

Every run writes a manifest.txt echoing the resolved configuration, so a run
directory is self-describing and reproducible from its manifest alone.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import pipeline
from .diffusion import GuidanceConfig
from .simulators import get_task, task_names


def _parse_overrides(pairs):
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ValueError(f"--set expects key=value, got {pair!r}")
        key, val = pair.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def _load_config(args) -> pipeline.TrainingConfig:
    file_values = None
    if args.config:
        with open(args.config) as fh:
            file_values = pipeline.parse_config_text(fh.read())
    overrides = _parse_overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return pipeline.resolve_config(file_values, overrides)


def _write_manifest(out_dir: str, config: pipeline.TrainingConfig, extra=()):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        fh.write(f"# written {time.strftime('%Y-%m-%dT%H:%M:%S')}\n")
        for key, val in pipeline.config_items(config):
            fh.write(f"{key}={val}\n")
        for key, val in extra:
            fh.write(f"{key}={val}\n")


def _load_ckpt(path: str) -> pipeline.Checkpoint:
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint file not found: {path}")
    return pipeline.load_checkpoint(path)


def _cmd_tasks(args) -> int:
    for name in task_names():
        t = get_task(name)
        print(f"{name}: theta dim {t.theta_dim}, y dim {t.y_dim}, prior {t.prior_label}")
    return 0


def _cmd_simulate(args) -> int:
    config = _load_config(args)
    _write_manifest(args.out, config, [("command", "simulate")])
    n = args.n if args.n is not None else config.budget
    ds = pipeline.generate_dataset(config.task, n, config.seed)
    path = os.path.join(args.out, "dataset.csv")
    pipeline.save_dataset(ds, path, task_name=config.task, seed=config.seed)
    print(f"wrote {n} rows to {path} ({ds.n_resampled} resampled)")
    return 0


def _cmd_train(args) -> int:
    config = _load_config(args)
    _write_manifest(args.out, config, [("command", "train")])
    ckpt, report = pipeline.train(config, run_dir=args.out)
    print(f"stopped: {report.stop_reason}; best epoch {report.best_epoch}; "
          f"best val loss {min(report.val_losses, default=float('nan')):.6f}")
    print(f"checkpoint {ckpt.checkpoint_id} -> {report.checkpoint_path}")
    return 0


def _cmd_sample(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    _write_manifest(args.out, ckpt.config, [("command", "sample")])
    task = get_task(ckpt.config.task)
    if args.obs:
        y_obs = np.loadtxt(args.obs, delimiter=",", skiprows=1, ndmin=2)[0]
    else:
        y_obs = task.reference_observation(seed=0)
    seed = args.seed if args.seed is not None else 0
    ps = pipeline.sample_at(ckpt, y_obs, args.n, seed,
                            GuidanceConfig(args.guidance))
    path = os.path.join(args.out, "posterior.csv")
    pipeline.save_posterior(ps, path)
    print(f"wrote {len(ps.samples)} draws to {path} ({ps.n_excluded} chains excluded)")
    if args.plots:
        _plot_posterior(ps.samples, os.path.join(args.out, "posterior.svg"))
    return 0


def _cmd_evaluate(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    _write_manifest(args.out, ckpt.config, [("command", "evaluate")])
    seed = args.seed if args.seed is not None else 0
    report = pipeline.evaluate(ckpt, ckpt.config.task, args.reference, args.n,
                               seed, run_dir=args.out)
    for k, v in report.items():
        print(f"{k}={v}")
    return 0


def _cmd_calibrate(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    _write_manifest(args.out, ckpt.config, [("command", "calibrate")])
    seed = args.seed if args.seed is not None else 0
    ranks, band = pipeline.calibrate(ckpt, ckpt.config.task, args.M, args.L,
                                     seed, run_dir=args.out)
    print(f"{len(ranks)} rank vectors -> {args.out}/sbc_ranks.csv")
    if args.plots:
        _plot_ecdf(band, os.path.join(args.out, "ecdf.svg"))
    return 0


def _plot_posterior(samples, path):
    import matplotlib
    matplotlib.use("svg")
    import matplotlib.pyplot as plt
    d = samples.shape[1]
    fig, axes = plt.subplots(d, d, figsize=(2 * d, 2 * d), squeeze=False)
    for i in range(d):
        for j in range(d):
            ax = axes[i][j]
            if i == j:
                ax.hist(samples[:, i], bins=40)
            else:
                ax.plot(samples[:, j], samples[:, i], ".", ms=1, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _plot_ecdf(band, path):
    import matplotlib
    matplotlib.use("svg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.fill_between(band.u, -band.half_width, band.half_width, alpha=0.3,
                    label="90% band")
    for curve in band.curves:
        ax.plot(band.u, curve, lw=1)
    ax.set_xlabel("fractional rank")
    ax.set_ylabel("ECDF difference")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="condisim",
                                description="diffusion-model posterior inference "
                                            "for simulator models")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, ckpt=False):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default="run", help="output directory")
        sp.add_argument("--threads", type=int, default=None,
                        help="cap numpy thread pools")
        if ckpt:
            sp.add_argument("--ckpt", required=True, help="checkpoint file")

    sp = sub.add_parser("tasks", help="list registered tasks")
    sp.set_defaults(fn=_cmd_tasks)

    sp = sub.add_parser("simulate", help="generate a prior-predictive dataset")
    common(sp)
    sp.add_argument("--n", type=int, default=None, help="rows (default: budget)")
    sp.set_defaults(fn=_cmd_simulate)

    sp = sub.add_parser("train", help="train a posterior model")
    common(sp)
    sp.set_defaults(fn=_cmd_train)

    sp = sub.add_parser("sample", help="draw posterior samples at an observation")
    common(sp, ckpt=True)
    sp.add_argument("--obs", help="CSV with a single raw-units observation row "
                                  "(default: the task reference observation)")
    sp.add_argument("--n", type=int, default=10_000)
    sp.add_argument("--guidance", type=float, default=0.0)
    sp.add_argument("--plots", action="store_true")
    sp.set_defaults(fn=_cmd_sample)

    sp = sub.add_parser("evaluate", help="score a checkpoint against a reference")
    common(sp, ckpt=True)
    sp.add_argument("--reference", default="analytic",
                    help='"analytic" or a CSV of reference samples')
    sp.add_argument("--n", type=int, default=10_000, help="evaluation budget")
    sp.set_defaults(fn=_cmd_evaluate)

    sp = sub.add_parser("calibrate", help="simulation-based calibration check")
    common(sp, ckpt=True)
    sp.add_argument("--M", type=int, default=500, help="number of observations")
    sp.add_argument("--L", type=int, default=250, help="posterior draws per observation")
    sp.add_argument("--plots", action="store_true")
    sp.set_defaults(fn=_cmd_calibrate)
    return p


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    if getattr(args, "threads", None):
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        return args.fn(args)
    except (ValueError, KeyError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))
