import os

import numpy as np
import pytest

from condisim import pipeline
from condisim.net import DenoiserNetwork
from condisim.pipeline import (Checkpoint, Standardizer, TrainingConfig,
                               _should_stop, checkpoint_bytes, config_items,
                               default_config, fit_standardizer,
                               generate_dataset, load_checkpoint,
                               load_dataset, parse_config_text,
                               resolve_config, save_checkpoint, save_dataset,
                               train)
from condisim.schedule import make_schedule
from condisim.simulators import get_task


def _tiny_config(**kw):
    base = dict(budget=256, max_epochs=3, patience=2, patience_start_epoch=1,
                seed=0)
    base.update(kw)
    return default_config("two_moons", **base)


# -- config ------------------------------------------------------------------

def test_training_config_validation():
    with pytest.raises(ValueError):
        TrainingConfig(task="two_moons", val_fraction=0.0)
    with pytest.raises(ValueError):
        TrainingConfig(task="two_moons", budget=10, batch_size=32)
    with pytest.raises(ValueError):
        TrainingConfig(task="two_moons", budget=100, batch_size=32, p_uncond=1.5)


def test_presets_match_published_rows():
    cfg = default_config("two_moons")
    assert (cfg.n_blocks, cfg.hidden_dim, cfg.schedule_kind,
            cfg.schedule_steps, cfg.batch_size, cfg.base_lr) == \
        (4, 64, "cosine", 160, 32, 1e-3)
    gl = default_config("gaussian_linear")
    assert (gl.n_blocks, gl.hidden_dim, gl.schedule_steps, gl.batch_size,
            gl.base_lr) == (6, 64, 100, 50, 2e-4)
    assert gl.schedule_kind == "scaled_linear"


def test_parse_config_text_roundtrip():
    text = """
    # a comment
    task = two_moons
    schedule.kind = cosine
    schedule.steps = 80
    base_lr = 5e-4  # trailing comment
    """
    vals = parse_config_text(text)
    cfg = resolve_config(vals)
    assert cfg.task == "two_moons"
    assert cfg.schedule_steps == 80
    assert cfg.base_lr == 5e-4


def test_parse_config_rejects_unknown_key():
    with pytest.raises(ValueError):
        parse_config_text("learning_rate = 0.1")
    with pytest.raises(ValueError):
        resolve_config({"task": "two_moons"}, {"bogus": "1"})


def test_resolve_config_requires_task():
    with pytest.raises(ValueError):
        resolve_config({}, {})


def test_config_items_roundtrip():
    cfg = _tiny_config(base_lr=3e-4)
    again = resolve_config(dict(config_items(cfg)))
    assert again == cfg


# -- standardizer ------------------------------------------------------------

def test_standardizer_identity_on_standard_data():
    rng = np.random.default_rng(0)
    th = rng.standard_normal((50_000, 3))
    y = rng.standard_normal((50_000, 2))
    std = fit_standardizer(th, y)
    assert np.allclose(std.theta_shift, 0, atol=0.02)
    assert np.allclose(std.theta_scale, 1, atol=0.02)


def test_standardizer_roundtrip():
    rng = np.random.default_rng(1)
    th = 5 + 3 * rng.standard_normal((100, 4))
    y = -2 + 0.1 * rng.standard_normal((100, 2))
    std = fit_standardizer(th, y)
    assert np.allclose(std.invert_theta(std.transform_theta(th)), th,
                       rtol=0, atol=1e-12)
    assert np.allclose(std.invert_y(std.transform_y(y)), y, rtol=0, atol=1e-12)


def test_standardizer_constant_coordinate_floored():
    th = np.ones((10, 2))
    y = np.random.default_rng(0).standard_normal((10, 2))
    with pytest.warns(UserWarning):
        std = fit_standardizer(th, y)
    assert np.all(std.theta_scale >= 1e-8)


def test_standardizer_train_only_statistics():
    rng = np.random.default_rng(2)
    train_part = rng.standard_normal((100, 2))
    val_part = 10 + rng.standard_normal((100, 2))
    a = fit_standardizer(train_part, train_part)
    b = fit_standardizer(np.concatenate([train_part, val_part]),
                         np.concatenate([train_part, val_part]))
    assert not np.allclose(a.theta_shift, b.theta_shift)


def test_standardizer_empty_rejected():
    with pytest.raises(ValueError):
        fit_standardizer(np.empty((0, 2)), np.empty((0, 2)))


# -- dataset -----------------------------------------------------------------

def test_generate_dataset_shapes_and_determinism():
    a = generate_dataset("two_moons", 50, seed=3)
    b = generate_dataset("two_moons", 50, seed=3)
    assert a.theta.shape == (50, 2) and a.y.shape == (50, 2)
    assert np.array_equal(a.theta, b.theta)
    assert np.array_equal(a.y, b.y)
    c = generate_dataset("two_moons", 50, seed=4)
    assert not np.array_equal(a.y, c.y)


def test_generate_dataset_single_row_and_csv(tmp_path):
    ds = generate_dataset("two_moons", 1, seed=0)
    path = str(tmp_path / "dataset.csv")
    save_dataset(ds, path, task_name="two_moons", seed=0)
    with open(path) as fh:
        lines = fh.read().splitlines()
    assert lines[0] == "theta_0,theta_1,y_0,y_1"
    assert len(lines) == 2
    assert os.path.exists(path + ".meta.txt")
    back = load_dataset(path)
    assert np.allclose(back.theta, ds.theta)
    assert np.allclose(back.y, ds.y)


def test_dataset_file_bytes_deterministic(tmp_path):
    p1, p2 = str(tmp_path / "a.csv"), str(tmp_path / "b.csv")
    save_dataset(generate_dataset("two_moons", 20, seed=5), p1)
    save_dataset(generate_dataset("two_moons", 20, seed=5), p2)
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_generate_dataset_resamples_failures(monkeypatch):
    task = get_task("two_moons")
    calls = {"n": 0}
    orig = task.simulate

    def flaky(theta, rng):
        calls["n"] += 1
        if calls["n"] % 3 == 1:
            raise FloatingPointError("synthetic abort")
        return orig(theta, rng)

    object.__setattr__(task, "simulate", flaky)
    ds = generate_dataset(task, 10, seed=0)
    assert len(ds.theta) == 10
    assert ds.n_resampled > 0


# -- training loop -----------------------------------------------------------

def test_patience_counter_semantics():
    # flat validation loss from epoch 51 stops at epoch 81
    stop_epoch = None
    for epoch in range(1, 200):
        best_epoch = 50
        if _should_stop(epoch, best_epoch, patience=30, start_epoch=50):
            stop_epoch = epoch
            break
    assert stop_epoch == 81


def test_patience_not_counted_before_start():
    assert not _should_stop(40, 5, patience=30, start_epoch=50)
    assert not _should_stop(80, 60, patience=30, start_epoch=50)
    assert _should_stop(91, 60, patience=30, start_epoch=50)


def test_train_improves_validation(tmp_path):
    cfg = default_config("two_moons", budget=2000, max_epochs=20,
                         patience=50, seed=0)
    ckpt, report = train(cfg, run_dir=str(tmp_path))
    assert report.val_losses[-1] < report.val_losses[0]
    assert report.stop_reason in ("max_epochs", "early_stopping")
    assert min(report.val_losses) == report.val_losses[report.best_epoch - 1]
    assert os.path.exists(report.checkpoint_path)


def test_train_null_embedding_untouched_when_p_uncond_zero():
    cfg = _tiny_config()
    ckpt, _ = train(cfg)
    assert np.array_equal(ckpt.net.params["null_cond"],
                          np.zeros_like(ckpt.net.params["null_cond"]))
    assert not ckpt.uncond_trained


def test_train_null_embedding_moves_with_p_uncond():
    cfg = _tiny_config(p_uncond=0.2)
    ckpt, _ = train(cfg)
    assert np.any(ckpt.net.params["null_cond"] != 0)
    assert ckpt.uncond_trained


def test_train_reproducible_checkpoint_bytes(tmp_path):
    cfg = _tiny_config(seed=11)
    c1, _ = train(cfg, run_dir=str(tmp_path / "r1"))
    c2, _ = train(cfg, run_dir=str(tmp_path / "r2"))
    b1 = open(tmp_path / "r1" / "ckpt.json", "rb").read()
    b2 = open(tmp_path / "r2" / "ckpt.json", "rb").read()
    assert b1 == b2
    assert c1.checkpoint_id == c2.checkpoint_id


def test_validation_loss_frozen_draws():
    from condisim.pipeline import _validation_loss
    rng = np.random.default_rng(0)
    net = DenoiserNetwork(2, 2, 16, 2, rng)
    sched = make_schedule("cosine", 20)
    th, y = rng.standard_normal((64, 2)), rng.standard_normal((64, 2))
    t_val = rng.integers(1, 21, size=64)
    eps = rng.standard_normal((64, 2))
    a = _validation_loss(net, sched, th, y, t_val, eps, 5.0)
    b = _validation_loss(net, sched, th, y, t_val, eps, 5.0)
    assert a == b


# -- checkpoints -------------------------------------------------------------

def _small_checkpoint():
    rng = np.random.default_rng(0)
    net = DenoiserNetwork(2, 2, 16, 2, rng)
    for k in net.params:
        net.params[k] = 0.1 * rng.standard_normal(net.params[k].shape)
    std = Standardizer(rng.standard_normal(2), 1 + rng.random(2),
                       rng.standard_normal(2), 1 + rng.random(2))
    return Checkpoint(net, make_schedule("cosine", 30), std,
                      default_config("two_moons", hidden_dim=16, n_blocks=2,
                                     schedule_steps=30),
                      opt_step=123, uncond_trained=False)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    ckpt = _small_checkpoint()
    path = str(tmp_path / "ckpt.json")
    cid = save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert back.checkpoint_id == cid
    assert back.opt_step == 123
    for k, v in ckpt.net.params.items():
        assert np.array_equal(back.net.params[k], v), k
    for f in ("theta_shift", "theta_scale", "y_shift", "y_scale"):
        assert np.array_equal(getattr(back.standardizer, f),
                              getattr(ckpt.standardizer, f))
    assert back.schedule.kind == "cosine" and back.schedule.T == 30


def test_checkpoint_sampling_roundtrip_bit_exact(tmp_path):
    ckpt = _small_checkpoint()
    path = str(tmp_path / "ckpt.json")
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    y = np.array([0.3, -0.7])
    a = pipeline.sample_at(ckpt, y, 16, seed=5)
    b = pipeline.sample_at(back, y, 16, seed=5)
    assert np.array_equal(a.samples, b.samples)


def test_checkpoint_magic_rejected(tmp_path):
    path = str(tmp_path / "bad.json")
    with open(path, "w") as fh:
        fh.write('{"magic": "nope"}')
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_checkpoint_bytes_stable():
    ckpt = _small_checkpoint()
    assert checkpoint_bytes(ckpt) == checkpoint_bytes(ckpt)


# -- evaluate / calibrate ----------------------------------------------------

@pytest.fixture(scope="module")
def gl_tiny_ckpt():
    cfg = default_config("gaussian_linear", budget=1500, max_epochs=25,
                         patience=50, seed=1)
    ckpt, _ = train(cfg)
    return ckpt


def test_evaluate_budget_zero(gl_tiny_ckpt):
    report = pipeline.evaluate(gl_tiny_ckpt, "gaussian_linear", "analytic", 0, 0)
    assert "notice" in report
    assert "c2st" not in report


def test_evaluate_missing_reference(gl_tiny_ckpt, tmp_path):
    report = pipeline.evaluate(gl_tiny_ckpt, "gaussian_linear", None, 200, 0,
                               run_dir=str(tmp_path))
    assert "notice" in report
    assert os.path.exists(tmp_path / "posterior.csv")


def test_evaluate_against_analytic(gl_tiny_ckpt):
    report = pipeline.evaluate(gl_tiny_ckpt, "gaussian_linear", "analytic", 300, 0)
    assert 0.0 <= report["c2st"] <= 1.0
    assert np.isfinite(report["mmd"])


def test_evaluate_self_reference_near_half(gl_tiny_ckpt):
    task = get_task("gaussian_linear")
    y_obs = task.reference_observation(seed=0)
    mine = pipeline.sample_at(gl_tiny_ckpt, y_obs, 600, seed=2).samples
    report = pipeline.evaluate(gl_tiny_ckpt, task, mine[300:], 300, 2)
    # P vs Q from the same sampler: no separability
    assert abs(report["c2st"] - 0.5) < 0.1


def test_calibrate_exports(gl_tiny_ckpt, tmp_path):
    ranks, band = pipeline.calibrate(gl_tiny_ckpt, "gaussian_linear",
                                     M=60, L=20, seed=0,
                                     run_dir=str(tmp_path))
    assert ranks.shape[1] == 10
    assert len(ranks) <= 60
    assert np.all((ranks >= 0) & (ranks <= 1))
    assert os.path.exists(tmp_path / "sbc_ranks.csv")
    assert os.path.exists(tmp_path / "ecdf_band.csv")
