import shutil

import numpy as np
import pytest

from texnerf import checkpoint, trainer
from texnerf.errors import NonFiniteError, ValidationError
from texnerf.trainer import (
    OptimizerState,
    RayPool,
    TrainConfig,
    adam_step,
    load_model,
    read_metrics,
    sample_batch,
    train,
    window_decrease_fraction,
)

SMALL_FIELD = {"encoding": {"l_pos": 3, "l_dir": 1}, "depth": 2, "width": 16, "hue_layer": 1, "sv_width": 8}


def small_cfg(**kw):
    base = dict(
        iterations=20,
        batch_rays=64,
        samples_per_ray=8,
        log_every=5,
        checkpoint_every=10,
        holdout_rays=32,
        field=SMALL_FIELD,
        seed=3,
    )
    base.update(kw)
    return TrainConfig(**base)


# optimizer


def test_adam_zero_gradient():
    p = {"w": np.array([1.0, -2.0])}
    st = OptimizerState.zeros_like(p)
    adam_step(p, {"w": np.zeros(2)}, st, 0.1)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])
    np.testing.assert_array_equal(st.m["w"], 0.0)
    np.testing.assert_array_equal(st.v["w"], 0.0)


def test_adam_first_step_bound():
    rng = np.random.default_rng(0)
    p0 = rng.normal(size=50)
    g = rng.normal(size=50) * 10.0 ** rng.uniform(-4, 4, 50)
    p = {"w": p0.copy()}
    adam_step(p, {"w": g}, OptimizerState.zeros_like(p), 1e-3)
    dp = p["w"] - p0
    assert np.all(np.sign(dp) == -np.sign(g))
    assert np.all(np.abs(dp) <= 1e-3 * (1 + 1e-9))


def test_adam_quadratic_bowl():
    c = np.array([1.0, -2.0])
    a = np.array([1.0, 10.0])
    p = {"w": np.array([1.5, -1.5])}
    st = OptimizerState.zeros_like(p)
    for k in range(100):
        adam_step(p, {"w": 2 * a * (p["w"] - c)}, st, 0.2 * 0.01 ** (k / 100))
    np.testing.assert_allclose(p["w"], c, atol=1e-3)


def test_adam_shape_mismatch():
    p = {"w": np.zeros(2)}
    with pytest.raises(ValidationError):
        adam_step(p, {"w": np.zeros(3)}, OptimizerState.zeros_like(p), 0.1)


# config


def test_config_validation():
    with pytest.raises(ValidationError, match="unknown"):
        TrainConfig.from_dict({"iterations": 5, "learning_rate": 1.0})
    for kw in ({"batch_rays": 0}, {"iterations": -1}, {"lr": 0.0}, {"near": 2.0, "far": 1.0}, {"dtype": "float16"}):
        with pytest.raises(ValidationError):
            TrainConfig(**kw)
    cfg = TrainConfig(iterations=100)
    assert cfg.lr_at(0) == pytest.approx(5e-4)
    assert cfg.lr_at(100) == pytest.approx(5e-5)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


# batches


def test_sample_batch_unique_and_deterministic(tiny_dataset):
    pool = RayPool.from_dataset(tiny_dataset, range(7))
    cfg = small_cfg(batch_rays=500)
    a = sample_batch(pool, cfg, np.random.default_rng(1), 1.0, 4.0)
    b = sample_batch(pool, cfg, np.random.default_rng(1), 1.0, 4.0)
    assert len(np.unique(a.ray_ids)) == 500
    np.testing.assert_array_equal(a.ray_ids, b.ray_ids)
    np.testing.assert_array_equal(a.t_vals, b.t_vals)
    np.testing.assert_allclose(np.linalg.norm(a.directions, axis=1), 1.0, atol=1e-9)
    assert np.all(np.diff(a.t_vals, axis=1) > 0) and np.all(a.deltas > 0)
    # a batch larger than the pool is capped at the pool
    assert sample_batch(pool, small_cfg(batch_rays=10**6), np.random.default_rng(0), 1.0, 4.0).n_rays == len(pool)


def test_sample_batch_view_marginals(tiny_dataset):
    pool = RayPool.from_dataset(tiny_dataset, range(7))
    cfg = small_cfg(batch_rays=64, samples_per_ray=1)
    rng = np.random.default_rng(2)
    counts = np.zeros(7)
    n_batches = 10_000
    for _ in range(n_batches):
        counts += np.bincount(pool.view_ids[sample_batch(pool, cfg, rng, 1.0, 4.0).ray_ids], minlength=7)
    total = n_batches * 64
    p = 1 / 7
    assert np.all(np.abs(counts - total * p) < 3 * np.sqrt(total * p * (1 - p)))


# training runs


def test_zero_iterations_initial_checkpoint_only(tiny_dataset, tmp_path):
    tr = train(tiny_dataset, small_cfg(iterations=0), tmp_path)
    assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["step_000000.ckpt"]
    assert read_metrics(tmp_path / "metrics.csv") == []
    model, meta = load_model(tmp_path / "checkpoints" / "step_000000.ckpt")
    assert meta["iteration"] == 0
    for n, p in model.params.items():
        np.testing.assert_array_equal(p, tr.model.params[n])


def test_same_seed_bitwise_identical(tiny_dataset, tmp_path):
    train(tiny_dataset, small_cfg(), tmp_path / "a")
    train(tiny_dataset, small_cfg(), tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()
    rows = read_metrics(tmp_path / "a" / "metrics.csv")
    assert [int(r["iter"]) for r in rows] == [5, 10, 15, 20]
    assert all(np.isfinite(float(r["psnr_holdout"])) for r in rows)
    c = train(tiny_dataset, small_cfg(seed=4), tmp_path / "c")
    assert (tmp_path / "c" / "model.ckpt").read_bytes() != (tmp_path / "a" / "model.ckpt").read_bytes()
    assert c.holdout_ids == [7]


def test_resume_matches_uninterrupted(tiny_dataset, tmp_path):
    train(tiny_dataset, small_cfg(), tmp_path / "full")
    shutil.copytree(tmp_path / "full", tmp_path / "resumed")
    (tmp_path / "resumed" / "model.ckpt").unlink()
    train(tiny_dataset, small_cfg(), tmp_path / "resumed", resume_from=tmp_path / "resumed" / "checkpoints" / "step_000010.ckpt")
    for name in ("model.ckpt", "metrics.csv", "checkpoints/step_000020.ckpt"):
        assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "resumed" / name).read_bytes(), name


def test_checkpoint_contents(tiny_dataset, tmp_path):
    train(tiny_dataset, small_cfg(iterations=10), tmp_path)
    tensors, meta = checkpoint.load(tmp_path / "model.ckpt")
    assert meta["iteration"] == 10 and meta["adam_step"] == 10
    assert meta["field_config"]["density_bias"] == trainer.DENSITY_BIAS
    assert {k.split("/")[0] for k in tensors} == {"param", "adam_m", "adam_v", "sampler"}
    assert meta["near"] == tiny_dataset.near and meta["far"] == tiny_dataset.far


def test_epoch_sampling_covers_pool_once(tiny_dataset, tmp_path):
    tr = trainer.Trainer(tiny_dataset, small_cfg(batch_rays=100), tmp_path)
    n_pool = len(tr.pool)
    per_epoch = n_pool // 100
    seen = np.concatenate([tr._next_indices() for _ in range(per_epoch)])
    assert len(np.unique(seen)) == per_epoch * 100
    # the next batch starts a fresh permutation
    first = tr._next_indices()
    assert tr.cursor == 100 and np.array_equal(first, tr.order[:100])
    with pytest.raises(ValidationError):
        TrainConfig(sampling="sequential")


def test_uniform_sampling_runs(tiny_dataset, tmp_path):
    tr = train(tiny_dataset, small_cfg(iterations=5, sampling="uniform"), tmp_path)
    assert tr.iteration == 5 and tr.order.size == 0


def test_non_finite_loss_aborts(tiny_dataset, tmp_path, monkeypatch):
    real = trainer.backward
    calls = {"n": 0}

    def flaky(model, batch):
        calls["n"] += 1
        loss, terms, grads = real(model, batch)
        return (float("nan") if calls["n"] == 7 else loss), terms, grads

    monkeypatch.setattr(trainer, "backward", flaky)
    with pytest.raises(NonFiniteError):
        train(tiny_dataset, small_cfg(), tmp_path)
    assert (tmp_path / "checkpoints" / "step_000000.ckpt").exists()
    assert not (tmp_path / "model.ckpt").exists()
    assert [int(r["iter"]) for r in read_metrics(tmp_path / "metrics.csv")] == [5]


def test_window_decrease_fraction():
    assert window_decrease_fraction([3, 2, 1]) == 1.0
    assert window_decrease_fraction([3, 2, 2.5, 1, 0.5]) == 0.75
    assert window_decrease_fraction([1]) == 1.0
