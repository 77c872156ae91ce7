"""Synthetic data, the crank-turn training loop, and the ablation lattice."""

import numpy as np
import pytest

from fmvit.errors import SpecError, TrainingDiverged
from fmvit.nn import Module
from fmvit.tensor import Tensor
from fmvit.trainer import (ConvBaseline, TrainConfig, ablation_suite,
                           evaluate, generate_dataset, prediction_match,
                           train)


# ---------------------------------------------------------------------------
# datasets


def test_dataset_determinism_and_checksum():
    a = generate_dataset(seed=3, n_samples=24, n_classes=4)
    b = generate_dataset(seed=3, n_samples=24, n_classes=4)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert a.checksum() == b.checksum()
    c = generate_dataset(seed=4, n_samples=24, n_classes=4)
    assert c.checksum() != a.checksum()


def test_dataset_label_balance():
    ds = generate_dataset(seed=0, n_samples=26, n_classes=4)
    counts = np.bincount(ds.labels, minlength=4)
    assert counts.max() - counts.min() <= 1
    assert ds.images.shape == (26, 3, 32, 32)
    assert ds.images.dtype == np.float32


def test_dataset_validation():
    with pytest.raises(SpecError):
        generate_dataset(seed=0, n_samples=0, n_classes=4)
    with pytest.raises(SpecError):
        generate_dataset(seed=0, n_samples=8, n_classes=1)
    with pytest.raises(SpecError):
        generate_dataset(seed=0, n_samples=8, n_classes=4,
                         image_dims=(1, 32, 32),
                         generator_kind="colored-shape-classes")
    with pytest.raises(SpecError):
        generate_dataset(seed=0, n_samples=8, n_classes=4,
                         generator_kind="volumetric-plasma")


def test_shape_generator_runs():
    ds = generate_dataset(seed=1, n_samples=12, n_classes=6,
                          generator_kind="colored-shape-classes")
    assert ds.images.shape == (12, 3, 32, 32)
    assert np.isfinite(ds.images).all()


def test_batch_stream_permutes_each_epoch():
    ds = generate_dataset(seed=2, n_samples=8, n_classes=4, image_dims=(3, 16, 16))
    stream = ds.batches(batch_size=4, seed=5)
    first_epoch = [next(stream)[1].data for _ in range(2)]
    second_epoch = [next(stream)[1].data for _ in range(2)]
    assert sorted(np.concatenate(first_epoch).tolist()) == \
           sorted(np.concatenate(second_epoch).tolist())
    # same seed reproduces the stream
    stream2 = ds.batches(batch_size=4, seed=5)
    np.testing.assert_array_equal(next(stream2)[0].data, ds.images[ds_first_idx(ds, 5)])


def ds_first_idx(ds, seed):
    order = np.random.default_rng(seed).permutation(ds.n_samples)
    return order[:4]


# ---------------------------------------------------------------------------
# config


def test_config_validation():
    TrainConfig(steps=1, batch_size=1, lr=0.0)        # frozen run is allowed
    with pytest.raises(SpecError):
        TrainConfig(steps=0, batch_size=1, lr=0.1)
    with pytest.raises(SpecError):
        TrainConfig(steps=1, batch_size=0, lr=0.1)
    with pytest.raises(SpecError):
        TrainConfig(steps=1, batch_size=1, lr=-0.1)
    with pytest.raises(SpecError):
        TrainConfig(steps=4, batch_size=1, lr=0.1, warmup_steps=5)
    with pytest.raises(SpecError):
        TrainConfig(steps=1, batch_size=1, lr=0.1, optimizer="lion")


def test_lr_schedule_endpoints():
    cfg = TrainConfig(steps=100, batch_size=1, lr=0.8, warmup_steps=10)
    assert cfg.lr_at(0) == pytest.approx(0.8 / 10)     # first warmup step
    assert cfg.lr_at(9) == pytest.approx(0.8)          # warmup peak
    assert cfg.lr_at(99) < cfg.lr_at(50) < cfg.lr_at(10)
    assert cfg.lr_at(99) == pytest.approx(
        0.8 * 0.5 * (1 + np.cos(np.pi * 89 / 90)))
    flat = TrainConfig(steps=10, batch_size=1, lr=0.5)
    assert flat.lr_at(0) == pytest.approx(0.5)


# ---------------------------------------------------------------------------
# training loop


def _tiny_setup(optimizer="sgd-momentum", lr=0.05):
    ds = generate_dataset(seed=0, n_samples=16, n_classes=4,
                          image_dims=(3, 16, 16))
    model = ConvBaseline(classes=4, rng=np.random.default_rng(0))
    cfg = TrainConfig(steps=30, batch_size=8, lr=lr, optimizer=optimizer,
                      warmup_steps=3, seed=1)
    return model, ds, cfg


@pytest.mark.parametrize("optimizer", ["sgd-momentum", "adamw-lite"])
def test_loss_decreases(optimizer):
    model, ds, cfg = _tiny_setup(optimizer, lr=0.02)
    history = train(model, ds, cfg)
    assert len(history) == cfg.steps
    assert history[-1]["loss"] < history[0]["loss"]
    assert history[0]["lr"] == pytest.approx(cfg.lr_at(0))
    assert not model.training        # left in eval mode


def test_eval_interval_rows():
    model, ds, _ = _tiny_setup()
    cfg = TrainConfig(steps=6, batch_size=8, lr=0.02, seed=1, eval_every=3)
    history = train(model, ds, cfg)
    has_eval = [("eval_acc" in row) for row in history]
    assert has_eval == [False, False, True, False, False, True]
    assert all(0.0 <= row["eval_acc"] <= 1.0 for row in history if "eval_acc" in row)
    assert model.training is False
    with pytest.raises(SpecError):
        TrainConfig(steps=5, batch_size=8, lr=0.1, eval_every=-1)


def test_zero_lr_freezes_weights():
    model, ds, _ = _tiny_setup()
    before = {k: v.copy() for k, v in model.state_dict().items()}
    cfg = TrainConfig(steps=5, batch_size=8, lr=0.0, seed=1)
    train(model, ds, cfg)
    after = model.state_dict()
    for k in before:
        np.testing.assert_array_equal(before[k], after[k])


def test_training_determinism():
    m1, ds, cfg = _tiny_setup()
    h1 = train(m1, ds, cfg)
    m2, _, _ = _tiny_setup()
    h2 = train(m2, ds, cfg)
    assert h1 == h2
    for k, v in m1.state_dict().items():
        np.testing.assert_array_equal(v, m2.state_dict()[k])


def test_divergence_aborts():
    model, ds, _ = _tiny_setup()
    cfg = TrainConfig(steps=200, batch_size=8, lr=5e4, optimizer="sgd-momentum",
                      seed=1)
    with pytest.raises(TrainingDiverged):
        train(model, ds, cfg)


def test_evaluate_and_prediction_match():
    model, ds, cfg = _tiny_setup(lr=0.02)
    train(model, ds, cfg)
    res = evaluate(model, ds, batch_size=8)
    assert res.n_samples == 16
    assert 0.0 <= res.accuracy <= 1.0
    assert np.isfinite(res.mean_loss)
    assert prediction_match(model, model, ds) == 1.0

    other = ConvBaseline(classes=4, rng=np.random.default_rng(99))
    assert prediction_match(model, other, ds) <= 1.0


def test_baseline_learns_textures():
    ds = generate_dataset(seed=0, n_samples=64, n_classes=4)
    model = ConvBaseline(classes=4, rng=np.random.default_rng(0))
    cfg = TrainConfig(steps=120, batch_size=16, lr=0.02,
                      optimizer="adamw-lite", warmup_steps=12,
                      weight_decay=0.01, seed=2)
    train(model, ds, cfg)
    assert evaluate(model, ds, batch_size=32).accuracy >= 0.8


# ---------------------------------------------------------------------------
# ablation lattice


def test_ablation_structure_without_training():
    rows = ablation_suite(variant="nano", classes=8,
                          input_dims=(1, 3, 32, 32), seed=0)
    names = [r.name for r in rows]
    assert names == ["attn-baseline", "shared-attn", "shared-attn+mlp", "full"]
    toggles = [(r.use_fmb, r.use_gmlp, r.use_rlmhsa) for r in rows]
    assert toggles == [(False, False, False), (False, False, True),
                       (False, True, True), (True, True, True)]
    for r in rows:
        assert r.deployed_params <= r.train_params
        assert r.macs > 0
        assert r.accuracy is None
    # shared-weight attention is strictly smaller than the three-matrix form
    assert rows[1].attn_params < rows[0].attn_params
    # the extra training-form branches vanish on fusion
    assert rows[1].deployed_params == rows[2].deployed_params
    assert rows[1].macs == rows[2].macs


def test_ablation_rejects_partial_toggles():
    with pytest.raises(SpecError):
        ablation_suite(variant="nano", classes=8, input_dims=(1, 3, 32, 32),
                       toggles=[("half", {"use_fmb": True})])
    ds = generate_dataset(seed=0, n_samples=8, n_classes=4,
                          image_dims=(3, 16, 16))
    with pytest.raises(SpecError):
        ablation_suite(variant="nano", classes=4, dataset=ds)  # config missing
