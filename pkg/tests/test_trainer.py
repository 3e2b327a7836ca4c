import math

import numpy as np
import pytest

from s3shift.datasets import FeatureDataset, synth_dataset
from s3shift.network import ModelConfig, ResNet
from s3shift.trainer import (CheckpointError, TrainConfig, adam_step, checkpoint_bytes, confusion_matrix,
                             cosine_lr, evaluate, history_csv, load_checkpoint, save_checkpoint, sgd_step,
                             train)


@pytest.fixture(scope="module")
def small():
    return synth_dataset(classes=4, per_class=10, rng=3, frames=8)


def run(small, mode="s3", epochs=4, seed=5, **kw):
    cfg = TrainConfig(epochs=epochs, lr=0.02, seed=seed, mode=mode, t_fixed=8, **kw)
    model = ResNet(ModelConfig("toy", 4, mode), seed=seed)
    return train(model, small.train, small.val, cfg)


def test_cosine_endpoints_and_monotone():
    lr0, eta, T = 0.1, 0.001, 200
    assert abs(cosine_lr(0, T, lr0, eta) - lr0) <= 1e-12
    assert abs(cosine_lr(T, T, lr0, eta) - eta) <= 1e-12
    assert abs(cosine_lr(T / 2, T, lr0, eta) - (lr0 + eta) / 2) <= 1e-12
    lrs = [cosine_lr(t / 4, T, lr0, eta) for t in range(4 * T + 1)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        cosine_lr(T + 1, T, lr0)


def test_sgd_examples():
    theta = np.array([1.5, -2.0])
    new, _ = sgd_step(theta, np.array([3.0, 4.0]), np.zeros(2), 0.0, 0.9)
    np.testing.assert_array_equal(new, theta)
    new, _ = sgd_step(np.zeros(1), np.ones(1), np.zeros(1), 0.1, 0.0)
    assert new[0] == pytest.approx(-0.1)
    theta, v = np.zeros(1), np.zeros(1)
    for _ in range(2):
        theta, v = sgd_step(theta, np.ones(1), v, 1.0, 0.9)
    assert theta[0] == pytest.approx(-2.9, abs=1e-12)


def adam_reference(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return theta


def test_adam_against_scalar_reference():
    grads = [0.5, -1.0, 2.0, 0.1, 0.0]
    state, theta = {}, np.array([0.3])
    for g in grads:
        theta = adam_step(theta, np.array([g]), state, 0.01)
    assert theta[0] == pytest.approx(adam_reference(0.3, grads, 0.01), rel=1e-12)
    state, theta = {}, np.array([1.0, -1.0])
    for _ in range(5):
        theta = adam_step(theta, np.zeros(2), state, 0.1)
    np.testing.assert_array_equal(theta, [1.0, -1.0])


def test_config_validation():
    for bad in (dict(epochs=0), dict(batch_size=0), dict(lr=0), dict(momentum=1.0), dict(mode="q5"),
                dict(optimizer="rmsprop")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    assert TrainConfig(mode="d3").resolved_optimizer() == "adam"
    assert TrainConfig(mode="s3").resolved_optimizer() == "sgd"


class ConstantModel:
    dtype = np.dtype(np.float32)

    def forward(self, x, training=False):
        return np.tile([[1.0, 0.0]], (len(x), 1))


def test_evaluate_examples():
    feats = [np.zeros((3, 400), np.float32)] * 4
    assert evaluate(ConstantModel(), FeatureDataset(feats, np.array([0, 0, 0, 0])), 3) == 1.0
    balanced = FeatureDataset(feats, np.array([0, 1, 0, 1]))
    assert evaluate(ConstantModel(), balanced, 3) == 0.5
    with pytest.raises(ValueError):
        evaluate(ConstantModel(), FeatureDataset([], np.zeros(0, int)), 3)


def test_confusion_matrix_rows_are_class_counts():
    y = np.array([0, 0, 1, 2, 2, 2])
    cm = confusion_matrix(y, np.array([0, 1, 1, 2, 0, 2]), 3)
    assert cm.sum(axis=1).tolist() == [2, 1, 3]
    assert np.trace(cm) == 4


def test_history_and_best_selection(small):
    best, history = run(small, epochs=4)
    assert len(history) == 4
    accs = [h["val_acc"] for h in history]
    assert best.best_val_acc == max(accs)
    assert best.best_epoch == max(i for i, a in enumerate(accs) if a == max(accs))
    assert history_csv(history).count("\n") == 5


def test_training_is_deterministic(small):
    _, h1 = run(small, epochs=3)
    _, h2 = run(small, epochs=3)
    assert history_csv(h1) == history_csv(h2)


def test_checkpoint_round_trip_bytes(tmp_path, small):
    best, _ = run(small, epochs=2)
    save_checkpoint(best, tmp_path / "a.s3ck")
    loaded = load_checkpoint(tmp_path / "a.s3ck")
    for k, v in best.params.items():
        np.testing.assert_array_equal(loaded.params[k], v)
        assert loaded.params[k].dtype == v.dtype
    save_checkpoint(loaded, tmp_path / "b.s3ck")
    assert (tmp_path / "a.s3ck").read_bytes() == (tmp_path / "b.s3ck").read_bytes()
    raw = (tmp_path / "a.s3ck").read_bytes()
    assert raw[:4] == b"S3CK"


def test_checkpoint_rejects_corruption(tmp_path, small):
    best, _ = run(small, epochs=1)
    raw = checkpoint_bytes(best)
    cases = {"magic": b"XXXX" + raw[4:], "version": raw[:4] + (99).to_bytes(4, "little") + raw[8:],
             "truncated": raw[:-10], "trailing": raw + b"\0"}
    for name, data in cases.items():
        (tmp_path / name).write_bytes(data)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / name)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "magic")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.s3ck")


@pytest.mark.parametrize("mode", ["s3", "d3"])
def test_resume_reproduces_uninterrupted_run(tmp_path, small, mode):
    cfg = TrainConfig(epochs=4, lr=0.02, seed=9, mode=mode, t_fixed=8)
    snaps = {}
    full_best, full = train(ResNet(ModelConfig("toy", 4, mode), seed=9), small.train, small.val, cfg,
                            on_epoch=lambda e, ck: snaps.__setitem__(e, ck))
    k = 1
    resumed_model = ResNet(ModelConfig("toy", 4, mode), seed=123)  # different init, fully overwritten
    save_checkpoint(snaps[k], tmp_path / "last.s3ck")
    resume = load_checkpoint(tmp_path / "last.s3ck")
    best_so_far = snaps[max(e for e in snaps if e <= k and snaps[e].best_epoch == e)]
    best, resumed = train(resumed_model, small.train, small.val, cfg, resume=resume, resume_best=best_so_far)
    assert [h["train_loss"] for h in resumed] == [h["train_loss"] for h in full]
    assert history_csv(resumed) == history_csv(full)
    assert best.best_epoch == full_best.best_epoch


def test_s3_smoke_run_halves_loss():
    data = synth_dataset(classes=4, per_class=50, rng=7, frames=8)
    cfg = TrainConfig(epochs=8, lr=0.02, seed=7, mode="s3", t_fixed=8)
    _, history = train(ResNet(ModelConfig("toy", 4, "s3"), seed=7), data.train, data.val, cfg)
    assert history[-1]["train_loss"] < 0.5 * history[0]["train_loss"]


def test_training_rejects_empty_sets(small):
    empty = FeatureDataset([], np.zeros(0, int))
    with pytest.raises(ValueError):
        train(ResNet(ModelConfig("toy", 4, "fp32")), empty, small.val, TrainConfig(epochs=1))


def test_sparse_regularizer_pulls_gates_open(small):
    # With dense init the penalty starts at 0 and rises as gates close; a larger
    # lambda must keep it lower, and a strong one turns the trend downward.
    finals = {}
    for lam in (0.0, 1e-2, 1e-1):
        _, h = run(small, epochs=10, seed=7, lambda_sparse=lam)
        finals[lam] = [row["reg_value"] for row in h]
    assert finals[0.0][-1] > finals[1e-2][-1] > finals[1e-1][-1]
    strong = finals[1e-1]
    assert np.mean(strong[5:]) < max(strong)
    assert all(a >= b for a, b in zip(strong[4:], strong[5:]))
