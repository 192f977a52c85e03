import copy

import numpy as np
import pytest

from megphone import models
from megphone.augment import AugmentConfig
from megphone.data import generate_synthetic
from megphone.errors import ConfigurationError, NumericFault, TrainingDiverged
from megphone.metrics import f1_macro
from megphone.models import ModelSpec, build
from megphone.sampling import SamplingPlan
from megphone.training import (
    AdamState,
    EpochRecord,
    TrainConfig,
    TrainLog,
    adamw_step,
    clip_grad_norm,
    evaluate_split,
    train,
)


def scalar_adamw(theta, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        theta = theta - lr * (m_hat / (v_hat**0.5 + eps) + wd * theta)
    return theta


def toy(n_per_class=10, n_classes=2, snr=4.0, seed=0):
    return generate_synthetic(n_per_class, snr, seed, n_classes=n_classes, n_channels=8, n_times=20)


def toy_spec(n_classes=2, **kw):
    return ModelSpec(hidden_dim=8, n_channels=8, n_times=20, n_classes=n_classes, n_blocks=3, kernel_size=3, **kw)


def toy_config(**kw):
    base = dict(
        lr=1e-2,
        epochs=3,
        batch_size=8,
        sampling=SamplingPlan(group_size=1, balance=True),
        augment=AugmentConfig.disabled(),
    )
    base.update(kw)
    return TrainConfig(**base)


class TestAdamW:
    def test_first_step(self):
        theta = np.array([1.0])
        adamw_step({"w": theta}, {"w": np.array([1.0])}, AdamState(), lr=0.1, weight_decay=0.0)
        assert theta[0] == pytest.approx(0.9, abs=1e-6)

    def test_zero_grad_no_decay_unchanged(self):
        theta = np.array([1.5, -2.0])
        state = AdamState()
        for _ in range(5):
            adamw_step({"w": theta}, {"w": np.zeros(2)}, state, lr=0.1, weight_decay=0.0)
        np.testing.assert_array_equal(theta, [1.5, -2.0])

    def test_decay_is_decoupled(self):
        # zero gradient: only the decay term acts, theta *= (1 - lr * wd)
        theta = np.array([2.0])
        adamw_step({"w": theta}, {"w": np.zeros(1)}, AdamState(), lr=0.1, weight_decay=0.5)
        assert theta[0] == pytest.approx(2.0 * (1 - 0.05), abs=1e-12)

    def test_matches_scalar_oracle_100_steps(self):
        rng = np.random.default_rng(0)
        grads = rng.standard_normal(100)
        theta = np.array([0.7])
        state = AdamState()
        for g in grads:
            adamw_step({"w": theta}, {"w": np.array([g])}, state, lr=1e-2, weight_decay=1e-2)
        assert abs(theta[0] - scalar_adamw(0.7, grads, 1e-2, 1e-2)) <= 1e-6
        assert state.step == 100

    @pytest.mark.parametrize("bad", [np.nan, np.inf])
    def test_non_finite_rejects_whole_step(self, bad):
        a, b = np.ones(3), np.ones(2)
        state = AdamState()
        with pytest.raises(NumericFault, match="b"):
            adamw_step({"a": a, "b": b}, {"a": np.ones(3), "b": np.array([1.0, bad])}, state, 0.1, 0.0)
        np.testing.assert_array_equal(a, np.ones(3))
        assert state.step == 0 and not state.m


def test_clip_grad_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_grad_norm(grads, 1.0) == pytest.approx(5.0)
    assert np.sqrt(grads["a"] ** 2 + grads["b"] ** 2)[0] == pytest.approx(1.0)
    small = {"a": np.array([0.1])}
    clip_grad_norm(small, 5.0)
    assert small["a"][0] == 0.1


class TestTrainLog:
    def test_best_epoch_ties_earliest(self):
        log = TrainLog([EpochRecord(e, 1.0, 0.1, f, 0.1) for e, f in [(1, 0.2), (2, 0.5), (3, 0.5), (4, 0.1)]])
        assert log.best_epoch == 2

    def test_csv_round_trip(self, tmp_path):
        log = TrainLog([EpochRecord(1, 0.123456789, 0.25, 1 / 3, 0.2), EpochRecord(2, 0.1, 0.3, 0.4, 0.3)])
        path = tmp_path / "log.csv"
        log.write_csv(path)
        header = path.read_text().splitlines()[0]
        assert header.startswith("epoch,train_loss,train_f1,val_f1,is_best")
        assert TrainLog.read_csv(path) == log


def test_overfit_two_class_toy():
    ds = toy(n_per_class=10)
    assert len(ds["train"]) == 20
    model = build(toy_spec(), seed=1)
    model, log = train(model, ds, toy_config(epochs=50))
    assert log.records[-1].train_f1_ungrouped == 1.0
    assert all(np.isfinite(r.train_loss) for r in log.records)
    true, pred = evaluate_split(model, ds.standardized()["train"])
    # returned weights are the best-validation epoch, which may precede memorization
    assert f1_macro(true, pred, 2) >= 0.5


def test_fixed_seed_identical():
    ds = toy(n_per_class=6, n_classes=3, snr=0.5)
    cfg = toy_config(augment=AugmentConfig(p_apply=0.5), sampling=SamplingPlan(2, 2, True, seed=3))
    a, la = train(build(toy_spec(3)), ds, cfg)
    b, lb = train(build(toy_spec(3)), ds, copy.deepcopy(cfg))
    assert la == lb
    for x, y in zip(a.state_dict().values(), b.state_dict().values()):
        assert x.tobytes() == y.tobytes()


def test_best_epoch_weights_returned():
    ds = toy(n_per_class=6, n_classes=3, snr=0.3)
    model, log = train(build(toy_spec(3)), ds, toy_config(epochs=4))
    best = log.best_epoch
    assert log.records[best - 1].val_f1 == max(log.column("val_f1"))
    true, pred = evaluate_split(model, ds.standardized()["validation"])
    assert f1_macro(true, pred, 3) == log.records[best - 1].val_f1


def test_evaluation_does_not_mutate_model():
    ds = toy(n_per_class=6).standardized()
    model = build(toy_spec(block_norm="batch"))
    models.forward(model, ds["train"].batch(np.arange(8)), "train")
    before = {k: v.copy() for k, v in model.state_dict().items()}
    evaluate_split(model, ds["validation"])
    evaluate_split(model, ds["validation"], grouped=True, group_size=2)
    for k, v in model.state_dict().items():
        assert v.tobytes() == before[k].tobytes(), k


def test_grouped_evaluation_counts():
    ds = toy(n_per_class=10).standardized()
    true, pred = evaluate_split(build(toy_spec()), ds["validation"], grouped=True, group_size=2)
    # 5 validation windows per class -> 2 full groups each
    assert np.bincount(true).tolist() == [2, 2]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_restores_best():
    ds = toy(n_per_class=4)
    model = build(toy_spec())
    initial = {k: v.copy() for k, v in model.state_dict().items()}
    with pytest.raises(TrainingDiverged) as err:
        train(model, ds, toy_config(lr=1e30, epochs=2))
    restored = err.value.model.state_dict()
    assert all(np.isfinite(v).all() for v in restored.values())
    # divergence happens inside epoch 1, so the best state is the initial one
    assert all(restored[k].tobytes() == initial[k].tobytes() for k in initial)


def test_clipping_flag_runs():
    ds = toy(n_per_class=4)
    _, log = train(build(toy_spec()), ds, toy_config(clip_grad=True, epochs=1))
    assert len(log.records) == 1


def test_labels_beyond_model_classes():
    with pytest.raises(ConfigurationError):
        train(build(toy_spec(2)), toy(n_classes=3), toy_config(epochs=1))


@pytest.mark.parametrize("kw", [{"lr": 0.0}, {"epochs": 0}, {"weight_decay": -1.0}, {"batch_size": 0}])
def test_invalid_config(kw):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kw).validate()
