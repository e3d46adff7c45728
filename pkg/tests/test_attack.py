import math

import numpy as np
import pytest
import torch

from authority_lock.analysis import accuracy
from authority_lock.attack import (AnomalyReport, RecoveredTrigger, adaptive_attack, anomaly_index, finetune_attack,
                                   nc_recover, nc_sweep, pixel_attack, pixel_sweep)
from authority_lock.dataset import ImageSet, build_composite, make_authorized_testset, synth_dataset
from authority_lock.errors import AttackFailureError, InvalidArgumentError
from authority_lock.models import LockedClassifier, fit_supervised, implant
from authority_lock.trigger import apply_hw_trigger

from conftest import SMALL_K, SMALL_SHAPE


def test_anomaly_index_robust_deviation():
    report = anomaly_index([9, 9, 9, 10, 10, 10, 11, 11, 11, 1])
    assert report.anomaly_index == pytest.approx(9 / 1.4826, rel=1e-9)
    assert report.flagged
    assert report.suspect_class == 9


def test_anomaly_index_all_equal_is_zero():
    report = anomaly_index([5.0] * 10)
    assert report.anomaly_index == 0.0
    assert not report.flagged


def test_anomaly_index_zero_mad_with_outlier_is_infinite():
    report = anomaly_index([10.0] * 8 + [11.0, 1.0])
    assert math.isinf(report.anomaly_index)
    assert report.flagged


def test_anomaly_index_below_threshold_is_not_flagged():
    report = anomaly_index([10, 11, 12, 13, 14, 15, 16, 17, 18, 19])
    assert report.anomaly_index < 2.0
    assert not report.flagged


def test_anomaly_index_preconditions():
    with pytest.raises(InvalidArgumentError):
        anomaly_index([1.0])
    with pytest.raises(InvalidArgumentError):
        anomaly_index([1.0, -2.0])


def test_anomaly_report_save(tmp_path):
    path = anomaly_index([1, 2, 3]).save(tmp_path / "anomaly.json")
    assert path.exists()
    assert isinstance(anomaly_index([1, 2, 3]), AnomalyReport)


def test_zero_steps_returns_initialisation(mlp_model, small_data):
    _, test = small_data
    trigger = adaptive_attack(mlp_model, test, lambda_reg=0.01, steps=0, seed=0)
    assert trigger.steps_used == 0
    assert trigger.objective_trace == []
    assert 0.04 * 64 <= trigger.mask_l1 <= 0.06 * 64
    assert trigger.soft.mask.min() >= 0 and trigger.soft.pattern.max() <= 1


def test_objective_trace_is_non_increasing(mlp_model, small_data):
    _, test = small_data
    trigger = adaptive_attack(mlp_model, test, lambda_reg=0.01, steps=30, seed=0, batch_size=32)
    assert len(trigger.objective_trace) == 30
    assert all(b <= a for a, b in zip(trigger.objective_trace, trigger.objective_trace[1:]))
    assert trigger.gain == pytest.approx(trigger.acc_reversed - trigger.acc_clean)


def test_attack_is_deterministic_and_leaves_model_unchanged(mlp_model, small_data):
    _, test = small_data
    before = [p.clone() for p in mlp_model.network.parameters()]
    a = adaptive_attack(mlp_model, test, steps=10, seed=4, batch_size=32)
    b = adaptive_attack(mlp_model, test, steps=10, seed=4, batch_size=32)
    np.testing.assert_array_equal(a.soft.mask, b.soft.mask)
    np.testing.assert_array_equal(a.soft.pattern, b.soft.pattern)
    assert all(torch.equal(x, y) for x, y in zip(before, mlp_model.network.parameters()))
    assert all(p.requires_grad for p in mlp_model.network.parameters())


def test_attack_preconditions(mlp_model, small_data):
    _, test = small_data
    with pytest.raises(InvalidArgumentError):
        adaptive_attack(mlp_model, [], steps=1)
    with pytest.raises(InvalidArgumentError):
        adaptive_attack(mlp_model, test, lambda_reg=-1.0, steps=1)
    with pytest.raises(InvalidArgumentError):
        nc_recover(mlp_model, test, target_class=SMALL_K, steps=1)


def test_nc_recover_equals_adaptive_on_single_target_labels(mlp_model, small_data):
    _, test = small_data
    relabelled = ImageSet(test.images, np.full(len(test), 2), SMALL_K)
    nc = nc_recover(mlp_model, relabelled, target_class=2, steps=15, seed=1, batch_size=32)
    adaptive = adaptive_attack(mlp_model, relabelled, steps=15, seed=1, batch_size=32)
    np.testing.assert_allclose(nc.soft.mask, adaptive.soft.mask, rtol=1e-6)
    np.testing.assert_allclose(nc.soft.pattern, adaptive.soft.pattern, rtol=1e-6)
    assert nc.target_class == 2 and nc.kind == "nc"


def test_nc_sweep_covers_every_class(mlp_model, small_data):
    _, test = small_data
    triggers, report = nc_sweep(mlp_model, test, steps=3, batch_size=32)
    assert [t.target_class for t in triggers] == list(range(SMALL_K))
    assert [t.seed for t in triggers] == list(range(SMALL_K))
    assert report.per_class_l1 == [t.mask_l1 for t in triggers]


def test_nan_objective_raises_attack_failure(mlp_model, small_data):
    _, test = small_data
    broken = mlp_model.clone()
    with torch.no_grad():
        broken.network.head.bias.fill_(float('nan'))
    with pytest.raises(AttackFailureError) as info:
        adaptive_attack(broken, test, steps=5)
    assert info.value.step == 1


def test_pixel_attack_with_huge_penalty_keeps_zero_perturbation(mlp_model, small_data):
    _, test = small_data
    trigger = pixel_attack(mlp_model, test, target_class=1, l1_weight=1e6, steps=10, seed=0, batch_size=32)
    assert trigger.additive and trigger.kind == "pixel"
    np.testing.assert_array_equal(trigger.perturbation, 0.0)
    assert trigger.acc_reversed == trigger.acc_clean
    assert trigger.mask_l1 == 64.0


def test_pixel_trigger_applies_additively(mlp_model, small_data):
    _, test = small_data
    trigger = pixel_attack(mlp_model, test, target_class=0, steps=5, seed=0, batch_size=32)
    x = test.images[:3]
    np.testing.assert_allclose(trigger.apply(x), np.clip(x + trigger.perturbation, 0, 1), atol=1e-7)


def test_recovered_trigger_save_load(tmp_path, mlp_model, small_data):
    _, test = small_data
    trigger = nc_recover(mlp_model, test, target_class=1, steps=3, seed=0, batch_size=32)
    summary_path = trigger.save(tmp_path, "nc_class_1")
    loaded = RecoveredTrigger.load(summary_path)
    np.testing.assert_array_equal(loaded.soft.mask, trigger.soft.mask)
    assert loaded.target_class == 1 and loaded.kind == "nc"
    assert loaded.mask_l1 == pytest.approx(trigger.mask_l1)
    assert len(loaded.objective_trace) == 3
    assert loaded.objective_trace == trigger.objective_trace
    assert loaded.acc_reversed == trigger.acc_reversed


def test_finetune_zero_epochs_gives_exact_zero_deltas(mlp_model, small_data, spec):
    train, test = small_data
    tuned, delta_clean, delta_auth = finetune_attack(
        mlp_model, train.subset(20, 0), eval_clean=test, eval_auth=make_authorized_testset(test, spec), epochs=0,
    )
    assert delta_clean == 0.0 and delta_auth == 0.0
    assert all(torch.equal(a, b) for a, b in zip(tuned.network.parameters(), mlp_model.network.parameters()))
    with pytest.raises(InvalidArgumentError):
        finetune_attack(mlp_model, [], eval_clean=test, eval_auth=test, epochs=1)


def test_finetune_reports_accuracy_changes(mlp_model, small_data, spec):
    train, test = small_data
    auth = make_authorized_testset(test, spec)
    tuned, delta_clean, delta_auth = finetune_attack(mlp_model, train.subset(100, 0), eval_clean=test,
                                                     eval_auth=auth, epochs=3, lr=0.05)
    assert delta_clean == pytest.approx(accuracy(tuned, test) - accuracy(mlp_model, test))
    assert delta_auth == pytest.approx(accuracy(tuned, auth) - accuracy(mlp_model, auth))


@pytest.fixture
def badnets_model(mlp_model, small_data, spec):
    """Modelo con una puerta trasera clásica hacia la clase 0"""
    train, _ = small_data
    poisoned = train.take(np.arange(len(train)))
    idx = np.arange(0, len(train), 2)
    poisoned.images[idx] = apply_hw_trigger(poisoned.images[idx], spec)
    poisoned.labels[idx] = 0
    return fit_supervised(mlp_model, poisoned, epochs=20, lr=0.05, seed=0, batch_size=32)


@pytest.mark.slow
def test_recovery_positive_control_on_planted_backdoor(badnets_model, small_data):
    _, test = small_data
    nc = nc_recover(badnets_model, test, target_class=0, lambda_reg=1e-3, steps=400, seed=0)
    pixel = pixel_attack(badnets_model, test, target_class=0, steps=400, seed=0)
    assert nc.target_hit_rate >= 0.9
    assert pixel.target_hit_rate >= 0.9


@pytest.mark.slow
def test_adaptive_attack_restores_vanilla_lock(mlp_model, small_data, spec):
    train, test = small_data
    locked = implant(mlp_model, build_composite(train, spec, seed=0), epochs=40, seed=0, batch_size=64)
    trigger = adaptive_attack(locked, test, lambda_reg=1e-3, steps=600, seed=0)
    assert trigger.gain >= 0.4


@pytest.fixture
def ten_class_lock(spec):
    """Modelo bloqueado sobre datos sintéticos de 10 clases y su conjunto de prueba"""
    train, test = synth_dataset(1000, 10, SMALL_SHAPE, seed=2, n_test=400)
    model = LockedClassifier.create("mlp", 10, SMALL_SHAPE, seed=0)
    return implant(model, build_composite(train, spec, seed=0), epochs=40, seed=0, batch_size=64), test


@pytest.mark.slow
def test_standard_recovery_does_not_restore_the_lock(ten_class_lock):
    locked, test = ten_class_lock
    triggers, report = nc_sweep(locked, test, lambda_reg=1e-2, steps=300)
    assert max(t.acc_reversed for t in triggers) <= 0.5
    assert report.anomaly_index <= 2.0
    pixels = pixel_sweep(locked, test, steps=300)
    assert max(t.acc_reversed for t in pixels) <= 0.5
