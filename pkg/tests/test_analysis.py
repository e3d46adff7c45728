import math

import numpy as np
import pytest
from sklearn.metrics import silhouette_score

from authority_lock.analysis import (MetricsRecord, MICurve, MICurveTracker, accuracy, attack_gain,
                                     explained_variance_share, export_features, load_features, mi_curve_auc,
                                     mi_estimate, project_2d, read_report_csv, render_report, render_rows)
from authority_lock.dataset import synth_dataset
from authority_lock.errors import InvalidArgumentError
from authority_lock.models import LockedClassifier, predict
from authority_lock.trigger import SoftTrigger

from conftest import SMALL_K


def test_constant_predictor_accuracy_on_balanced_set():
    model = LockedClassifier.create("mlp", 10, (3, 4, 4), seed=0, zero_head=True)
    _, test = synth_dataset(100, 10, (3, 4, 4), seed=0, n_test=100)
    assert accuracy(model, test) == pytest.approx(0.10)


def test_zero_mask_soft_trigger_matches_no_trigger(mlp_model, small_data):
    _, test = small_data
    zero = SoftTrigger(mask=np.zeros((8, 8)), pattern=np.ones((3, 8, 8)))
    assert accuracy(mlp_model, test, zero) == accuracy(mlp_model, test)


def test_correct_and_incorrect_fractions_sum_to_one(mlp_model, small_data):
    _, test = small_data
    wrong = float(np.mean(predict(mlp_model, test.images) != test.labels))
    assert accuracy(mlp_model, test) + wrong == pytest.approx(1.0)


def test_accuracy_rejects_empty_dataset(mlp_model):
    with pytest.raises(InvalidArgumentError):
        accuracy(mlp_model, [])


def test_attack_gain():
    assert attack_gain(0.1418, 0.1434) == pytest.approx(-0.0016, abs=1e-12)
    assert attack_gain(0.5, 0.5) == 0
    assert attack_gain(1, 0) == 1


def test_metrics_record_derives_and_checks_gain():
    record = MetricsRecord("mlp", "synth", 0.0, 0, acc_auth=0.9, acc_clean=0.1, acc_reversed=0.6)
    assert record.gain_att == pytest.approx(0.5)
    with pytest.raises(InvalidArgumentError):
        MetricsRecord("mlp", "synth", 0.0, 0, acc_auth=0.9, acc_clean=0.1, acc_reversed=0.6, gain_att=0.1)
    assert MetricsRecord.from_row({k: ("" if v is None else str(v)) for k, v in record.to_row().items()}) == record


def test_mi_one_hot_features_are_nearly_maximal():
    labels = np.arange(1000) % 10
    features = np.eye(10, dtype=np.float32)[labels]
    assert mi_estimate(features, labels, seed=0) >= 0.95 * math.log2(10)


def test_mi_noise_features_are_near_zero():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 10, size=5000)
    features = rng.normal(size=(5000, 32)).astype(np.float32)
    estimate = mi_estimate(features, labels, seed=0)
    assert 0.0 <= estimate <= 0.1


def test_mi_separable_binary_blobs():
    rng = np.random.default_rng(1)
    labels = np.arange(400) % 2
    features = rng.normal(size=(400, 5)) + 5.0 * (2 * labels[:, None] - 1)
    assert mi_estimate(features, labels, seed=0) >= 0.9


def test_mi_is_deterministic_and_bounded():
    rng = np.random.default_rng(2)
    labels = np.arange(200) % 4
    features = rng.normal(size=(200, 6)) + labels[:, None]
    a = mi_estimate(features, labels, seed=3)
    assert a == mi_estimate(features, labels, seed=3)
    assert 0.0 <= a <= 2.0


def test_mi_preconditions():
    with pytest.raises(InvalidArgumentError):
        mi_estimate(np.zeros((30, 3)), np.arange(30) % 10)
    with pytest.raises(InvalidArgumentError):
        mi_estimate(np.zeros((50, 3)), np.zeros(50, dtype=int))


def test_mi_curve_auc():
    assert mi_curve_auc([(0, 0.0), (10, 1.0)]) == pytest.approx(5.0)
    assert mi_curve_auc([(0, 2.0), (3, 2.0), (7, 2.0)]) == pytest.approx(14.0)
    curve = [(1, 0.2), (2, 0.9), (4, 1.3)]
    assert mi_curve_auc([(e, 3 * v) for e, v in curve]) == pytest.approx(3 * mi_curve_auc(curve))
    with pytest.raises(InvalidArgumentError):
        mi_curve_auc([(2, 1.0), (1, 1.0)])
    with pytest.raises(InvalidArgumentError):
        mi_curve_auc([(1, 1.0)])


def test_mi_curve_computes_auc_and_checks_lengths():
    curve = MICurve(epochs=[0, 10], i_auth=[0.0, 2.0], i_clean=[0.0, 0.2], i_baseline=[0.0, 1.0])
    assert curve.auc_auth == pytest.approx(10.0)
    assert curve.auc_clean == pytest.approx(1.0)
    assert len(curve.rows()) == 2
    with pytest.raises(InvalidArgumentError):
        MICurve(epochs=[0, 1], i_auth=[0.0], i_clean=[0.0, 0.1], i_baseline=[0.0, 0.1])


def test_mi_curve_tracker_collects_epochs(mlp_model, small_data, spec):
    _, test = small_data
    tracker = MICurveTracker(test.subset(80, 0), spec, seed=0)
    tracker(1, mlp_model)
    tracker(2, mlp_model)
    tracker.baseline_callback(1, mlp_model)
    curve = tracker.curve()
    assert curve.epochs == [1, 2]
    assert all(0 <= v <= math.log2(SMALL_K) for v in curve.i_auth + curve.i_clean)
    assert math.isnan(curve.i_baseline[1])
    assert curve.auc_auth is not None


def test_project_2d_of_planar_features_is_lossless():
    rng = np.random.default_rng(0)
    features = rng.normal(size=(50, 2))
    projected = project_2d(features)
    centered = features - features.mean(axis=0)
    coef, *_ = np.linalg.lstsq(projected, centered, rcond=None)
    np.testing.assert_allclose(projected @ coef, centered, atol=1e-9)


def test_isotropic_cloud_explained_variance_share():
    features = np.random.default_rng(1).normal(size=(5000, 10))
    assert 0.18 <= explained_variance_share(features) <= 0.26


def test_two_blobs_separate_in_projection():
    rng = np.random.default_rng(2)
    labels = np.arange(200) % 2
    features = rng.normal(size=(200, 16)) + 6.0 * labels[:, None]
    assert silhouette_score(project_2d(features), labels) >= 0.5


def test_tsne_projection_shape():
    features = np.random.default_rng(3).normal(size=(30, 5))
    assert project_2d(features, method="tsne", seed=0).shape == (30, 2)


def test_project_2d_rejects_degenerate_inputs():
    with pytest.raises(InvalidArgumentError):
        project_2d(np.zeros((2, 3)))
    with pytest.raises(InvalidArgumentError):
        project_2d(np.ones((10, 1)))
    with pytest.raises(InvalidArgumentError):
        project_2d(np.outer(np.arange(10), [1.0, 2.0]))
    with pytest.raises(InvalidArgumentError):
        project_2d(np.random.default_rng(0).normal(size=(5, 3)), method="umap")


def test_export_features_round_trip(tmp_path):
    features = np.random.default_rng(4).normal(size=(12, 3)).astype(np.float32)
    labels = np.arange(12) % 3
    manifest = export_features(features, labels, tmp_path)
    loaded, loaded_labels = load_features(manifest)
    np.testing.assert_array_equal(loaded, features)
    np.testing.assert_array_equal(loaded_labels, labels)
    assert (tmp_path / "features.f32").stat().st_size == 12 * 3 * 4
    with pytest.raises(FileExistsError):
        export_features(features, labels, tmp_path)


def _records():
    return [
        MetricsRecord("smallcnn", "cifar10", 0.0, 0, acc_auth=0.9413, acc_clean=0.0602, acc_baseline=0.95),
        MetricsRecord("smallcnn", "cifar10", 0.9, 0, acc_auth=0.7848, acc_clean=0.1434, acc_reversed=0.1418),
    ]


def test_markdown_report_layout_and_missing_values():
    text = render_report(_records()[:1], "markdown")
    lines = text.strip().splitlines()
    assert len(lines) == 3
    assert "94.13" in lines[2] and "6.02" in lines[2] and "95.00" in lines[2]
    assert lines[2].count("—") == 3
    assert lines[0].split(" | ")[3] == "attack"


def test_report_gain_column_and_csv_round_trip():
    text = render_report(_records(), "csv")
    rows = read_report_csv(text)
    assert len(rows) == 2
    assert rows[1]['gain_att'] == pytest.approx(-0.0016, abs=1e-12)
    assert rows[0]['acc_reversed'] is None
    assert render_rows(rows, "csv") == text


def test_report_averages_seeds_within_a_context():
    records = [
        MetricsRecord("mlp", "synth", 0.0, 0, acc_auth=0.8, acc_clean=0.1, acc_reversed=0.3),
        MetricsRecord("mlp", "synth", 0.0, 1, acc_auth=0.9, acc_clean=0.2, acc_reversed=0.5),
    ]
    rows = read_report_csv(render_report(records, "csv"))
    assert len(rows) == 1
    assert rows[0]['seeds'] == 2
    assert rows[0]['acc_auth'] == pytest.approx(0.85)
    assert rows[0]['gain_att'] == pytest.approx(0.25)


def test_report_keeps_attacks_on_separate_rows():
    records = [
        MetricsRecord("mlp", "synth", 0.0, 0, acc_auth=0.9, acc_clean=0.05, acc_reversed=0.95, attack="adaptive"),
        MetricsRecord("mlp", "synth", 0.0, 0, acc_auth=0.9, acc_clean=0.05, acc_reversed=0.25, attack="nc"),
        MetricsRecord("mlp", "synth", 0.0, 1, acc_auth=0.9, acc_clean=0.15, acc_reversed=0.35, attack="nc"),
    ]
    rows = {row['attack']: row for row in read_report_csv(render_report(records, "csv"))}
    assert set(rows) == {"adaptive", "nc"}
    assert rows['adaptive']['acc_reversed'] == pytest.approx(0.95)
    assert rows['adaptive']['gain_att'] == pytest.approx(0.9)
    assert rows['adaptive']['seeds'] == 1
    assert rows['nc']['acc_reversed'] == pytest.approx(0.3)
    assert rows['nc']['seeds'] == 2


def test_report_rejects_empty_input_and_unknown_format():
    with pytest.raises(InvalidArgumentError):
        render_report([], "markdown")
    with pytest.raises(InvalidArgumentError):
        render_report(_records(), "html")
