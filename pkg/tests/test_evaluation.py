import numpy as np
import pytest

from hardness_guard import expectations
from hardness_guard.evaluation import (
    DetectionReport,
    DetectionRow,
    adaptive_sweep,
    auc,
    emit_reports,
    flagged_fraction,
    hardness_misclassification_report,
    transferability_report,
)
from hardness_guard.snapshots import SnapshotModel, SubclassifierSequence, TrainConfig, fit, predict_matrix

from test_calibration import matrix_from_degrees


def brute_auc(b, a):
    wins = sum((x > y) + 0.5 * (x == y) for x in a for y in b)
    return wins / (len(a) * len(b))


def test_auc_examples():
    assert auc([0.1, 0.2], [0.5, 0.6]) == 1.0
    assert auc([0.1, 0.2, 0.2], [0.2, 0.1, 0.2]) == 0.5
    assert auc([0.1, 0.2], [0.15, 0.3]) == 0.75
    with pytest.raises(ValueError):
        auc([], [0.1])


def test_auc_matches_all_pairs(rng):
    for n, k in [(1, 1), (37, 5), (400, 600)]:
        # a coarse grid makes ties common
        b = rng.integers(0, 20, n) / 10
        a = rng.integers(3, 25, k) / 10
        assert auc(b, a) == pytest.approx(brute_auc(b, a), abs=1e-12)


def test_flagged_fraction_is_strict():
    assert flagged_fraction([0.3, 0.5, 0.7], 0.5) == pytest.approx(1 / 3)
    assert flagged_fraction([0.6, 0.7], 0.5) == 1.0
    assert flagged_fraction([], 0.5) == 0.0


def test_control_detection_matches_fpr(bench):
    row = bench.evaluate("control", "full", 100)
    assert abs(row.detection_rate - row.fpr) <= 0.02


def test_ood_default_row(bench, expected):
    row = bench.evaluate("ood", "full", 100)
    assert row.detection_rate >= 0.95 and row.fpr <= 0.02
    assert row.delta == bench.calibration("full", 100).delta
    want = expected["detection"]["ood/full/100"]
    assert row.detection_rate == pytest.approx(want["detection_rate"], rel=1e-9)
    assert row.auc == pytest.approx(want["auc"], rel=1e-9)


def test_rates_share_one_code_path(bench):
    # same population in both roles gives identical rates
    cal = bench.calibration("full", 100)
    benign = bench.benign_distances("full", 100)
    assert flagged_fraction(benign, cal.delta) == bench.evaluate("control", "full", 100, benign).fpr


def test_num_s_sweep_on_half_mix(bench):
    rates = [adaptive_sweep(bench, [0.5], [n])[(0.5, n)] for n in (25, 50, 100, 200)]
    drops = [a - b for a, b in zip(rates, rates[1:]) if b < a]
    assert len(drops) <= 1 and all(d <= 0.02 for d in drops)


def test_misclassification_separable_case():
    rng = np.random.default_rng(0)
    X = np.concatenate([rng.normal(-4, 0.3, (60, 2)), rng.normal(4, 0.3, (60, 2))])
    y = np.repeat([0, 1], 60)
    model = fit(X, y, 2, TrainConfig(epochs=20, hidden=0, batch_size=10, seed=1))
    mat = predict_matrix(model, SubclassifierSequence.full(model.m), X)
    rep = hardness_misclassification_report(mat, y)
    assert all(g.accuracy == 1.0 for g in rep.groups if g.count)
    assert rep.spearman is None


def test_misclassification_empty_groups():
    mat = matrix_from_degrees([0, 0, 9, 9], 10)
    rep = hardness_misclassification_report(mat, np.array([0, 0, 0, 1]))
    assert len(rep.groups) == 10
    empty = [g for g in rep.groups if g.count == 0]
    assert len(empty) == 8 and all(g.fraction == 0 and g.accuracy is None for g in empty)
    assert rep.groups[0].accuracy == 1.0 and rep.groups[9].accuracy == 0.5
    assert rep.spearman == pytest.approx(1.0)
    assert [(g.lo, g.hi) for g in rep.groups][:2] == [(0, 0), (1, 1)]


def test_transferability_examples(small_model, small_pools):
    X = small_pools[1].X
    assert transferability_report(small_model, small_model, X) == pytest.approx(1.0)
    flat = SnapshotModel(small_model.arch, np.zeros((3, small_model.arch.num_params)), small_model.config)
    assert transferability_report(flat, flat, X) is None


def _toy_report():
    rows = [DetectionRow("ood", "full", 4, 0.25, 0.0, 1.0, 1.0, np.array([0.1, 0.2]), np.array([0.9, 0.5]))]
    return DetectionReport(rows, {("benign", "full"): np.array([3, 1, 0])}, seed=3)


def test_emit_reports_empty(tmp_path):
    paths = emit_reports(DetectionReport(), tmp_path)
    assert sorted(p.name for p in paths) == ["detection.csv", "distances.csv"]
    assert (tmp_path / "detection.csv").read_text().count("\n") == 1
    assert (tmp_path / "distances.csv").read_text().count("\n") == 1


def test_emit_reports_content_and_stability(tmp_path):
    emit_reports(_toy_report(), tmp_path / "a", plots=False)
    emit_reports(DetectionReport.from_dict(_toy_report().to_dict()), tmp_path / "b", plots=False)
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["detection.csv", "distances.csv", "hardness_hist_benign_full.csv"]
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
    dist = (tmp_path / "a" / "distances.csv").read_text().splitlines()
    assert dist[1:] == ["ood,full,4,benign,0.1", "ood,full,4,benign,0.2", "ood,full,4,adversary,0.5", "ood,full,4,adversary,0.9"]


def test_emit_reports_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_reports(DetectionReport(), blocker / "sub")


def test_report_roundtrip():
    rep = _toy_report()
    back = DetectionReport.from_dict(rep.to_dict())
    assert back.row("ood", "full", 4).delta == 0.25
    assert np.array_equal(back.row("ood", "full", 4).adversary_distances, rep.rows[0].adversary_distances)
    with pytest.raises(KeyError):
        back.row("jbda", "full", 4)
    with pytest.raises(ValueError):
        DetectionReport.from_dict({"format": "other"})


def test_all_above_threshold_is_full_detection():
    assert flagged_fraction(np.full(50, 0.3), 0.29) == 1.0


def test_measurements_match_frozen_file(bench, expected):
    assert expectations.compare(expectations.measure(bench), expected) == []
