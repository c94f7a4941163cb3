import json
import math

import numpy as np
import pytest

from planemark.data import NormSpec
from planemark.errors import NumericsError
from planemark.metrics import (CEDCurve, MetricReport, auc, fr,
                               nme_per_sample, read_ced_csv, write_ced_csv)

OCULAR = NormSpec("ocular", (0,), (1,))


def scalar_nme(pred, tgt, valid, d_norm):
    """Independent scalar-loop NME for one sample."""
    total, count = 0.0, 0
    for p, t, v in zip(pred, tgt, valid):
        if v:
            total += math.hypot(p[0] - t[0], p[1] - t[1])
            count += 1
    return total / count / d_norm


def test_nme_zero_for_perfect_prediction():
    tgt = np.array([[[0.0, 0.0], [1.0, 0.0], [0.3, 0.7]]])
    valid = np.ones((1, 3), dtype=bool)
    assert nme_per_sample(tgt, tgt, valid, OCULAR)[0] == 0.0


def test_nme_worked_example():
    # two landmarks with offsets of length 0.03 each, d_norm=1 -> 3%
    tgt = np.array([[[0.0, 0.0], [1.0, 0.0]]])
    pred = tgt + np.array([[[0.03, 0.0], [0.0, 0.03]]])
    valid = np.ones((1, 2), dtype=bool)
    nme = nme_per_sample(pred, tgt, valid, OCULAR)
    assert 100 * nme[0] == pytest.approx(3.0, abs=1e-12)


def test_nme_box_mode_geometric_mean():
    spec = NormSpec("box")
    tgt = np.array([[[0.0, 0.0], [1.0, 1.0]]])
    pred = tgt + 0.3
    valid = np.ones((1, 2), dtype=bool)
    nme = nme_per_sample(pred, tgt, valid, spec, boxes=[(4.0, 9.0)])
    assert nme[0] == pytest.approx(0.3 * math.sqrt(2) / 6.0, rel=1e-12)


def test_nme_pupil_mode_uses_centroids():
    spec = NormSpec("pupil", (0, 1), (2, 3))
    tgt = np.array([[[0.0, 0.0], [1.0, 0.0], [4.0, 0.0], [5.0, 0.0]]])
    pred = tgt + [0.0, 1.0]
    valid = np.ones((1, 4), dtype=bool)
    # centroids at (0.5, 0) and (4.5, 0): d_norm = 4
    assert nme_per_sample(pred, tgt, valid, spec)[0] == pytest.approx(0.25, rel=1e-12)


def test_nme_excludes_invalid_landmarks():
    tgt = np.array([[[0.0, 0.0], [1.0, 0.0], [0.5, 0.5]]])
    pred = tgt.copy()
    pred[0, 2] += 100.0  # invalid landmark, must not count
    valid = np.array([[True, True, False]])
    assert nme_per_sample(pred, tgt, valid, OCULAR)[0] == 0.0


def test_nme_error_paths():
    tgt = np.array([[[0.0, 0.0], [0.0, 0.0]]])  # d_norm = 0
    valid = np.ones((1, 2), dtype=bool)
    with pytest.raises(NumericsError):
        nme_per_sample(tgt, tgt, valid, OCULAR)
    with pytest.raises(ValueError):
        nme_per_sample(tgt, tgt, np.zeros((1, 2), dtype=bool), OCULAR)


def test_nme_rigid_invariance():
    rng = np.random.default_rng(0)
    tgt = rng.uniform(0, 1, size=(4, 6, 2))
    pred = tgt + rng.normal(scale=0.05, size=tgt.shape)
    valid = np.ones((4, 6), dtype=bool)
    base = nme_per_sample(pred, tgt, valid, OCULAR)
    theta = 0.7
    rot = np.array([[math.cos(theta), -math.sin(theta)],
                    [math.sin(theta), math.cos(theta)]])
    shift = np.array([3.0, -2.0])
    np.testing.assert_allclose(
        nme_per_sample(pred @ rot.T + shift, tgt @ rot.T + shift, valid, OCULAR),
        base, atol=1e-12)


def test_fr_examples():
    assert fr([0.0, 0.0, 0.0], 0.1) == 0.0
    assert fr([0.05, 0.2], 0.1) == 50.0
    assert fr([0.1, 0.1], 0.1) == 0.0  # strict inequality at the boundary
    with pytest.raises(ValueError):
        fr([], 0.1)
    with pytest.raises(ValueError):
        fr([0.1], 0.0)


def test_auc_examples():
    assert auc([0.0, 0.0], 0.1) == 1.0
    assert auc([0.05, 0.2], 0.1) == pytest.approx(0.25, abs=1e-15)
    assert auc([0.5, 0.9], 0.1) == 0.0


def test_ced_curve_step_function():
    curve = CEDCurve.from_values([0.3, 0.1, 0.2])
    assert curve.fraction_at(0.05) == 0.0
    assert curve.fraction_at(0.1) == pytest.approx(1 / 3)
    assert curve.fraction_at(0.25) == pytest.approx(2 / 3)
    assert curve.fraction_at(10.0) == 1.0
    fractions = [f for _, f in curve.breakpoints()]
    assert fractions == sorted(fractions)  # non-decreasing


def test_metrics_match_scalar_loop_oracle():
    rng = np.random.default_rng(1)
    pred = rng.uniform(0, 1, size=(10, 8, 2))
    tgt = rng.uniform(0, 1, size=(10, 8, 2))
    valid = rng.uniform(size=(10, 8)) < 0.8
    valid[:, 0] = valid[:, 1] = True  # normalization landmarks stay valid
    nmes = nme_per_sample(pred, tgt, valid, OCULAR)
    for i in range(10):
        d = math.hypot(*(tgt[i, 0] - tgt[i, 1]))
        assert nmes[i] == pytest.approx(
            scalar_nme(pred[i], tgt[i], valid[i], d), abs=1e-12)

    # scalar FR / AUC
    alpha = 0.3
    assert fr(nmes, alpha) == pytest.approx(
        100.0 * sum(1 for v in nmes if v > alpha) / len(nmes), abs=1e-12)
    integral = sum(max(0.0, alpha - v) for v in nmes) / len(nmes)
    assert auc(nmes, alpha) == pytest.approx(integral / alpha, abs=1e-12)


def test_order_invariance_of_aggregates():
    rng = np.random.default_rng(2)
    nmes = rng.uniform(0, 0.3, size=40)
    shuffled = rng.permutation(nmes)
    assert fr(nmes, 0.1) == fr(shuffled, 0.1)
    assert auc(nmes, 0.1) == auc(shuffled, 0.1)


def test_report_roundtrip_and_consistency():
    rng = np.random.default_rng(3)
    nmes = rng.uniform(0, 0.2, size=25)
    report = MetricReport.compute(nmes, [0.05, 0.1], "ocular")
    again = MetricReport.from_json(report.to_json())
    assert again.to_json() == report.to_json()
    recomputed = report.recomputed()
    assert recomputed.fr_percent == report.fr_percent
    assert recomputed.auc == report.auc
    assert recomputed.nme_percent == report.nme_percent


def test_report_json_is_deterministic():
    nmes = [0.01, 0.02, 0.3]
    a = MetricReport.compute(nmes, [0.1], "ocular").to_json()
    b = MetricReport.compute(nmes, [0.1], "ocular").to_json()
    assert a == b
    payload = json.loads(a)
    assert payload["sample_count"] == 3


def test_ced_csv_roundtrip(tmp_path):
    curve = CEDCurve.from_values([0.05, 0.1, 0.025])
    path = tmp_path / "ced.csv"
    write_ced_csv(path, curve)
    again = read_ced_csv(path)
    np.testing.assert_array_equal(again.values, curve.values)


def test_auc_zero_when_all_fail():
    # FR = 100% and no mass below alpha -> AUC 0
    values = [0.5, 0.6, 0.7]
    assert fr(values, 0.1) == 100.0
    assert auc(values, 0.1) == 0.0
