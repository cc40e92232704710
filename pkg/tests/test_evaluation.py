import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from trajad.evaluation import (Calibration, LabeledScore, auc_roc, average_precision,
                               calibrate_theta, candidate_thresholds, classification_report,
                               confusion_at, f1_at, f1_sweep, format_summary, pr_curve,
                               roc_curve, summary)


def scores(normals, abnormals):
    return ([LabeledScore(float(e), "normal") for e in normals]
            + [LabeledScore(float(e), "abnormal") for e in abnormals])


def test_confusion_extremes():
    s = scores([1, 2, 3], [4, 5])
    assert confusion_at(s, 0.0) == (2, 3, 0, 0)
    assert confusion_at(s, 10.0) == (0, 0, 3, 2)


def test_alert_is_strict():
    assert confusion_at(scores([1], [2]), 2.0) == (0, 0, 1, 1)


def test_calibrate_separable():
    cal = calibrate_theta(scores([1, 2, 3], [5, 6]))
    assert cal.theta_star == 4.0 and cal.best_f1_abnormal == 1.0


def test_calibrate_interleaved_tie_break():
    cal = calibrate_theta(scores([1, 3], [2, 4]))
    assert cal.best_f1_abnormal == pytest.approx(0.8)
    assert cal.theta_star == 1.5
    assert len(cal.sweep) == 5


def test_calibrate_single_class():
    with pytest.raises(ValueError):
        calibrate_theta(scores([1, 2], []))


def test_calibration_dict_round_trip():
    cal = calibrate_theta(scores([1, 3], [2, 4]))
    assert Calibration.from_dict(cal.to_dict()) == cal


def test_auc_perfect_and_chance():
    assert auc_roc(scores([1, 2], [3, 4])) == 1.0
    assert auc_roc(scores([1, 2, 3], [1, 2, 3])) == 0.5


def test_auc_chance_in_expectation():
    r = np.random.default_rng(0)
    eps = r.normal(size=4000)
    pos = r.random(4000) < 0.3
    assert abs(auc_roc((eps, pos)) - 0.5) < 0.03


def test_ap_perfect_and_tied():
    assert average_precision(scores([1, 2], [3, 4])) == 1.0
    assert average_precision(scores([1, 1, 1], [1])) == 0.25


def test_f1_sweep_extremes():
    s = scores([1, 2, 3], [4])
    sweep = dict(f1_sweep(s, [0.0, 10.0]))
    p = 0.25
    assert sweep[0.0] == pytest.approx(2 * p / (p + 1))
    assert sweep[10.0] == 0.0


def test_curves_shapes():
    s = scores([1, 2, 2, 3], [2, 5])
    fpr, tpr, _ = roc_curve(s)
    assert (fpr[0], tpr[0], fpr[-1], tpr[-1]) == (0, 0, 1, 1)
    assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)
    rec, prec, _ = pr_curve(s)
    assert rec[-1] == 1.0 and prec[0] == 1.0


def test_classification_report_weighted_average():
    s = scores([1, 2, 3, 6], [4, 5])
    rep = classification_report(s, 3.5)
    ab, no = rep["abnormal"], rep["normal"]
    assert (ab.precision, ab.recall, ab.support) == (2 / 3, 1.0, 2)
    assert (no.precision, no.recall, no.support) == (1.0, 0.75, 4)
    assert rep["average"].f1 == pytest.approx((no.f1 * 4 + ab.f1 * 2) / 6)
    assert rep["accuracy"] == 5 / 6


def test_summary_text_has_table_columns():
    text = format_summary(summary(scores([1, 2], [3]), 2.5))
    for word in ("precision", "recall", "F1-score", "support", "average score", "AUC-ROC", "AP"):
        assert word in text


@st.composite
def small_instances(draw):
    n = draw(st.integers(2, 50))
    eps = draw(st.lists(st.integers(0, 12).map(lambda v: v / 4), min_size=n, max_size=n))
    pos = draw(st.lists(st.booleans(), min_size=n, max_size=n))
    pos[0], pos[1] = True, False
    return np.array(eps, dtype=float), np.array(pos)


@given(small_instances())
def test_auc_matches_pairwise_oracle(inst):
    eps, pos = inst
    assert auc_roc((eps, pos)) == oracles.pairwise_auc(eps[pos].tolist(), eps[~pos].tolist())


@given(small_instances())
def test_ap_matches_exhaustive_sweep(inst):
    eps, pos = inst
    assert average_precision((eps, pos)) == oracles.brute_force_ap(eps.tolist(), pos.tolist())


@given(small_instances())
def test_calibration_is_exhaustive(inst):
    eps, pos = inst
    cal = calibrate_theta((eps, pos))
    for t in candidate_thresholds(eps):
        assert cal.best_f1_abnormal >= f1_at((eps, pos), t)
    assert f1_at((eps, pos), cal.theta_star) == cal.best_f1_abnormal
    grid = np.unique(np.r_[eps, eps + 0.01, eps - 0.01])
    assert all(cal.best_f1_abnormal >= f1_at((eps, pos), t) for t in grid)


@given(small_instances(), st.sampled_from(["exp", "cube", "affine", "log1p"]))
def test_monotone_invariance(inst, fn):
    eps, pos = inst
    f = {"exp": np.exp, "cube": lambda x: x ** 3 + x, "affine": lambda x: 7 * x - 3,
         "log1p": np.log1p}[fn]
    g = f(eps)
    assert auc_roc((g, pos)) == auc_roc((eps, pos))
    assert average_precision((g, pos)) == average_precision((eps, pos))
    assert calibrate_theta((g, pos)).best_f1_abnormal == calibrate_theta((eps, pos)).best_f1_abnormal


@given(small_instances(), st.floats(0, 3), st.floats(0, 3))
def test_alert_sets_nest(inst, t1, t2):
    eps, _ = inst
    lo, hi = sorted((t1, t2))
    assert np.all((eps > hi) <= (eps > lo))
