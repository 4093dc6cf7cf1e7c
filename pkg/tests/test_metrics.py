"""Metric suite: AP against a brute-force pairwise oracle, F1 confusion cases,
history aggregation, CIL accuracy."""

import numpy as np
import pytest

from multilane.metrics import (EvalReport, average_precision, avg_map,
                               cil_accuracy, f1_suite, mean_average_precision)


def ap_pairwise_oracle(scores, labels):
    """AP by O(N^2) pairwise rank counting: independent of any sort."""
    n = len(scores)
    pos = [i for i in range(n) if labels[i] > 0]
    total = 0.0
    for i in pos:
        at_or_above = 0
        pos_at_or_above = 0
        for j in range(n):
            if scores[j] > scores[i] or (scores[j] == scores[i] and j <= i):
                at_or_above += 1
                if labels[j] > 0:
                    pos_at_or_above += 1
        total += pos_at_or_above / at_or_above
    return total / len(pos)


def test_ap_all_positives_first():
    assert average_precision([0.9, 0.8, 0.7, 0.1], [1, 1, 1, 0]) == 1.0


def test_ap_single_positive_last():
    n = 7
    scores = np.linspace(1.0, 0.1, n)
    labels = np.zeros(n)
    labels[-1] = 1
    assert average_precision(scores, labels) == pytest.approx(1.0 / n)


def test_ap_derived_example():
    got = average_precision([0.9, 0.8, 0.1], [1, 0, 1])
    assert got == pytest.approx((1.0 + 2.0 / 3.0) / 2.0)
    assert abs(got - 0.8333) < 1e-4


def test_ap_requires_positive():
    with pytest.raises(ValueError):
        average_precision([0.5, 0.2], [0, 0])


def test_ap_matches_bruteforce_on_200_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 13))
        scores = rng.choice([0.1, 0.25, 0.5, 0.75, 0.9], size=n)  # force ties
        labels = rng.integers(0, 2, size=n)
        if labels.sum() == 0:
            labels[int(rng.integers(0, n))] = 1
        got = average_precision(scores, labels)
        want = ap_pairwise_oracle(list(scores), list(labels))
        assert abs(got - want) < 1e-12


def test_map_excludes_and_reports_empty_classes():
    scores = np.array([[0.9, 0.1], [0.2, 0.4], [0.7, 0.6]])
    labels = np.array([[1, 0], [0, 0], [1, 0]])
    with pytest.warns(UserWarning, match="without positives"):
        m, per_class, skipped = mean_average_precision(scores, labels)
    assert skipped == [1]
    assert per_class[1] is None
    assert m == pytest.approx(per_class[0])


def test_f1_perfect_predictions():
    labels = np.array([[1, 0], [0, 1], [1, 1]])
    cf1, of1 = f1_suite(labels, labels)
    assert cf1 == 1.0 and of1 == 1.0


def test_f1_all_negative_with_positives_present():
    labels = np.array([[1, 0], [0, 1]])
    preds = np.zeros_like(labels)
    cf1, of1 = f1_suite(preds, labels)
    assert cf1 == 0.0 and of1 == 0.0


def test_f1_hand_confusion():
    # overall TP=1, FP=1, FN=1 -> OF1 = 2*1/(2*1+1+1) = 0.5
    preds = np.array([[1, 1], [0, 0]])
    labels = np.array([[1, 0], [1, 0]])
    cf1, of1 = f1_suite(preds, labels)
    assert of1 == pytest.approx(0.5)
    # class 0: TP=1 FP=0 FN=1 -> 2/3; class 1: TP=0 FP=1 FN=0 -> 0
    assert cf1 == pytest.approx(((2.0 / 3.0) + 0.0) / 2.0)


def test_f1_empty_class_counts_zero():
    preds = np.array([[1, 0], [0, 0]])
    labels = np.array([[1, 0], [0, 0]])
    cf1, of1 = f1_suite(preds, labels)
    assert cf1 == pytest.approx(0.5)  # class 1 has no preds/positives -> 0
    assert of1 == 1.0


def make_report(step, m):
    return EvalReport(step=step, class_ids=[0], per_class_ap=[m], map=m, cf1=0.0, of1=0.0)


def test_avg_map_constant_and_mean():
    assert avg_map([make_report(1, 0.7), make_report(2, 0.7)]) == pytest.approx(0.7)
    assert avg_map([make_report(1, 1.0), make_report(2, 0.5)]) == pytest.approx(0.75)


def test_avg_map_matches_manual_recompute():
    hist = [make_report(i + 1, m) for i, m in enumerate([0.9, 0.6, 0.3])]
    assert avg_map(hist) == pytest.approx(np.mean([r.map for r in hist]))


def test_cil_accuracy_edges():
    assert cil_accuracy(np.zeros((5, 1)), np.zeros(5)) == 1.0  # one class total
    scores = np.array([[0.0, 1.0]])
    assert cil_accuracy(scores, np.array([0])) == 0.0


def test_cil_accuracy_random_null():
    rng = np.random.default_rng(1)
    scores = rng.normal(size=(10000, 4))
    labels = rng.integers(0, 4, size=10000)
    acc = cil_accuracy(scores, labels)
    assert abs(acc - 0.25) < 0.02


def test_report_round_trip():
    r = EvalReport(step=2, class_ids=[3, 1], per_class_ap=[0.5, None], map=0.5,
                   cf1=0.4, of1=0.3, skipped_classes=[1], cil_acc=None)
    assert EvalReport.from_dict(r.to_dict()) == r
    row = r.to_csv_row()
    assert row.startswith("2,2,")
