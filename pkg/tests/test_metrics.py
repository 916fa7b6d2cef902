import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oltr.datagen import ShotSplit, split_by_shot
from oltr.metrics import (
    OPEN,
    REJECT,
    build_report,
    confidence,
    detection_curves,
    evaluate_splits,
    mark_open,
    open_f_measure,
    predict_with_reject,
)


def logits_for(probs):
    return np.log(np.asarray(probs, dtype=float))


# -- brute-force oracles -----------------------------------------------------

def oracle_detection(known, opn, target=0.95):
    """Walk every candidate threshold with plain loops."""
    best = None
    for t in sorted(set(known) | set(opn), reverse=True):
        tpr = sum(1 for s in known if s >= t) / len(known)
        fpr = sum(1 for s in opn if s >= t) / len(opn)
        if tpr >= target:
            best = (fpr, 0.5 * (1 - tpr) + 0.5 * fpr)
            break
    wins = 0.0
    for a in known:
        for b in opn:
            wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return best[0], best[1], wins / (len(known) * len(opn))


def oracle_f(predictions, truth):
    tp = fp = fn = 0
    for p, t in zip(predictions, truth):
        if t != OPEN and p == t:
            tp += 1
        else:
            if p != REJECT:
                fp += 1
            if t != OPEN:
                fn += 1
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    return 2 * prec * rec / (prec + rec) if prec + rec else 0.0


# -- predict_with_reject -----------------------------------------------------

def test_confident_prediction():
    assert predict_with_reject(logits_for([0.05, 0.05, 0.90]), 0.1) == 2


def test_uniform_twenty_way_is_rejected():
    assert predict_with_reject(np.zeros(20), 0.1) == REJECT


def test_zero_threshold_never_rejects():
    rng = np.random.default_rng(0)
    assert np.all(predict_with_reject(rng.normal(size=(200, 30)) * 0.01, 0.0) != REJECT)


def test_ties_go_to_lowest_index():
    assert predict_with_reject([1.0, 3.0, 3.0], 0.0) == 1


def test_threshold_out_of_range():
    with pytest.raises(ValueError):
        predict_with_reject([1.0], 1.5)


def test_raising_threshold_never_accepts_more_open_samples():
    rng = np.random.default_rng(1)
    for _ in range(100):
        logits = rng.normal(size=(40, 5)) * rng.uniform(0.1, 5)
        truth = np.where(rng.uniform(size=40) < 0.4, OPEN, rng.integers(0, 5, 40))
        accepted = [int(np.sum((predict_with_reject(logits, t) != REJECT) & (truth == OPEN)))
                    for t in np.linspace(0, 1, 21)]
        assert all(a >= b for a, b in zip(accepted, accepted[1:]))


# -- evaluate_splits ---------------------------------------------------------

SPLIT = ShotSplit(many={0}, medium={1}, few={2})


def test_all_correct_and_all_rejected():
    truth = np.array([0, 1, 2, 2, OPEN])
    right = evaluate_splits(truth, truth, SPLIT)
    assert (right["many"], right["medium"], right["few"], right["overall"]) == (1.0, 1.0, 1.0, 1.0)
    wrong = evaluate_splits(np.full(5, REJECT), truth, SPLIT)
    assert (wrong["many"], wrong["medium"], wrong["few"], wrong["overall"]) == (0.0, 0.0, 0.0, 0.0)


def test_one_error_in_four_few_shot_samples():
    split = ShotSplit(many={0}, medium=set(), few={1})
    truth = np.array([0, 0, 1, 1, 1, 1])
    pred = np.array([0, 0, 1, 1, 0, 1])
    assert evaluate_splits(pred, truth, split)["few"] == 0.75


def test_unassigned_label_raises():
    with pytest.raises(KeyError):
        evaluate_splits([3], [3], SPLIT)


def test_split_accuracy_matches_counting_oracle():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        k = int(rng.integers(1, 7))
        counts = {c: int(rng.integers(1, 200)) for c in range(k)}
        split = split_by_shot(counts)
        n = int(rng.integers(1, 30))
        truth = np.where(rng.uniform(size=n) < 0.2, OPEN, rng.integers(0, k, n))
        pred = np.where(rng.uniform(size=n) < 0.2, REJECT, rng.integers(0, k, n))
        got = evaluate_splits(pred, truth, split)
        for name in ("many", "medium", "few"):
            hits = [p == t for p, t in zip(pred, truth) if t != OPEN and t in getattr(split, name)]
            want = sum(hits) / len(hits) if hits else math.nan
            assert got[name] == pytest.approx(want, abs=1e-9, nan_ok=True)


# -- F-measure ---------------------------------------------------------------

def test_f_measure_hand_example():
    truth = [0, 0, 1, OPEN]   # known {a, a, b}, one open sample
    pred = [0, REJECT, 1, 0]
    assert open_f_measure(pred, truth) == pytest.approx(2 / 3)


def test_f_measure_perfect_and_all_rejected():
    truth = [0, 1, OPEN, OPEN]
    assert open_f_measure([0, 1, REJECT, REJECT], truth) == 1.0
    assert open_f_measure([REJECT] * 4, truth) == 0.0


def test_f_measure_matches_confusion_oracle():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        n, k = int(rng.integers(1, 25)), int(rng.integers(1, 5))
        truth = np.where(rng.uniform(size=n) < 0.3, OPEN, rng.integers(0, k, n))
        pred = np.where(rng.uniform(size=n) < 0.3, REJECT, rng.integers(0, k, n))
        assert abs(open_f_measure(pred, truth) - oracle_f(pred, truth)) <= 1e-9


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([OPEN, 0, 1, 2]), st.sampled_from([REJECT, 0, 1, 2])), min_size=1,
                max_size=30), st.randoms(use_true_random=False))
def test_f_measure_ignores_sample_order(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    t1, p1 = zip(*pairs)
    t2, p2 = zip(*shuffled)
    assert open_f_measure(p1, t1) == open_f_measure(p2, t2)


# -- detection ---------------------------------------------------------------

def test_detection_hand_example():
    res = detection_curves([0.9, 0.8, 0.7, 0.6], [0.65, 0.3])
    assert res.fpr_at_95tpr == 0.5
    assert res.detection_error == 0.25
    assert res.auroc == pytest.approx(0.875)


def test_separated_and_identical_scores():
    sep = detection_curves([0.9, 0.8], [0.1, 0.2])
    assert sep.auroc == 1.0 and sep.fpr_at_95tpr == 0.0
    same = detection_curves([0.3, 0.5, 0.7], [0.3, 0.5, 0.7])
    assert same.auroc == pytest.approx(0.5)


def test_detection_needs_scores():
    with pytest.raises(ValueError):
        detection_curves([], [0.1])


def test_detection_matches_threshold_sweep_oracle():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        # coarse grid so ties are common
        known = list(rng.integers(0, 8, int(rng.integers(1, 12))) / 8)
        opn = list(rng.integers(0, 8, int(rng.integers(1, 12))) / 8)
        res = detection_curves(known, opn)
        fpr, det, auc = oracle_detection(known, opn)
        assert abs(res.fpr_at_95tpr - fpr) <= 1e-9
        assert abs(res.detection_error - det) <= 1e-9
        assert abs(res.auroc - auc) <= 1e-9


# -- report ------------------------------------------------------------------

def test_report_counts_and_serialization():
    rng = np.random.default_rng(5)
    labels = np.array([0] * 5 + [1] * 5 + [2] * 3)
    logits = rng.normal(size=(13, 2))
    report = build_report(logits, labels, (0, 1), ShotSplit(many={0}, medium=set(), few={1}))
    assert report.counts["known"] == 10 and report.counts["open"] == 3
    assert all(0 <= getattr(report, f) <= 1 for f in ("overall", "many", "few", "f_measure", "auroc"))
    assert report.to_csv().splitlines()[0].split(",")[0] == "overall"
    np.testing.assert_array_equal(mark_open(labels, (0, 1))[-3:], OPEN)
    np.testing.assert_allclose(confidence(np.zeros((1, 4))), [0.25])
