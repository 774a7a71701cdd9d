import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gliograd.metrics import (GradePrediction, accuracy, class_metrics, confusion, dice, predictions_from_json,
                              predictions_to_json, report, roc_auc)


def preds(predicted, truth, scores=None):
    scores = scores if scores is not None else [0.9 if p == "HGG" else 0.1 for p in predicted]
    return [GradePrediction(f"s{i}", s, p, t) for i, (p, t, s) in enumerate(zip(predicted, truth, scores))]


def brute_auc(scores, truth):
    pos = [s for s, t in zip(scores, truth) if t == "HGG"]
    neg = [s for s, t in zip(scores, truth) if t == "LGG"]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def test_hand_enumerated_example():
    ps = preds(["HGG", "HGG", "LGG", "LGG", "HGG"], ["HGG", "LGG", "LGG", "LGG", "HGG"])
    m = class_metrics(ps, "HGG")
    assert (m.precision, m.recall, m.f1) == pytest.approx((2 / 3, 1.0, 0.8))
    assert accuracy(ps) == pytest.approx(0.8)
    c = confusion(ps, "HGG")
    assert accuracy(ps) == (c.tp + c.tn) / c.total


def test_perfect_and_empty_class():
    ps = preds(["HGG", "LGG"], ["HGG", "LGG"])
    for g in ("HGG", "LGG"):
        m = class_metrics(ps, g)
        assert (m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0)
    ps = preds(["HGG", "HGG"], ["HGG", "HGG"])
    m = class_metrics(ps, "LGG")
    assert (m.precision, m.recall, m.f1) == (0.0, 0.0, 0.0) and m.flags


def test_auc_examples():
    assert roc_auc([0.9, 0.8, 0.3], ["HGG", "HGG", "LGG"]) == 1.0
    assert roc_auc([0.5, 0.5], ["HGG", "LGG"]) == 0.5
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], ["HGG", "HGG"])


def random_trial(rng, n):
    truth = [("HGG", "LGG")[i] for i in rng.integers(0, 2, n)]
    predicted = [("HGG", "LGG")[i] for i in rng.integers(0, 2, n)]
    scores = np.round(rng.random(n), 1)  # coarse grid -> many ties
    return truth, predicted, scores


def test_metrics_match_brute_force_counting_1000_trials():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 30))
        truth, predicted, scores = random_trial(rng, n)
        ps = preds(predicted, truth, scores)
        for g in ("HGG", "LGG"):
            tp = sum(p == g and t == g for p, t in zip(predicted, truth))
            fp = sum(p == g and t != g for p, t in zip(predicted, truth))
            fn = sum(p != g and t == g for p, t in zip(predicted, truth))
            prec = tp / (tp + fp) if tp + fp else 0.0
            rec = tp / (tp + fn) if tp + fn else 0.0
            f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
            m = class_metrics(ps, g)
            assert (m.precision, m.recall, m.f1) == (prec, rec, f1)
        assert accuracy(ps) == sum(p == t for p, t in zip(predicted, truth)) / n
        if len(set(truth)) == 2:
            assert abs(roc_auc(scores, truth) - brute_auc(scores, truth)) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=2, max_size=40))
def test_auc_properties(rows):
    scores = np.array([r[0] for r in rows])
    truth = ["HGG" if r[1] else "LGG" for r in rows]
    if len(set(truth)) < 2:
        return
    auc = roc_auc(scores, truth)
    assert 0.0 <= auc <= 1.0
    # strictly increasing relabelling of the distinct scores (exact in floats)
    _, inv = np.unique(scores, return_inverse=True)
    assert roc_auc(inv.astype(float) ** 3 - 7, truth) == pytest.approx(auc, abs=1e-12)
    flipped = ["LGG" if t == "HGG" else "HGG" for t in truth]
    assert roc_auc(scores, flipped) == pytest.approx(1 - auc, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=40))
def test_accuracy_is_frequency_weighted_recall(rows):
    predicted = ["HGG" if a else "LGG" for a, _ in rows]
    truth = ["HGG" if b else "LGG" for _, b in rows]
    ps = preds(predicted, truth)
    acc = accuracy(ps)
    n = len(rows)
    weighted = sum(class_metrics(ps, g).recall * truth.count(g) / n for g in ("HGG", "LGG"))
    assert 0.0 <= acc <= 1.0
    assert acc == pytest.approx(weighted, abs=1e-12)


def test_report_layout_and_serialization():
    ps = preds(["HGG", "LGG", "HGG"], ["HGG", "LGG", "HGG"], [0.8, 0.2, 0.7])
    rep = report(ps)
    d = json.loads(rep.to_json())
    assert d["acc"] == 1.0 and d["roc_auc"] == 1.0
    assert all(d["grades"][g][k] == 1.0 for g in ("LGG", "HGG") for k in ("f1", "precision", "recall"))
    text = rep.to_text().splitlines()
    assert text[0].split() == ["Grade", "F1-score", "Precision", "Recall", "Acc", "ROC-AUC"]
    assert [line.split()[0] for line in text[1:]] == ["LGG", "HGG"]
    back = predictions_from_json(predictions_to_json(ps))
    assert back == sorted(ps, key=lambda p: p.subject_id)


def test_prediction_validation_and_dice():
    with pytest.raises(ValueError):
        GradePrediction("a", 1.5, "HGG")
    with pytest.raises(ValueError):
        GradePrediction("a", 0.5, "GBM")
    a = np.zeros((4, 4)); a[:2] = 1
    b = np.zeros((4, 4)); b[1:3] = 1
    assert dice(a, b) == pytest.approx(0.5)
    assert dice(np.zeros(3), np.zeros(3)) == 1.0
