"""Grading metrics: per-class precision/recall/F1, accuracy, ROC-AUC, reports."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .volume import GRADES


@dataclass(frozen=True)
class GradePrediction:
    subject_id: str
    score: float  # P(HGG)
    predicted: str
    truth: str | None = None
    tie: bool = False

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"{self.subject_id}: score {self.score} outside [0, 1]")
        for g in (self.predicted, self.truth):
            if g is not None and g not in GRADES:
                raise ValueError(f"{self.subject_id}: unknown grade {g!r}")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    flags: tuple[str, ...] = ()


def _pairs(predictions):
    preds = [p.predicted for p in predictions]
    truth = [p.truth for p in predictions]
    if not preds:
        raise ValueError("need at least one prediction")
    if any(t is None for t in truth):
        raise ValueError("every prediction needs a true grade")
    return preds, truth


def confusion(predictions, cls: str) -> ConfusionCounts:
    preds, truth = _pairs(predictions)
    p = np.array([x == cls for x in preds])
    t = np.array([x == cls for x in truth])
    return ConfusionCounts(int(np.sum(p & t)), int(np.sum(p & ~t)), int(np.sum(~p & t)), int(np.sum(~p & ~t)))


def _ratio(num: float, den: float, flag: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(flag)
        return 0.0
    return num / den


def class_metrics(predictions, cls: str) -> ClassMetrics:
    """Precision, recall, F1 of ``cls``; a zero denominator yields 0 and a flag."""
    c = confusion(predictions, cls)
    flags: list[str] = []
    precision = _ratio(c.tp, c.tp + c.fp, "precision_undefined", flags)
    recall = _ratio(c.tp, c.tp + c.fn, "recall_undefined", flags)
    f1 = _ratio(2 * precision * recall, precision + recall, "f1_undefined", flags)
    return ClassMetrics(precision, recall, f1, tuple(flags))


def accuracy(predictions) -> float:
    preds, truth = _pairs(predictions)
    return sum(p == t for p, t in zip(preds, truth)) / len(preds)


def roc_auc(scores, truth, positive: str = "HGG") -> float:
    """Mann-Whitney AUC; tied scores contribute one half."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.array([t == positive for t in truth])
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if len(s) != len(pos):
        raise ValueError("scores and truth differ in length")
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC-AUC needs both classes present")
    ranks = rankdata(s)  # average ranks handle ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class GradeReport:
    per_class: dict[str, ClassMetrics]
    accuracy: float
    roc_auc: float
    n: int
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "grades": {g: {"f1": m.f1, "precision": m.precision, "recall": m.recall, "flags": list(m.flags)}
                       for g, m in self.per_class.items()},
            "acc": self.accuracy,
            "roc_auc": self.roc_auc,
            "n": self.n,
            "flags": list(self.flags),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_text(self) -> str:
        rows = [f"{'Grade':<6}{'F1-score':>10}{'Precision':>11}{'Recall':>9}{'Acc':>9}{'ROC-AUC':>10}"]
        for i, (g, m) in enumerate(self.per_class.items()):
            tail = f"{self.accuracy:>9.4f}{self.roc_auc:>10.4f}" if i == 0 else f"{'':>9}{'':>10}"
            rows.append(f"{g:<6}{m.f1:>10.4f}{m.precision:>11.4f}{m.recall:>9.4f}{tail}")
        return "\n".join(rows) + "\n"


def report(predictions) -> GradeReport:
    predictions = list(predictions)
    per = {g: class_metrics(predictions, g) for g in GRADES}
    auc = roc_auc([p.score for p in predictions], [p.truth for p in predictions])
    flags = [f"{g}:{f}" for g, m in per.items() for f in m.flags]
    ties = sum(p.tie for p in predictions)
    if ties:
        flags.append(f"score_ties:{ties}")
    return GradeReport(per, accuracy(predictions), auc, len(predictions), flags)


def predictions_to_json(predictions) -> str:
    rows = [asdict(p) for p in sorted(predictions, key=lambda p: p.subject_id)]
    return json.dumps({"predictions": rows}, sort_keys=True, indent=2) + "\n"


def predictions_from_json(text: str) -> list[GradePrediction]:
    return [GradePrediction(**row) for row in json.loads(text)["predictions"]]


def dice(pred: np.ndarray, truth: np.ndarray) -> float:
    """Binary Dice; two empty masks score 1."""
    p, t = np.asarray(pred).astype(bool), np.asarray(truth).astype(bool)
    den = p.sum() + t.sum()
    return 1.0 if den == 0 else float(2.0 * np.sum(p & t) / den)
