"""Closed- and open-set evaluation metrics."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .datagen import ShotSplit

REJECT = -1   # prediction: sample judged to belong to no known class
OPEN = -2     # ground truth: sample from an open class

DEFAULT_THRESHOLD = 0.1


def _softmax(logits):
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def confidence(logits) -> np.ndarray:
    """Max softmax probability per row."""
    return _softmax(np.asarray(logits, dtype=np.float64)).max(axis=-1)


def predict_with_reject(logits, threshold: float = DEFAULT_THRESHOLD):
    """Argmax label, or REJECT when the max probability is below ``threshold``.

    Accepts a single logit vector (returns an int) or an N x K matrix.
    """
    if not 0 <= threshold <= 1:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    logits = np.asarray(logits, dtype=np.float64)
    probs = _softmax(logits)
    pred = np.argmax(probs, axis=-1)  # first index wins ties
    out = np.where(probs.max(axis=-1) < threshold, REJECT, pred)
    return int(out) if logits.ndim == 1 else out.astype(np.int64)


def mark_open(labels, known_labels) -> np.ndarray:
    labels = np.asarray(labels)
    return np.where(np.isin(labels, list(known_labels)), labels, OPEN)


def evaluate_splits(predictions, truth, split: ShotSplit) -> dict:
    """Accuracy per shot split over known-class samples; REJECT counts as wrong."""
    predictions, truth = np.asarray(predictions), np.asarray(truth)
    known = truth != OPEN
    lookup = {}
    for name in ("many", "medium", "few"):
        for label in getattr(split, name):
            lookup[label] = name
    missing = sorted({int(t) for t in truth[known]} - set(lookup))
    if missing:
        raise KeyError(f"labels {missing} are not assigned to any shot split")
    out, counts = {}, {}
    for name in ("many", "medium", "few"):
        mask = known & np.isin(truth, sorted(getattr(split, name)))
        counts[name] = int(mask.sum())
        out[name] = float(np.mean(predictions[mask] == truth[mask])) if mask.any() else float("nan")
    out["overall"] = float(np.mean(predictions[known] == truth[known])) if known.any() else float("nan")
    counts["overall"] = int(known.sum())
    out["counts"] = counts
    return out


def open_f_measure(predictions, truth) -> float:
    """F1 of micro-averaged known-class precision and recall.

    precision = correct known predictions / all non-REJECT predictions (open samples included)
    recall    = correct known predictions / known ground-truth samples
    """
    predictions, truth = np.asarray(predictions), np.asarray(truth)
    predicted_known = predictions != REJECT
    correct = int(np.sum(predicted_known & (truth != OPEN) & (predictions == truth)))
    n_pred = int(predicted_known.sum())
    n_true = int(np.sum(truth != OPEN))
    p = correct / n_pred if n_pred else 0.0
    r = correct / n_true if n_true else 0.0
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


@dataclass(frozen=True)
class DetectionResult:
    fpr_at_95tpr: float
    detection_error: float
    auroc: float


def detection_curves(known_scores, open_scores, tpr_target: float = 0.95) -> DetectionResult:
    """Threshold sweep treating higher scores as 'known'."""
    known = np.sort(np.asarray(known_scores, dtype=np.float64))
    opn = np.sort(np.asarray(open_scores, dtype=np.float64))
    if known.size == 0 or opn.size == 0:
        raise ValueError("detection_curves needs non-empty known and open score lists")
    thresholds = np.unique(np.concatenate([known, opn]))[::-1]  # descending
    # fraction of scores >= t
    tpr = 1.0 - np.searchsorted(known, thresholds, side="left") / known.size
    fpr = 1.0 - np.searchsorted(opn, thresholds, side="left") / opn.size
    ok = np.flatnonzero(tpr >= tpr_target)
    i = ok[0]  # thresholds descend, so the first hit is the largest t
    fpr95 = float(fpr[i])
    det = float(0.5 * (1 - tpr[i]) + 0.5 * fpr[i])
    xs = np.concatenate([[0.0], fpr])
    ys = np.concatenate([[0.0], tpr])
    auroc = float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2))
    return DetectionResult(fpr95, det, auroc)


@dataclass
class EvalReport:
    overall: float
    many: float
    medium: float
    few: float
    closed_overall: float
    closed_many: float
    closed_medium: float
    closed_few: float
    f_measure: float
    fpr_at_95tpr: float
    detection_error: float
    auroc: float
    threshold: float
    counts: dict = field(default_factory=dict)

    CSV_FIELDS = ("overall", "many", "medium", "few", "closed_overall", "closed_many", "closed_medium",
                  "closed_few", "f_measure", "fpr_at_95tpr", "detection_error", "auroc", "threshold",
                  "n_known", "n_open")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def csv_row(self) -> dict:
        d = self.to_dict()
        row = {k: d[k] for k in self.CSV_FIELDS if k in d}
        row["n_known"] = self.counts.get("known", 0)
        row["n_open"] = self.counts.get("open", 0)
        return row

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.CSV_FIELDS, lineterminator="\n")
        if header:
            writer.writeheader()
        writer.writerow({k: _fmt(v) for k, v in self.csv_row().items()})
        return buf.getvalue()


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else v


def build_report(logits, labels, known_labels, split: ShotSplit, threshold: float = DEFAULT_THRESHOLD) -> EvalReport:
    """Full open-set report from test logits and hidden labels (open classes carry labels outside ``known_labels``)."""
    logits = np.asarray(logits, dtype=np.float64)
    truth = mark_open(labels, known_labels)
    open_mask = truth == OPEN
    rejecting = predict_with_reject(logits, threshold)
    closed = np.argmax(logits, axis=1)
    acc_open = evaluate_splits(rejecting, truth, split)
    acc_closed = evaluate_splits(closed, truth, split)
    conf = confidence(logits)
    if open_mask.any() and (~open_mask).any():
        det = detection_curves(conf[~open_mask], conf[open_mask])
    else:
        det = DetectionResult(float("nan"), float("nan"), float("nan"))
    counts = dict(acc_open["counts"])
    counts.update(known=int((~open_mask).sum()), open=int(open_mask.sum()),
                  rejected=int(np.sum(rejecting == REJECT)))
    return EvalReport(
        overall=acc_open["overall"], many=acc_open["many"], medium=acc_open["medium"], few=acc_open["few"],
        closed_overall=acc_closed["overall"], closed_many=acc_closed["many"],
        closed_medium=acc_closed["medium"], closed_few=acc_closed["few"],
        f_measure=open_f_measure(rejecting, truth),
        fpr_at_95tpr=det.fpr_at_95tpr, detection_error=det.detection_error, auroc=det.auroc,
        threshold=threshold, counts=counts,
    )
