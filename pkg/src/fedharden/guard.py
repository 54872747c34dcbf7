"""Global inference with low-confidence rejection and evaluation metrics
(ACC, ASR, rejection counts, ROC/AUC)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset, TriggerSpec, stamp
from .model import LinearModel, forward_probs


@dataclass
class InferenceVerdict:
    predicted: int
    confidence: float
    accepted: bool


@dataclass
class MetricSet:
    acc: float
    asr: float
    clean_accepted: int
    clean_rejected: int
    bd_accepted: int
    bd_rejected: int
    auc: float

    def as_dict(self) -> dict:
        return {
            "acc": self.acc, "asr": self.asr,
            "clean_accepted": self.clean_accepted, "clean_rejected": self.clean_rejected,
            "bd_accepted": self.bd_accepted, "bd_rejected": self.bd_rejected,
            "auc": self.auc,
        }


def predict_with_threshold(model: LinearModel, x: np.ndarray, tau: float) -> InferenceVerdict:
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    probs = forward_probs(model, x)
    predicted = int(probs.argmax())
    confidence = float(probs[predicted])
    return InferenceVerdict(predicted, confidence, confidence >= tau)


def make_backdoor_eval_set(ds: LabeledDataset, trig: TriggerSpec) -> np.ndarray:
    """Stamped inputs for ASR evaluation, excluding samples already labeled
    with the attack target."""
    keep = ds.labels != trig.target_label
    return stamp(ds.images[keep], trig)


def confidences_and_predictions(model: LinearModel, inputs: np.ndarray):
    probs = forward_probs(model, np.atleast_2d(inputs))
    return probs.max(axis=1), probs.argmax(axis=1)


def compute_metrics(model: LinearModel, clean_test: LabeledDataset,
                    trig: TriggerSpec, tau: float) -> MetricSet:
    """ACC counts rejected clean samples as incorrect; the ASR numerator
    requires acceptance AND prediction of the attack target."""
    if len(clean_test) == 0:
        raise ValueError("empty clean test set")
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    conf_c, pred_c = confidences_and_predictions(model, clean_test.images)
    acc_c = conf_c >= tau
    acc = float(((pred_c == clean_test.labels) & acc_c).mean())

    bd_inputs = make_backdoor_eval_set(clean_test, trig)
    if len(bd_inputs) == 0:
        raise ValueError("empty backdoor test set")
    conf_b, pred_b = confidences_and_predictions(model, bd_inputs)
    acc_b = conf_b >= tau
    asr = float(((pred_b == trig.target_label) & acc_b).mean())

    return MetricSet(
        acc=acc, asr=asr,
        clean_accepted=int(acc_c.sum()), clean_rejected=int((~acc_c).sum()),
        bd_accepted=int(acc_b.sum()), bd_rejected=int((~acc_b).sum()),
        auc=compute_auc(conf_c, conf_b),
    )


def compute_auc(confidences_clean: np.ndarray, confidences_bd: np.ndarray) -> float:
    """AUC of the detector "reject if confidence < t", positives = backdoor.

    Mann-Whitney rank-sum formulation; ties count half.
    """
    cc = np.asarray(confidences_clean, dtype=np.float64)
    cb = np.asarray(confidences_bd, dtype=np.float64)
    if len(cc) == 0 or len(cb) == 0:
        raise ValueError("empty confidence sequence")
    combined = np.concatenate([cb, cc])
    order = np.argsort(combined, kind="mergesort")
    ranks = np.empty(len(combined))
    sorted_vals = combined[order]
    i = 0
    while i < len(combined):
        j = i
        while j + 1 < len(combined) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    clean_rank_sum = ranks[len(cb):].sum()
    n_c, n_b = len(cc), len(cb)
    return float((clean_rank_sum - n_c * (n_c + 1) / 2.0) / (n_b * n_c))


def roc_points(confidences_clean: np.ndarray, confidences_bd: np.ndarray) -> list[tuple[float, float, float]]:
    """(threshold, tpr, fpr) sweep over all distinct confidence values."""
    cc = np.asarray(confidences_clean, dtype=np.float64)
    cb = np.asarray(confidences_bd, dtype=np.float64)
    points = [(0.0, 0.0, 0.0)]
    for t in np.unique(np.concatenate([cb, cc, [1.0]])):
        tpr = float((cb < t).mean())
        fpr = float((cc < t).mean())
        points.append((float(t), tpr, fpr))
    points.append((1.0 + 1e-9, 1.0, 1.0))
    return points
