"""Evaluation metrics: per-class average precision, mAP, the fixed-threshold
F1 pair, and single-label top-1 accuracy for class-incremental evaluation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ShapeError


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """AP = mean over positives of precision at their rank.

    Ranking is by descending score with ties broken by original index.
    Requires at least one positive label.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ShapeError(f"scores {scores.shape} vs labels {labels.shape}")
    pos = labels > 0
    npos = int(pos.sum())
    if npos == 0:
        raise ValueError("average precision undefined without positives")
    order = np.argsort(-scores, kind="stable")
    hits = pos[order]
    cum = np.cumsum(hits)
    ranks = np.arange(1, len(scores) + 1)
    return float((cum[hits] / ranks[hits]).sum() / npos)


def mean_average_precision(scores: np.ndarray, labels: np.ndarray,
                           warn: bool = True):
    """Column-wise AP over [N x K] score/label matrices.

    Classes without positives are excluded from the mean and reported back;
    returns (mAP, per-class AP list with None for skipped, skipped indices).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ShapeError(f"scores {scores.shape} vs labels {labels.shape}")
    per_class: List[Optional[float]] = []
    skipped: List[int] = []
    for k in range(scores.shape[1]):
        if labels[:, k].sum() == 0:
            per_class.append(None)
            skipped.append(k)
        else:
            per_class.append(average_precision(scores[:, k], labels[:, k]))
    if skipped and warn:
        warnings.warn(f"{len(skipped)} class(es) without positives excluded from mAP: {skipped}")
    valid = [ap for ap in per_class if ap is not None]
    m = float(np.mean(valid)) if valid else 0.0
    return m, per_class, skipped


def f1_suite(predictions: np.ndarray, labels: np.ndarray):
    """(CF1, OF1): mean per-class F1 and micro F1 over flattened counts.

    A class with neither predictions nor positives contributes 0 to CF1.
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or predictions.ndim != 2:
        raise ShapeError(f"predictions {predictions.shape} vs labels {labels.shape}")
    pred = predictions > 0
    truth = labels > 0
    tp = (pred & truth).sum(axis=0).astype(np.float64)
    fp = (pred & ~truth).sum(axis=0).astype(np.float64)
    fn = (~pred & truth).sum(axis=0).astype(np.float64)
    denom = 2 * tp + fp + fn
    per_class = np.divide(2 * tp, denom, out=np.zeros_like(denom), where=denom > 0)
    cf1 = float(per_class.mean())
    total = 2 * tp.sum() + fp.sum() + fn.sum()
    of1 = float(2 * tp.sum() / total) if total > 0 else 0.0
    return cf1, of1


def cil_accuracy(scores: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy of argmax over concatenated logits (single-label data)."""
    scores = np.asarray(scores)
    labels = np.asarray(labels).reshape(-1)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise ShapeError(f"scores {scores.shape} vs labels {labels.shape}")
    return float((scores.argmax(axis=1) == labels).mean())


@dataclass
class EvalReport:
    """Metrics after one incremental step, over all classes seen so far."""

    step: int
    class_ids: List[int]
    per_class_ap: List[Optional[float]]
    map: float
    cf1: float
    of1: float
    skipped_classes: List[int] = field(default_factory=list)
    cil_acc: Optional[float] = None

    def to_dict(self) -> Dict:
        return {
            "step": self.step,
            "class_ids": list(self.class_ids),
            "per_class_ap": self.per_class_ap,
            "map": self.map,
            "cf1": self.cf1,
            "of1": self.of1,
            "skipped_classes": list(self.skipped_classes),
            "cil_acc": self.cil_acc,
        }

    @classmethod
    def from_dict(cls, d: Dict) -> "EvalReport":
        return cls(step=d["step"], class_ids=list(d["class_ids"]),
                   per_class_ap=list(d["per_class_ap"]), map=d["map"],
                   cf1=d["cf1"], of1=d["of1"],
                   skipped_classes=list(d.get("skipped_classes", [])),
                   cil_acc=d.get("cil_acc"))

    csv_header = "step,num_classes,map,cf1,of1,cil_acc"

    def to_csv_row(self) -> str:
        acc = "" if self.cil_acc is None else repr(self.cil_acc)
        return f"{self.step},{len(self.class_ids)},{self.map!r},{self.cf1!r},{self.of1!r},{acc}"


def avg_map(history: Sequence[EvalReport]) -> float:
    """Mean of the after-each-step mAPs over the incremental run."""
    if not history:
        raise ShapeError("avg_map over empty history")
    return float(np.mean([r.map for r in history]))
