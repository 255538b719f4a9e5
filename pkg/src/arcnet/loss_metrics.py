"""Margin loss on capsule norms and confusion-matrix based metrics."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, record


@dataclass(frozen=True)
class MarginConfig:
    m_plus: float = 0.95
    m_minus: float = 0.05
    lambda_down: float = 0.5

    def __post_init__(self):
        if not 0 < self.m_minus < self.m_plus < 1:
            raise ValueError(f"need 0 < m_minus < m_plus < 1, got {self.m_minus}, {self.m_plus}")


def margin_loss(norms: Tensor, labels, cfg: MarginConfig = MarginConfig()) -> Tensor:
    """Batch mean of sum_k T_k relu(m+ - n_k)^2 + lambda (1-T_k) relu(n_k - m-)^2."""
    n = norms.data
    labels = np.asarray(labels, dtype=np.int64)
    B, C = n.shape
    if labels.shape != (B,):
        raise ValueError(f"expected {B} labels, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= C:
        raise IndexError(f"label out of range for {C} classes")
    T = np.zeros_like(n)
    T[np.arange(B), labels] = 1
    lam = n.dtype.type(cfg.lambda_down)
    pos = np.maximum(0, cfg.m_plus - n).astype(n.dtype)
    neg = np.maximum(0, n - cfg.m_minus).astype(n.dtype)
    per = (T * pos ** 2 + lam * (1 - T) * neg ** 2).sum(axis=1)
    out = np.asarray(per.mean(), dtype=n.dtype)

    def backward(g):
        return ((g / B) * (-2 * T * pos + 2 * lam * (1 - T) * neg),)

    return record("margin_loss", out, (norms,), backward)


@dataclass
class EvalReport:
    confusion: np.ndarray  # [C, C], rows true, cols predicted
    accuracy: float
    precision: float
    recall: float
    wf1: float
    class_names: tuple = ()

    @property
    def n(self) -> int:
        return int(self.confusion.sum())

    def metrics(self) -> dict:
        return {"accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall, "wf1": self.wf1}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = self.class_names or tuple(str(i) for i in range(len(self.confusion)))
        w.writerow(names)
        for row in self.confusion:
            w.writerow(int(v) for v in row)
        for k, v in self.metrics().items():
            w.writerow([k, repr(float(v))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        rows = list(csv.reader(io.StringIO(text)))
        names = tuple(rows[0])
        C = len(names)
        confusion = np.array([[int(v) for v in r] for r in rows[1:1 + C]], dtype=np.int64)
        m = {r[0]: float(r[1]) for r in rows[1 + C:] if r}
        return cls(confusion, m["accuracy"], m["precision"], m["recall"], m["wf1"], names)


def confusion_matrix(predictions, labels, n_classes: int) -> np.ndarray:
    p = np.asarray(predictions, dtype=np.int64)
    t = np.asarray(labels, dtype=np.int64)
    if p.shape != t.shape:
        raise ValueError(f"{p.size} predictions vs {t.size} labels")
    for arr in (p, t):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise IndexError(f"class index out of range for {n_classes} classes")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def _per_class(cm: np.ndarray):
    cm = cm.astype(np.float64)
    tp = np.diag(cm)
    pred = cm.sum(axis=0)
    support = cm.sum(axis=1)
    prec = np.divide(tp, pred, out=np.zeros_like(tp), where=pred > 0)
    rec = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    denom = prec + rec
    f1 = np.divide(2 * prec * rec, denom, out=np.zeros_like(tp), where=denom > 0)
    return prec, rec, f1, support


def weighted_f1(cm: np.ndarray) -> float:
    """Support-weighted F1; undefined per-class terms count as 0."""
    cm = np.asarray(cm)
    N = cm.sum()
    if N == 0:
        raise ValueError("weighted F1 of an empty confusion matrix")
    _, _, f1, support = _per_class(cm)
    return float((support / N * f1).sum())


def report_from_confusion(cm: np.ndarray, class_names=()) -> EvalReport:
    N = cm.sum()
    if N == 0:
        raise ValueError("cannot report on zero samples")
    prec, rec, f1, support = _per_class(cm)
    w = support / N
    return EvalReport(cm, float(np.trace(cm) / N), float((w * prec).sum()),
                      float((w * rec).sum()), float((w * f1).sum()), tuple(class_names))


def classification_report(predictions, labels, n_classes: int, class_names=()) -> EvalReport:
    return report_from_confusion(confusion_matrix(predictions, labels, n_classes), class_names)
