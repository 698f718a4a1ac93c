"""Confusion-matrix metrics: per-label P/R/F1, weighted-F1 and micro-F1 with one label excluded."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def confusion_matrix(gold, pred, n_labels):
    """``cm[g, p]`` counts items with gold ``g`` predicted as ``p``."""
    gold = np.asarray(gold, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if gold.shape != pred.shape:
        raise ValueError("gold and predictions differ in length")
    cm = np.zeros((n_labels, n_labels), dtype=np.int64)
    np.add.at(cm, (gold, pred), 1)
    return cm


def _safe_div(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.divide(a, b, out=np.zeros_like(a), where=b > 0)


def per_label_prf(cm):
    tp = np.diag(cm).astype(float)
    precision = _safe_div(tp, cm.sum(axis=0))
    recall = _safe_div(tp, cm.sum(axis=1))
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return precision, recall, f1


def weighted_f1(cm):
    _, _, f1 = per_label_prf(cm)
    support = cm.sum(axis=1)
    return float((f1 * support).sum() / support.sum()) if support.sum() else 0.0


def micro_f1(cm, exclude=None):
    """Pooled-count F1 over every label except ``exclude``."""
    keep = np.ones(cm.shape[0], dtype=bool)
    if exclude is not None:
        keep[exclude] = False
    tp = np.diag(cm)[keep].sum()
    fp = cm.sum(axis=0)[keep].sum() - tp
    fn = cm.sum(axis=1)[keep].sum() - tp
    denom = 2 * tp + fp + fn
    return float(2 * tp / denom) if denom else 0.0


@dataclass
class EvalReport:
    labels: list
    precision: list
    recall: list
    f1: list
    support: list
    weighted_f1: float
    micro_f1: float
    accuracy: float
    confusion: list
    excluded_label: str | None = None
    rule_accuracy: dict = field(default_factory=dict)
    rule_support: dict = field(default_factory=dict)

    def metric(self, name):
        if name == "weighted_f1":
            return self.weighted_f1
        if name in ("micro_f1", "micro_f1_excluding"):
            return self.micro_f1
        if name == "accuracy":
            return self.accuracy
        raise ValueError(f"unknown metric {name!r}")

    def to_json(self):
        return dict(self.__dict__)

    def to_csv(self):
        lines = ["label,precision,recall,f1,support"]
        for row in zip(self.labels, self.precision, self.recall, self.f1, self.support):
            lines.append("{},{:.6f},{:.6f},{:.6f},{}".format(*row))
        lines.append(f"weighted_f1,,,{self.weighted_f1:.6f},{sum(self.support)}")
        lines.append(f"micro_f1,,,{self.micro_f1:.6f},")
        lines.append(f"accuracy,,,{self.accuracy:.6f},")
        for rule, acc in self.rule_accuracy.items():
            lines.append(f"rule_{rule},,,{acc:.6f},{self.rule_support[rule]}")
        return "\n".join(lines) + "\n"


def evaluation_report(gold, pred, label_names, excluded=None, rules=None):
    """Build an :class:`EvalReport`; ``rules`` optionally tags each item for per-rule accuracy."""
    gold = np.asarray(gold, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    n = len(label_names)
    cm = confusion_matrix(gold, pred, n)
    p, r, f1 = per_label_prf(cm)
    excl_id = None if excluded is None else list(label_names).index(excluded)
    rule_acc, rule_sup = {}, {}
    if rules is not None:
        rules = np.asarray(rules, dtype=object)
        for rule in sorted({x for x in rules if x is not None}):
            sel = rules == rule
            rule_acc[rule] = float((gold[sel] == pred[sel]).mean())
            rule_sup[rule] = int(sel.sum())
    return EvalReport(
        labels=list(label_names),
        precision=p.tolist(), recall=r.tolist(), f1=f1.tolist(),
        support=cm.sum(axis=1).tolist(),
        weighted_f1=weighted_f1(cm),
        micro_f1=micro_f1(cm, excl_id),
        accuracy=float((gold == pred).mean()) if gold.size else 0.0,
        confusion=cm.tolist(),
        excluded_label=excluded,
        rule_accuracy=rule_acc,
        rule_support=rule_sup,
    )
