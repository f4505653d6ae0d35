"""Overlap, confusion-based and ROC evaluation criteria.

A metric whose denominator is zero is ``None`` ("undefined"), never 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def population(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class EvalReport:
    acc: Optional[float] = None
    sen: Optional[float] = None
    spc: Optional[float] = None
    ppv: Optional[float] = None
    dsc: Optional[float] = None
    jsi: Optional[float] = None
    auc: Optional[float] = None
    roc: List[Tuple[float, float, float]] = field(default_factory=list)

    def as_rows(self) -> List[Tuple[str, Optional[float]]]:
        return [(k, getattr(self, k)) for k in ("acc", "sen", "spc", "ppv", "dsc", "jsi", "auc")]


def confusion(pred, truth) -> ConfusionCounts:
    """Counts for binary masks or label vectors (nonzero = positive)."""
    pred = np.asarray(pred) != 0
    truth = np.asarray(truth) != 0
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    return ConfusionCounts(tp, fp, pred.size - tp - fp - fn, fn)


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den > 0 else None


def basic_metrics(c: ConfusionCounts) -> Dict[str, Optional[float]]:
    return {
        "acc": _ratio(c.tp + c.tn, c.population),
        "sen": _ratio(c.tp, c.tp + c.fn),
        "spc": _ratio(c.tn, c.tn + c.fp),
        "ppv": _ratio(c.tp, c.tp + c.fp),
    }


def overlap_metrics(truth, pred) -> Tuple[float, float]:
    """``(dsc, jsi)``; two empty masks agree perfectly."""
    g = np.asarray(truth) != 0
    p = np.asarray(pred) != 0
    if g.shape != p.shape:
        raise ValueError(f"shape mismatch: {g.shape} vs {p.shape}")
    inter = int(np.count_nonzero(g & p))
    union = int(np.count_nonzero(g | p))
    total = int(np.count_nonzero(g)) + int(np.count_nonzero(p))
    if total == 0:
        return 1.0, 1.0
    return 2.0 * inter / total, inter / union


def roc_curve(scores: Sequence[float], labels: Sequence[int]) -> List[Tuple[float, float, float]]:
    """``(threshold, fpr, tpr)`` at every distinct score (predict positive if score >= threshold),
    preceded by the ``(inf, 0, 0)`` endpoint. The lowest threshold yields ``(1, 1)``."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    pos, neg = int(y.sum()), int((1 - y).sum())
    if pos == 0 or neg == 0:
        raise ValueError("ROC needs at least one positive and one negative label")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tps = np.cumsum(y)
    fps = np.cumsum(1 - y)
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    points = [(math.inf, 0.0, 0.0)]
    points += [(float(s[i]), fps[i] / neg, tps[i] / pos) for i in last]
    return points


def trapezoid_auc(points: Iterable[Tuple[float, float, float]]) -> float:
    pts = list(points)
    area = 0.0
    for (_, f0, t0), (_, f1, t1) in zip(pts, pts[1:]):
        area += (f1 - f0) * (t0 + t1) / 2.0
    return float(area)


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> EvalReport:
    pts = roc_curve(scores, labels)
    return EvalReport(auc=trapezoid_auc(pts), roc=pts)


def pair_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability a random positive outscores a random negative, ties counted 1/2."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    sp, sn = s[y][:, None], s[~y][None, :]
    if sp.size == 0 or sn.size == 0:
        raise ValueError("need both classes")
    return float(((sp > sn).sum() + 0.5 * (sp == sn).sum()) / (sp.size * sn.size))


def mean_defined(values: Iterable[Optional[float]]) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def segmentation_report(truths: Sequence[np.ndarray], preds: Sequence[np.ndarray]) -> EvalReport:
    """Per-image metrics averaged over images."""
    rows = []
    for g, p in zip(truths, preds):
        dsc, jsi = overlap_metrics(g, p)
        row = basic_metrics(confusion(p, g))
        row.update(dsc=dsc, jsi=jsi)
        rows.append(row)
    return EvalReport(**{k: mean_defined(r[k] for r in rows)
                         for k in ("acc", "sen", "spc", "ppv", "dsc", "jsi")})


def classification_report(labels: Sequence[int], scores: Sequence[float], threshold: float = 0.5) -> EvalReport:
    labels = np.asarray(labels).astype(int)
    scores = np.asarray(scores, dtype=np.float64)
    m = basic_metrics(confusion((scores >= threshold).astype(int), labels))
    rep = roc_auc(scores, labels)
    return EvalReport(auc=rep.auc, roc=rep.roc, **m)
