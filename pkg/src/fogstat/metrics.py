"""Pixel-level evaluation: confusion counts, skill scores, PR/ROC curves."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class MetricReport:
    precision: float
    recall: float
    accuracy: float
    csi: float
    back_iou: float
    miou: float
    f1: float
    kappa: float
    degenerate: set = field(default_factory=set)

    def as_dict(self):
        return {k: getattr(self, k) for k in
                ("precision", "recall", "accuracy", "csi",
                 "back_iou", "miou", "f1", "kappa")}


def confusion(pred, truth, valid=None):
    """Pixel tallies of a binary prediction against a binary truth mask.

    `valid`, when given, restricts counting to pixels where it is nonzero.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} != truth {truth.shape}")
    if valid is None:
        valid = np.ones(pred.shape, dtype=bool)
    elif valid.shape != pred.shape:
        raise ShapeError(f"valid mask {valid.shape} != prediction {pred.shape}")
    else:
        valid = valid.astype(bool)
    p = pred.astype(bool)[valid]
    t = truth.astype(bool)[valid]
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & t)),
        fp=int(np.count_nonzero(p & ~t)),
        fn=int(np.count_nonzero(~p & t)),
        tn=int(np.count_nonzero(~p & ~t)),
    )


def _ratio(num, den, flags, name):
    if den == 0:
        flags.add(name)
        return 0.0
    return num / den


def metrics_from_confusion(c):
    """All skill scores from one set of confusion counts.

    Any 0/0 ratio is defined as 0 and recorded in `degenerate`. Kappa is
    standard Cohen's kappa with chance agreement from the marginals.
    """
    flags = set()
    precision = _ratio(c.tp, c.tp + c.fp, flags, "precision")
    recall = _ratio(c.tp, c.tp + c.fn, flags, "recall")
    accuracy = _ratio(c.tp + c.tn, c.total, flags, "accuracy")
    csi = _ratio(c.tp, c.tp + c.fp + c.fn, flags, "csi")
    back_iou = _ratio(c.tn, c.tn + c.fp + c.fn, flags, "back_iou")
    miou = (csi + back_iou) / 2.0
    f1 = _ratio(2 * precision * recall, precision + recall, flags, "f1")
    if c.total == 0:
        flags.add("kappa")
        kappa = 0.0
    else:
        po = (c.tp + c.tn) / c.total
        pe = ((c.tp + c.fp) * (c.tp + c.fn)
              + (c.fn + c.tn) * (c.fp + c.tn)) / c.total ** 2
        if abs(1.0 - pe) < 1e-15:
            flags.add("kappa")
            kappa = 1.0 if po > 1.0 - 1e-15 else 0.0
        else:
            kappa = (po - pe) / (1.0 - pe)
    return MetricReport(precision, recall, accuracy, csi, back_iou, miou,
                        f1, kappa, flags)


def curves(prob_maps, truths, num_thresholds=101):
    """Threshold-swept PR and ROC points pooled over all images (micro average).

    A pixel is predicted positive when its probability >= threshold, matching
    the mask-generation rule. A final sentinel threshold above 1 contributes
    the (recall 0, FPR 0) endpoint. Returns (rows, roc_auc) where each row is
    (threshold, precision, recall, tpr, fpr).
    """
    if len(prob_maps) != len(truths):
        raise ShapeError("probability maps and truth masks are misaligned")
    probs = np.concatenate([np.asarray(p).ravel() for p in prob_maps])
    truth = np.concatenate([np.asarray(t).ravel().astype(bool) for t in truths])
    pos = np.sort(probs[truth])
    neg = np.sort(probs[~truth])
    npos, nneg = len(pos), len(neg)

    thresholds = list(np.linspace(0.0, 1.0, num_thresholds)) + [np.nextafter(1.0, 2.0)]
    rows = []
    points = []
    for thr in thresholds:
        tp = npos - np.searchsorted(pos, thr, side="left")
        fp = nneg - np.searchsorted(neg, thr, side="left")
        fn = npos - tp
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        tpr = recall
        fpr = fp / nneg if nneg else 0.0
        rows.append((float(thr), precision, recall, tpr, fpr))
        points.append((fpr, tpr))
    points.sort()
    fprs = np.array([p[0] for p in points])
    tprs = np.array([p[1] for p in points])
    auc = float(np.trapezoid(tprs, fprs))
    return rows, auc
