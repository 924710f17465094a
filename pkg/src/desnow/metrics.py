"""Noise-class confusion metrics.  Noise is the positive class."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .geom import INVALID, NOISE


def _ratio(num: int, den: int) -> float:
    return num / den if den else float("nan")


def iou_from_counts(tp: int, fp: int, fn: int) -> float:
    return _ratio(tp, tp + fp + fn)


@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def iou(self) -> float:
        return iou_from_counts(self.tp, self.fp, self.fn)

    @property
    def precision(self) -> float:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> float:
        return _ratio(self.tp, self.tp + self.fn)

    def __add__(self, other: "Metrics") -> "Metrics":
        return Metrics(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    def row(self) -> dict:
        return {"IoU": self.iou, "Precision": self.precision, "Recall": self.recall,
                "TP": self.tp, "FP": self.fp, "FN": self.fn, "TN": self.tn}


def evaluate(pred: np.ndarray, gt: np.ndarray) -> Metrics:
    """Confusion counts over pixels with a ground-truth return; predicted Invalid counts as not-noise."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth {gt.shape}")
    use = gt != INVALID
    if not use.any():
        raise ValueError("no valid pixels to evaluate")
    p = pred[use] == NOISE
    g = gt[use] == NOISE
    tp = int((p & g).sum())
    fp = int((p & ~g).sum())
    fn = int((~p & g).sum())
    tn = int((~p & ~g).sum())
    return Metrics(tp, fp, fn, tn)


def evaluate_many(preds, gts) -> Metrics:
    total = Metrics(0, 0, 0, 0)
    for p, g in zip(preds, gts):
        total = total + evaluate(p, g)
    return total


def roc_auc(scores, is_noise) -> float:
    """Probability that a random noise pixel outscores a random clean one (ties count half)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    is_noise = np.asarray(is_noise, dtype=bool).ravel()
    n_pos = int(is_noise.sum())
    n_neg = len(scores) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[is_noise].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def pooled_auc(score_planes, gt_planes) -> float:
    s_all, y_all = [], []
    for s, g in zip(score_planes, gt_planes):
        use = (g != INVALID) & ~np.isnan(s)
        s_all.append(s[use])
        y_all.append(g[use] == NOISE)
    return roc_auc(np.concatenate(s_all), np.concatenate(y_all))
