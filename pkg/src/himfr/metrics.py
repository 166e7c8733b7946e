"""Classification, image-quality and ROC metrics."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeError


class UndefinedMetricWarning(UserWarning):
    """A metric had a zero denominator and was reported as 0."""


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def confusion(predictions: Sequence, truths: Sequence, positive) -> ConfusionCounts:
    """One-vs-rest tallies with ``positive`` as the positive class."""
    pred = np.asarray(predictions)
    true = np.asarray(truths)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ValueError(f"predictions and truths must be equal-length 1-D sequences, got {pred.shape} and {true.shape}")
    if pred.size == 0:
        raise ValueError("cannot tally an empty prediction set")
    p = pred == positive
    t = true == positive
    return ConfusionCounts(
        tp=int(np.sum(p & t)), tn=int(np.sum(~p & ~t)), fp=int(np.sum(p & ~t)), fn=int(np.sum(~p & t))
    )


def _ratio(num: float, den: float, name: str) -> float:
    if den == 0:
        warnings.warn(f"{name} has a zero denominator; reported as 0", UndefinedMetricWarning, stacklevel=3)
        return 0.0
    return num / den


def precision(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp, "precision")


def recall(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn, "recall")


def accuracy(c: ConfusionCounts) -> float:
    return _ratio(c.tp + c.tn, c.total, "accuracy")


def f1(c: ConfusionCounts) -> float:
    p, r = precision(c), recall(c)
    return _ratio(2 * p * r, p + r, "f1")


def macro_and_weighted(values: Sequence[float], supports: Sequence[float]) -> tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    supports = np.asarray(supports, dtype=np.float64)
    if values.size == 0:
        raise ValueError("no classes to aggregate")
    if values.shape != supports.shape:
        raise ValueError("one support per class value is required")
    if supports.sum() <= 0:
        raise ValueError("supports must sum to a positive number")
    return float(values.mean()), float(np.dot(values, supports) / supports.sum())


@dataclass
class ClassificationReport:
    """Per-class precision/recall/F1/support plus accuracy and macro/weighted rows."""

    labels: list
    precision: list[float]
    recall: list[float]
    f1: list[float]
    support: list[int]
    accuracy: float
    macro: dict[str, float]
    weighted: dict[str, float]

    def rows(self) -> list[tuple[str, str, float]]:
        out = []
        for i, lab in enumerate(self.labels):
            out += [
                ("precision", str(lab), self.precision[i]),
                ("recall", str(lab), self.recall[i]),
                ("f1", str(lab), self.f1[i]),
                ("support", str(lab), float(self.support[i])),
            ]
        out.append(("accuracy", "all", self.accuracy))
        for name in ("precision", "recall", "f1"):
            out.append((name, "macro avg", self.macro[name]))
        for name in ("precision", "recall", "f1"):
            out.append((name, "weighted avg", self.weighted[name]))
        return out

    def table(self) -> str:
        lines = [f"{'class':>14} {'precision':>10} {'recall':>10} {'f1-score':>10} {'support':>8}"]
        for i, lab in enumerate(self.labels):
            lines.append(
                f"{str(lab):>14} {self.precision[i]:10.2f} {self.recall[i]:10.2f} {self.f1[i]:10.2f} {self.support[i]:8d}"
            )
        n = sum(self.support)
        lines.append(f"{'accuracy':>14} {'':>10} {'':>10} {self.accuracy:10.2f} {n:8d}")
        for name, agg in (("macro avg", self.macro), ("weighted avg", self.weighted)):
            lines.append(
                f"{name:>14} {agg['precision']:10.2f} {agg['recall']:10.2f} {agg['f1']:10.2f} {n:8d}"
            )
        return "\n".join(lines)


def classification_report(predictions: Sequence, truths: Sequence, labels: Sequence | None = None) -> ClassificationReport:
    """Multi-class report; accuracy is the overall fraction correct."""
    pred = np.asarray(predictions)
    true = np.asarray(truths)
    if pred.shape != true.shape or pred.size == 0:
        raise ValueError("predictions and truths must be non-empty and of equal length")
    if labels is None:
        labels = sorted(set(true.tolist()) | set(pred.tolist()))
    per = {"precision": [], "recall": [], "f1": []}
    support = []
    for lab in labels:
        c = confusion(pred, true, lab)
        per["precision"].append(precision(c))
        per["recall"].append(recall(c))
        per["f1"].append(f1(c))
        support.append(c.tp + c.fn)
    macro, weighted = {}, {}
    for name, vals in per.items():
        if sum(support) > 0:
            macro[name], weighted[name] = macro_and_weighted(vals, support)
        else:
            macro[name] = weighted[name] = 0.0
    acc = float(np.mean(pred == true))
    return ClassificationReport(list(labels), per["precision"], per["recall"], per["f1"], support, acc, macro, weighted)


# ------------------------------------------------------------------ image quality


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    return a, b


def psnr(a, b, peak: float = 1.0, mask=None) -> float:
    """``10 log10(peak^2 / MSE)``; ``math.inf`` for identical inputs.

    With ``mask`` the MSE only covers pixels where the mask is true.
    """
    if peak <= 0:
        raise ValueError("peak must be positive")
    a, b = _pair(a, b)
    err = (a - b) ** 2
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape[:2]:
            raise ShapeError("mask does not match image size")
        if not mask.any():
            raise ValueError("mask selects no pixels")
        err = err[mask]
    mse = float(err.mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # Separable Gaussian filter, evaluated only where the window fits entirely.
    win = np.lib.stride_tricks.sliding_window_view(img, len(g), axis=0)
    rows = win @ g
    win = np.lib.stride_tricks.sliding_window_view(rows, len(g), axis=1)
    return win @ g


def ssim_map(a, b, window: int = 11, sigma: float = 1.5, peak: float = 1.0, k1: float = 0.01, k2: float = 0.03):
    a, b = _pair(a, b)
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"image {a.shape[:2]} is smaller than the {window}x{window} window")
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    g = gaussian_window(window, sigma)
    maps = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        maps.append(num / den)
    return np.stack(maps, axis=2)


def ssim(a, b, window: int = 11, sigma: float = 1.5, peak: float = 1.0) -> float:
    """Mean SSIM over every valid window position and channel."""
    return float(ssim_map(a, b, window, sigma, peak).mean())


# --------------------------------------------------------------------------- ROC


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


def trapezoid_auc(fpr, tpr) -> float:
    fpr = np.asarray(fpr, dtype=np.float64)
    tpr = np.asarray(tpr, dtype=np.float64)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1])) / 2.0)


def roc_auc(scores: Sequence[float], truths: Sequence) -> RocCurve:
    """Threshold sweep over the unique scores (descending) with trapezoidal AUC.

    Tied scores form one step, so the area equals the Mann-Whitney statistic
    with ties counted as one half.
    """
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(truths).astype(bool)
    if s.shape != t.shape or s.ndim != 1:
        raise ValueError("scores and truths must be equal-length 1-D sequences")
    n_pos = int(t.sum())
    n_neg = int(t.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC AUC is undefined unless both classes are present")

    order = np.argsort(-s, kind="mergesort")
    s, t = s[order], t[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.r_[0, np.cumsum(t)[last_of_group]]
    fp = np.r_[0, np.cumsum(~t)[last_of_group]]
    # Integer doubled area keeps the result exact up to the final division.
    area2 = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    auc = area2 / (2 * n_pos * n_neg)
    thresholds = np.r_[np.inf, s[last_of_group]]
    return RocCurve(fp / n_neg, tp / n_pos, thresholds, auc)


def one_vs_rest_roc(probabilities, truths, n_classes: int | None = None) -> list[RocCurve | None]:
    """Per-class ROC using each class's probability column; ``None`` where a class is absent."""
    probs = np.asarray(probabilities, dtype=np.float64)
    truths = np.asarray(truths)
    n_classes = probs.shape[1] if n_classes is None else n_classes
    curves = []
    for c in range(n_classes):
        t = truths == c
        curves.append(roc_auc(probs[:, c], t) if 0 < t.sum() < t.size else None)
    return curves
