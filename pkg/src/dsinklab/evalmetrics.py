"""Evaluation suite: split accuracies, macro-F1, macro OvR AUC, noise correction.

Class splits (many/medium/few) are derived from *training* per-class counts:
top 30% of classes by count, middle 40%, bottom 30%, rounded half-up with
index tie-breaks. AUC is the exact rank statistic with half credit for ties,
one-vs-rest per class, averaged unweighted.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from io import StringIO

import numpy as np
from scipy.stats import rankdata

from .errors import MalformedFileError
from .synthdata import Dataset

REPORT_COLUMNS = (
    "arm",
    "seed",
    "overall_acc",
    "many_acc",
    "medium_acc",
    "few_acc",
    "macro_f1",
    "macro_auc",
    "noise_correction_rate",
    "recipe",
)


@dataclass
class EvalReport:
    """One result row: accuracies in [0, 100], the other rates in [0, 1]."""

    arm: str
    seed: int
    overall_acc: float
    many_acc: float
    medium_acc: float
    few_acc: float
    macro_f1: float
    macro_auc: float
    noise_correction_rate: float
    recipe: str = ""

    def to_csv_row(self) -> str:
        buf = StringIO()
        csv.writer(buf, lineterminator="\n").writerow(
            [
                self.arm,
                self.seed,
                repr(self.overall_acc),
                repr(self.many_acc),
                repr(self.medium_acc),
                repr(self.few_acc),
                repr(self.macro_f1),
                repr(self.macro_auc),
                repr(self.noise_correction_rate),
                self.recipe,
            ]
        )
        return buf.getvalue()

    @classmethod
    def from_csv_fields(cls, fields, line_no=0) -> "EvalReport":
        if len(fields) != len(REPORT_COLUMNS):
            raise MalformedFileError(
                f"line {line_no}: expected {len(REPORT_COLUMNS)} columns, got {len(fields)}"
            )
        try:
            return cls(
                arm=fields[0],
                seed=int(fields[1]),
                overall_acc=float(fields[2]),
                many_acc=float(fields[3]),
                medium_acc=float(fields[4]),
                few_acc=float(fields[5]),
                macro_f1=float(fields[6]),
                macro_auc=float(fields[7]),
                noise_correction_rate=float(fields[8]),
                recipe=fields[9],
            )
        except ValueError as exc:
            raise MalformedFileError(f"line {line_no}: {exc}") from exc


@dataclass
class MetricSummary:
    """Raw metrics as fractions in [0, 1]; per_class_acc has one entry per class."""

    per_class_acc: np.ndarray
    overall_acc: float
    macro_f1: float
    macro_auc: float


def split_classes(class_counts):
    """Partition class ids into (many, medium, few) by descending count.

    Sizes are round(0.3*C) / remainder / round(0.3*C); ties in counts break
    toward the lower class index. Requires at least three classes.
    """
    counts = np.asarray(class_counts, dtype=np.int64)
    num_classes = len(counts)
    if num_classes < 3:
        raise ValueError(f"need at least 3 classes to split, got {num_classes}")
    order = np.lexsort((np.arange(num_classes), -counts))
    n_many = int(np.floor(0.3 * num_classes + 0.5))
    n_few = int(np.floor(0.3 * num_classes + 0.5))
    many = np.sort(order[:n_many])
    medium = np.sort(order[n_many : num_classes - n_few])
    few = np.sort(order[num_classes - n_few :])
    return many, medium, few


def _binary_rank_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    n_pos = int(positive.sum())
    n_neg = len(scores) - n_pos
    if n_pos == 0 or n_neg == 0:
        return np.nan
    ranks = rankdata(scores, method="average")
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def evaluate(probs: np.ndarray, true_labels) -> MetricSummary:
    """Accuracy, macro-F1, and macro one-vs-rest AUC from class probabilities.

    Predictions are per-column argmax (lowest index wins ties). Per-class F1
    uses 2TP/(2TP+FP+FN); a class that is absent and never predicted scores 1,
    one that is present but never predicted scores 0.
    """
    probs = np.asarray(probs, dtype=np.float64)
    true_labels = np.asarray(true_labels, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[1] != len(true_labels):
        raise ValueError(
            f"probs shape {probs.shape} does not match {len(true_labels)} labels"
        )
    num_classes = probs.shape[0]
    pred = probs.argmax(axis=0)
    correct = pred == true_labels
    overall = float(correct.mean())

    per_class = np.empty(num_classes)
    f1s = np.empty(num_classes)
    aucs = []
    for c in range(num_classes):
        is_c = true_labels == c
        per_class[c] = float(correct[is_c].mean()) if is_c.any() else np.nan
        tp = int(np.sum(is_c & (pred == c)))
        fp = int(np.sum(~is_c & (pred == c)))
        fn = int(np.sum(is_c & (pred != c)))
        denom = 2 * tp + fp + fn
        f1s[c] = 1.0 if denom == 0 else 2.0 * tp / denom
        auc = _binary_rank_auc(probs[c], is_c)
        if not np.isnan(auc):
            aucs.append(auc)
    if not aucs:
        raise ValueError("AUC undefined: no class has both positives and negatives")
    return MetricSummary(per_class, overall, float(np.mean(f1s)), float(np.mean(aucs)))


def noise_correction_rate(probs: np.ndarray, ds: Dataset) -> float:
    """Among mislabeled training samples, fraction predicted as their true class."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (ds.num_classes, ds.num_samples):
        raise ValueError(
            f"probs shape {probs.shape} does not match dataset "
            f"({ds.num_classes}, {ds.num_samples})"
        )
    noisy = ds.observed_labels != ds.true_labels
    if not noisy.any():
        raise ValueError("dataset has no noisy samples; correction rate undefined")
    pred = probs[:, noisy].argmax(axis=0)
    return float(np.mean(pred == ds.true_labels[noisy]))


def make_report(
    arm: str,
    seed: int,
    test_probs: np.ndarray,
    test_labels,
    train_class_counts,
    ncr: float,
    recipe_echo: str = "",
) -> EvalReport:
    """Assemble the standard result row; accuracies are reported as percent."""
    summary = evaluate(test_probs, test_labels)
    many, medium, few = split_classes(train_class_counts)
    labels = np.asarray(test_labels, dtype=np.int64)
    pred = np.asarray(test_probs).argmax(axis=0)

    def split_acc(classes):
        mask = np.isin(labels, classes)
        if not mask.any():
            return np.nan
        return 100.0 * float(np.mean(pred[mask] == labels[mask]))

    return EvalReport(
        arm=arm,
        seed=seed,
        overall_acc=100.0 * summary.overall_acc,
        many_acc=split_acc(many),
        medium_acc=split_acc(medium),
        few_acc=split_acc(few),
        macro_f1=summary.macro_f1,
        macro_auc=summary.macro_auc,
        noise_correction_rate=ncr,
        recipe=recipe_echo,
    )
