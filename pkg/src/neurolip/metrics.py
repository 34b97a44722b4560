"""Classification and group-fairness metrics over (score, pred, label, group) records."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

METRIC_NAMES = ("AUC", "ACC", "SEN", "SPC", "DPD", "DEOdds", "ES-AUC")
THRESHOLD = 0.5


class UndefinedMetricError(ValueError):
    pass


def roc_auc(scores, labels) -> float:
    """P(random positive outscores random negative), ties count 1/2 (Mann-Whitney via midranks)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores))
    # midranks over tie blocks
    _, start, counts = np.unique(sorted_scores, return_index=True, return_counts=True)
    mid = start + (counts + 1) / 2.0
    ranks[order] = np.repeat(mid, counts)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def confusion_metrics(preds, labels) -> tuple[float, float, float]:
    preds = np.asarray(preds).astype(bool)
    labels = np.asarray(labels).astype(bool)
    if labels.size == 0:
        raise UndefinedMetricError("no records")
    tp = int((preds & labels).sum())
    tn = int((~preds & ~labels).sum())
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0:
        raise UndefinedMetricError("sensitivity undefined without positives")
    if n_neg == 0:
        raise UndefinedMetricError("specificity undefined without negatives")
    return (tp + tn) / labels.size, tp / n_pos, tn / n_neg


def dpd(preds, groups) -> float:
    """Largest gap in positive-prediction rate between any two groups (0 for a single group)."""
    preds = np.asarray(preds).astype(float)
    groups = np.asarray(groups)
    if preds.size == 0:
        raise ValueError("dpd of an empty record set")
    rates = [preds[groups == g].mean() for g in np.unique(groups)]
    return float(max(rates) - min(rates))


def deodds(preds, labels, groups) -> float:
    """max(largest TPR gap, largest FPR gap) across groups."""
    preds = np.asarray(preds).astype(bool)
    labels = np.asarray(labels).astype(bool)
    groups = np.asarray(groups)
    if preds.size == 0:
        raise ValueError("deodds of an empty record set")
    tprs, fprs = [], []
    for g in np.unique(groups):
        m = groups == g
        pos, neg = m & labels, m & ~labels
        if not pos.any() or not neg.any():
            raise UndefinedMetricError(f"group {g!r} lacks one of the classes")
        tprs.append(preds[pos].mean())
        fprs.append(preds[neg].mean())
    return float(max(max(tprs) - min(tprs), max(fprs) - min(fprs)))


def es_auc(scores, labels, groups) -> float:
    """Overall AUC / (1 + sum over groups of |AUC - AUC_group|)."""
    scores, labels, groups = np.asarray(scores), np.asarray(labels), np.asarray(groups)
    overall = roc_auc(scores, labels)
    dev = 0.0
    for g in np.unique(groups):
        m = groups == g
        try:
            dev += abs(overall - roc_auc(scores[m], labels[m]))
        except UndefinedMetricError:
            raise UndefinedMetricError(f"group {g!r} lacks one of the classes") from None
    return overall / (1.0 + dev)


def metric_report(scores, labels, groups, threshold: float = THRESHOLD) -> dict:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    preds = (scores >= threshold).astype(int)
    acc, sen, spc = confusion_metrics(preds, labels)
    return {
        "AUC": roc_auc(scores, labels),
        "ACC": acc,
        "SEN": sen,
        "SPC": spc,
        "DPD": dpd(preds, groups),
        "DEOdds": deodds(preds, labels, groups),
        "ES-AUC": es_auc(scores, labels, groups),
    }


def mean_report(reports) -> dict:
    return {k: float(np.mean([r[k] for r in reports])) for k in METRIC_NAMES}


def write_report(report: dict, path, full_precision: bool = False) -> None:
    fmt = ".17g" if full_precision else ".6f"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k in METRIC_NAMES:
            w.writerow([k, format(report[k], fmt)])


def read_report(path) -> dict:
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return {k: float(v) for k, v in rows}
