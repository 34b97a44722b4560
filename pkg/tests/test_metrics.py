import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neurolip.metrics import (METRIC_NAMES, UndefinedMetricError, confusion_metrics, deodds, dpd,
                              es_auc, metric_report, read_report, roc_auc, write_report)


def auc_by_pairs(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_auc_examples():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert roc_auc([0.3] * 5, [0, 1, 0, 1, 1]) == 0.5
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1, 0.2], [1, 1])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=2, max_size=50))
def test_auc_pairwise_and_complement(pairs):
    scores = np.array([p[0] / 6 for p in pairs])
    labels = np.array([p[1] for p in pairs])
    if labels.all() or not labels.any():
        return
    assert roc_auc(scores, labels) == pytest.approx(auc_by_pairs(scores, labels), abs=1e-12)
    assert roc_auc(scores, labels) + roc_auc(-scores, labels) == pytest.approx(1.0, abs=1e-15)
    perm = np.random.default_rng(len(pairs)).permutation(len(pairs))
    assert roc_auc(scores[perm], labels[perm]) == roc_auc(scores, labels)


def test_confusion_examples():
    assert confusion_metrics([1, 0, 1, 0], [1, 1, 0, 0]) == (0.5, 0.5, 0.5)
    assert confusion_metrics([1, 0], [1, 0]) == (1.0, 1.0, 1.0)
    assert confusion_metrics([0, 1], [1, 0]) == (0.0, 0.0, 0.0)
    with pytest.raises(UndefinedMetricError):
        confusion_metrics([1, 0], [0, 0])
    with pytest.raises(UndefinedMetricError):
        confusion_metrics([1, 0], [1, 1])


def test_dpd_examples():
    assert dpd([1, 0, 1, 0], [0, 0, 1, 1]) == 0.0
    assert dpd([1, 0, 1, 0, 0, 0], [0, 0, 1, 1, 1, 1]) == 0.25
    assert dpd([1, 0, 1], [0, 0, 0]) == 0.0
    with pytest.raises(ValueError):
        dpd([], [])


def test_deodds_examples():
    # group 0: TPR 1.0, FPR 0.2; group 1: TPR 0.5, FPR 0.2
    preds = [1, 1, 1, 0, 0, 0, 0] + [1, 0, 1, 0, 0, 0, 0]
    labels = [1, 1, 0, 0, 0, 0, 0] + [1, 1, 0, 0, 0, 0, 0]
    groups = [0] * 7 + [1] * 7
    assert deodds(preds, labels, groups) == pytest.approx(0.5)
    assert deodds([1, 0, 1, 0], [1, 0, 1, 0], [0, 0, 1, 1]) == 0.0
    with pytest.raises(UndefinedMetricError, match="1"):
        deodds([1, 0, 1], [1, 0, 1], [0, 0, 1])


def _brute_dpd(preds, groups):
    rates = {}
    for g in set(groups):
        members = [p for p, gg in zip(preds, groups) if gg == g]
        rates[g] = sum(members) / len(members)
    return max(abs(rates[a] - rates[b]) for a in rates for b in rates)


def _brute_deodds(preds, labels, groups):
    tpr, fpr = {}, {}
    for g in set(groups):
        tp = sum(1 for p, y, gg in zip(preds, labels, groups) if gg == g and y and p)
        fn = sum(1 for p, y, gg in zip(preds, labels, groups) if gg == g and y and not p)
        fp = sum(1 for p, y, gg in zip(preds, labels, groups) if gg == g and not y and p)
        tn = sum(1 for p, y, gg in zip(preds, labels, groups) if gg == g and not y and not p)
        if tp + fn == 0 or fp + tn == 0:
            return None
        tpr[g], fpr[g] = tp / (tp + fn), fp / (fp + tn)
    gaps = [abs(tpr[a] - tpr[b]) for a in tpr for b in tpr] + [abs(fpr[a] - fpr[b]) for a in fpr for b in fpr]
    return max(gaps)


@pytest.mark.parametrize("n", range(1, 7))
def test_exhaustive_small(n):
    for preds in itertools.product([0, 1], repeat=n):
        for labels in itertools.product([0, 1], repeat=n):
            for groups in itertools.product([0, 1], repeat=n):
                assert dpd(preds, groups) == _brute_dpd(preds, groups)
                expect = _brute_deodds(preds, labels, groups)
                if expect is None:
                    with pytest.raises(UndefinedMetricError):
                        deodds(preds, labels, groups)
                else:
                    assert deodds(preds, labels, groups) == expect


def test_es_auc_examples():
    # equal group AUCs -> ES-AUC = AUC
    scores = [0.1, 0.9, 0.2, 0.8]
    labels = [0, 1, 0, 1]
    groups = [0, 0, 1, 1]
    assert es_auc(scores, labels, groups) == roc_auc(scores, labels)
    with pytest.raises(UndefinedMetricError):
        es_auc([0.1, 0.9, 0.2], [0, 1, 1], [0, 0, 1])


def test_es_auc_formula():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = 30
        scores, labels, groups = rng.random(n), rng.integers(0, 2, n), rng.integers(0, 2, n)
        try:
            got = es_auc(scores, labels, groups)
        except UndefinedMetricError:
            continue
        overall = auc_by_pairs(scores, labels)
        devs = sum(abs(overall - auc_by_pairs(scores[groups == g], labels[groups == g])) for g in (0, 1))
        assert got == pytest.approx(overall / (1 + devs), abs=1e-12)
        assert got <= roc_auc(scores, labels)


def test_report_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    rep = metric_report(rng.random(40), np.arange(40) % 2, (np.arange(40) // 2) % 2)
    assert set(rep) == set(METRIC_NAMES)
    write_report(rep, tmp_path / "full.csv", full_precision=True)
    assert read_report(tmp_path / "full.csv") == rep
    write_report(rep, tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[1] == f"AUC,{rep['AUC']:.6f}"


def test_reorder_invariance():
    rng = np.random.default_rng(2)
    s, y, g = rng.random(50), np.arange(50) % 2, rng.integers(0, 2, 50)
    perm = rng.permutation(50)
    assert metric_report(s, y, g) == pytest.approx(metric_report(s[perm], y[perm], g[perm]), abs=1e-12)
