"""Metrics against brute-force pairwise oracles and hand-computed values."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvpt import metrics as mx


def brute_force_auroc(scores, labels):
    """O(n^2) Mann-Whitney: P(score+ > score-) + 0.5 P(tie)."""
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def test_auroc_binary_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    for trial in range(500):
        n = int(rng.integers(4, 201))
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        # quantized scores force plenty of ties
        scores = np.round(rng.random(n), int(rng.integers(1, 3)))
        got = mx.auroc_binary(scores, labels)
        want = brute_force_auroc(scores, labels)
        assert got == pytest.approx(want, abs=1e-12), trial


def test_auroc_macro_matches_brute_force_oracle():
    rng = np.random.default_rng(1)
    for trial in range(500):
        n = int(rng.integers(10, 201))
        k = int(rng.integers(2, 5))
        labels = np.concatenate([np.arange(k), rng.integers(0, k, n - k)])
        probs = np.round(rng.random((n, k)), 2)
        got = mx.auroc_macro_ovr(probs, labels, k)
        want = np.mean([brute_force_auroc(probs[:, c], (labels == c).astype(int))
                        for c in range(k)])
        assert got == pytest.approx(want, abs=1e-12), trial


def test_auroc_perfect_and_inverted():
    assert mx.auroc_binary([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert mx.auroc_binary([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0


def test_auroc_all_tied_is_half():
    assert mx.auroc_binary([0.5] * 6, [0, 1, 0, 1, 0, 1]) == 0.5


def test_auroc_requires_both_classes():
    with pytest.raises(mx.MetricError):
        mx.auroc_binary([0.1, 0.2], [1, 1])


def test_auroc_macro_requires_all_classes():
    with pytest.raises(mx.MetricError):
        mx.auroc_macro_ovr(np.eye(3), np.array([0, 1, 1]), 3)


def test_macro_prf_known_confusion():
    # confusion [[2,1],[1,2]]: both classes P=R=F1=2/3
    preds = np.array([0, 0, 1, 1, 1, 0])
    labels = np.array([0, 0, 0, 1, 1, 1])
    p, r, f = mx.macro_prf(preds, labels, 2)
    assert p == pytest.approx(2 / 3)
    assert r == pytest.approx(2 / 3)
    assert f == pytest.approx(2 / 3)


def test_macro_prf_absent_prediction_counts_zero():
    # class 1 never predicted: precision 0/0 := 0
    preds = np.array([0, 0, 0])
    labels = np.array([0, 1, 0])
    p, r, f = mx.macro_prf(preds, labels, 2)
    assert p == pytest.approx((2 / 3) / 2)
    assert r == pytest.approx(0.5)


def test_eval_report_keys_and_binary_path():
    rng = np.random.default_rng(2)
    probs = rng.random((30, 2))
    probs /= probs.sum(axis=1, keepdims=True)
    labels = rng.integers(0, 2, 30)
    labels[:2] = [0, 1]
    rep = mx.eval_report(probs, labels, 2)
    assert set(rep) == set(mx.REPORT_KEYS)
    assert rep["auroc"] == pytest.approx(
        mx.auroc_binary(probs[:, 1], (labels == 1).astype(int)))


def test_aggregate_folds_mean_and_std():
    r1 = {k: 0.8 for k in mx.REPORT_KEYS}
    r2 = {k: 0.9 for k in mx.REPORT_KEYS}
    agg = mx.aggregate_folds([r1, r2])
    assert agg["auroc"] == pytest.approx(0.85)
    assert agg["auroc_std"] == pytest.approx(np.std([0.8, 0.9], ddof=1))
    assert agg["auroc_std"] == pytest.approx(0.0707106781, abs=1e-9)


def test_aggregate_folds_needs_two():
    with pytest.raises(mx.MetricError):
        mx.aggregate_folds([{k: 1.0 for k in mx.REPORT_KEYS}])


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=40, deadline=None)
def test_auroc_complement_symmetry(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 60))
    labels = rng.integers(0, 2, n)
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    scores = rng.random(n)
    a = mx.auroc_binary(scores, labels)
    b = mx.auroc_binary(-scores, labels)
    assert a + b == pytest.approx(1.0)


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=40, deadline=None)
def test_auroc_monotone_transform_invariance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 60))
    labels = rng.integers(0, 2, n)
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    scores = rng.random(n)
    assert mx.auroc_binary(scores, labels) == pytest.approx(
        mx.auroc_binary(np.exp(3 * scores), labels))
