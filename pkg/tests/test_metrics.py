import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from signprior.errors import ContractError, UndefinedMetricError
from signprior.metrics import (
    STAGE1_METRICS,
    STAGE2_METRICS,
    EvalBatch,
    auroc_binary,
    auroc_macro,
    build_report,
    cohens_kappa,
    format_table,
    precision_recall_f1,
    subset_accuracy,
)

from oracles import auroc_pairs, kappa_matrix, prf_counts, subset_acc


def test_auroc_perfect_separation():
    assert auroc_binary([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0


def test_auroc_all_ties_is_half():
    assert auroc_binary([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_auroc_hand_example():
    # pairs (pos, neg): (0.35,0.1)+ (0.35,0.4)- (0.8,0.1)+ (0.8,0.4)+ -> 3/4
    assert auroc_binary([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75, abs=1e-12)
    assert auroc_pairs([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auroc_single_class_is_undefined():
    with pytest.raises(UndefinedMetricError):
        auroc_binary([0.1, 0.2], [1, 1])


def test_auroc_macro_mean_and_exclusion():
    scores = np.array([[0.9, 0.5], [0.8, 0.5], [0.1, 0.5], [0.2, 0.5]])
    truth = np.array([[1, 1], [1, 0], [0, 1], [0, 0]])
    assert auroc_macro(scores, truth) == pytest.approx(0.75)
    truth_undef = np.array([[1, 0], [1, 0], [0, 0], [0, 0]])
    assert auroc_macro(scores, truth_undef) == 1.0
    with pytest.raises(UndefinedMetricError):
        auroc_macro(scores, np.zeros((4, 2)))


def test_auroc_macro_random_null():
    rng = np.random.default_rng(7)
    n = 10_000
    scores = rng.random((n, 3))
    truth = rng.integers(0, 3, n)
    assert auroc_macro(scores, truth) == pytest.approx(0.5, abs=0.03)


def test_prf_perfect_and_null():
    t = np.array([[1, 0, 1], [0, 1, 0], [1, 1, 0]])
    assert precision_recall_f1(t, t) == (1.0, 1.0, 1.0)
    _, r, _ = precision_recall_f1(np.zeros_like(t), t)
    assert r == 0.0


def test_prf_confusion_counts():
    # one label, TP=2, FP=1, FN=1
    pred = np.array([[1], [1], [1], [0]])
    truth = np.array([[1], [1], [0], [1]])
    p, r, f = precision_recall_f1(pred, truth)
    assert (p, r, f) == pytest.approx((2 / 3, 2 / 3, 2 / 3))


def test_subset_accuracy_counting():
    t = np.array([[1, 0], [0, 1], [1, 1], [0, 0]])
    p = t.copy()
    assert subset_accuracy(p, t) == 1.0
    p[2, 0] = 0
    assert subset_accuracy(p, t) == 0.75


def test_subset_accuracy_random_null():
    rng = np.random.default_rng(3)
    n = 10_000
    truth = rng.integers(0, 2, (n, 5))
    pred = rng.integers(0, 2, (n, 5))
    assert subset_accuracy(pred, truth) == pytest.approx(1 / 32, abs=0.01)


def test_kappa_examples():
    assert cohens_kappa([0, 1, 2, 1], [0, 1, 2, 1]) == 1.0
    assert cohens_kappa(["A", "B", "A", "B"], ["A", "A", "B", "B"]) == pytest.approx(0.0)
    assert cohens_kappa(["A", "A", "B", "B"], ["A", "A", "A", "B"]) == pytest.approx(0.5)
    assert cohens_kappa([1, 1, 1], [1, 1, 1]) == 1.0  # p_e = 1 but perfect agreement


def _random_batches(seed, count=200):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        n = int(rng.integers(4, 51))
        yield rng, n


def test_oracle_equivalence_randomized():
    for rng, n in _random_batches(11):
        L = int(rng.integers(2, 6))
        scores = np.round(rng.random((n, L)), int(rng.integers(1, 4)))  # coarse rounding forces ties
        truth = rng.integers(0, 2, (n, L))
        pred = rng.integers(0, 2, (n, L))
        for k in range(L):
            if 0 < truth[:, k].sum() < n:
                assert abs(auroc_binary(scores[:, k], truth[:, k]) - auroc_pairs(scores[:, k], truth[:, k])) < 1e-9
        sets_p = [set(np.flatnonzero(r)) for r in pred]
        sets_t = [set(np.flatnonzero(r)) for r in truth]
        assert np.allclose(precision_recall_f1(pred, truth), prf_counts(sets_p, sets_t, L), atol=1e-9, rtol=0)
        assert abs(subset_accuracy(pred, truth) - subset_acc(sets_p, sets_t)) < 1e-9
        cp, ct = rng.integers(0, 3, n), rng.integers(0, 3, n)
        assert abs(cohens_kappa(cp, ct) - kappa_matrix(list(cp), list(ct))) < 1e-9


@settings(max_examples=60, deadline=None)
# scores on a 1/16 grid so that exp() keeps them strictly ordered in float64
@given(st.lists(st.tuples(st.integers(-80, 80).map(lambda i: i / 16), st.booleans()), min_size=2, max_size=40))
def test_auroc_invariant_under_increasing_transform(rows):
    s = np.array([r[0] for r in rows])
    y = np.array([r[1] for r in rows])
    if y.all() or not y.any():
        return
    assert auroc_binary(s, y) == pytest.approx(auroc_binary(np.exp(s) * 3 + 1, y), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=40))
def test_kappa_symmetric_and_in_range(rows):
    a = [r[0] for r in rows]
    b = [r[1] for r in rows]
    k = cohens_kappa(a, b)
    assert k == pytest.approx(cohens_kappa(b, a), abs=1e-12)
    assert -1.0 - 1e-12 <= k <= 1.0 + 1e-12


def test_metric_ranges_on_fuzz():
    for rng, n in _random_batches(5, 50):
        scores = rng.normal(size=(n, 3))
        truth = np.r_[[0, 1, 2], rng.integers(0, 3, n - 3)]
        rep = build_report(2, EvalBatch([f"s{i}" for i in range(n)], scores, truth))
        for k in ("AUROC", "Precision", "Recall", "F1"):
            assert 0.0 <= rep.metrics[k] <= 1.0
        assert -1.0 <= rep.metrics["Kappa"] <= 1.0


def test_report_keys_by_stage():
    rng = np.random.default_rng(0)
    b2 = EvalBatch(["a", "b", "c", "d"], rng.normal(size=(4, 3)), [0, 1, 2, 1])
    assert tuple(build_report(2, b2).metrics) == STAGE2_METRICS
    b1 = EvalBatch(["a", "b", "c", "d"], rng.random((4, 5)), rng.integers(0, 2, (4, 5)))
    rep1 = build_report(1, b1)
    assert tuple(rep1.metrics) == STAGE1_METRICS
    assert "per_flag_accuracy" in rep1.extra
    with pytest.raises(ContractError):
        build_report(2, EvalBatch([], np.zeros((0, 3)), np.zeros(0)))


def test_report_serialization_and_undefined_markers():
    b = EvalBatch(["a", "b", "c"], [[0.9, 0.1], [0.2, 0.3], [0.7, 0.8]], [[1, 0], [0, 0], [1, 0]])
    rep = build_report(1, b, ["x", "y"])
    assert rep.undefined == ["y"]
    assert "y" in rep.zero_division
    d = json.loads(rep.to_json())
    assert d["per_label"]["y"]["AUROC"] is None
    assert "AUROC" in rep.to_text()


def test_duplicate_ids_rejected():
    with pytest.raises(ContractError):
        EvalBatch(["a", "a"], np.zeros((2, 3)), [0, 1])


def test_format_table_alignment():
    txt = format_table([("model-a", {"AUROC": 0.5, "Precision": 0.25, "Recall": 1.0, "F1": None, "Kappa": 0.1}),
                        ("scratch-arm", {"AUROC": 0.4})])
    lines = txt.splitlines()
    assert len({len(lines[0]), len(lines[2]), len(lines[3])}) == 1
    assert "n/a" in txt
