import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from arcnet.loss_metrics import (EvalReport, MarginConfig, classification_report,
                                 confusion_matrix, margin_loss, report_from_confusion,
                                 weighted_f1)
from arcnet.numerics import Tensor, grad_check
from oracles import margin_terms, metrics_script


def T64(x):
    return Tensor(x, dtype=np.float64)


# --- margin loss ------------------------------------------------------------

def test_margin_loss_zero_at_margins():
    norms = np.full((3, 4), 0.05)
    labels = [0, 2, 3]
    norms[np.arange(3), labels] = 0.95
    assert float(margin_loss(T64(norms), labels).data) == pytest.approx(0, abs=1e-15)


def test_margin_loss_all_zero_norms():
    assert float(margin_loss(T64(np.zeros((1, 5))), [2]).data) == pytest.approx(0.9025, abs=1e-12)


def test_margin_loss_matches_term_oracle(rng):
    for _ in range(50):
        B, C = rng.integers(1, 9), rng.integers(2, 13)
        norms, labels = rng.uniform(0, 1, (B, C)), rng.integers(0, C, B)
        got = float(margin_loss(T64(norms), labels).data)
        assert abs(got - margin_terms(norms, labels)) < 1e-6


def test_margin_loss_custom_config(rng):
    cfg = MarginConfig(0.9, 0.1, 0.25)
    norms, labels = rng.uniform(0, 1, (4, 3)), [0, 1, 2, 1]
    got = float(margin_loss(T64(norms), labels, cfg).data)
    assert abs(got - margin_terms(norms, labels, 0.9, 0.1, 0.25)) < 1e-12


def test_margin_loss_label_out_of_range():
    with pytest.raises(IndexError):
        margin_loss(T64(np.zeros((2, 3))), [0, 3])


def test_margin_config_validated():
    with pytest.raises(ValueError):
        MarginConfig(m_plus=0.05, m_minus=0.95)


def test_margin_loss_gradient(rng):
    norms = rng.uniform(0.1, 0.9, (4, 5))
    labels = rng.integers(0, 5, 4)
    report = grad_check(lambda n: margin_loss(n, labels), [norms], tol=1e-6, step=1e-5)
    assert report.passed, report.errors


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(0, 0.999)), st.lists(st.integers(0, 3), min_size=3, max_size=3))
def test_margin_loss_nonneg_and_zero_iff(norms, labels):
    loss = float(margin_loss(T64(norms), labels).data)
    assert loss >= 0
    T = np.zeros((3, 4), bool)
    T[np.arange(3), labels] = True
    satisfied = np.all(norms[T] >= 0.95) and np.all(norms[~T] <= 0.05)
    assert (loss == 0) == satisfied


# --- metrics ----------------------------------------------------------------

def test_wf1_hand_fixture():
    assert weighted_f1(np.array([[5, 0], [5, 0]])) == pytest.approx(1 / 3, abs=1e-12)


def test_wf1_perfect():
    assert weighted_f1(np.diag([3, 1, 7])) == 1.0


def test_wf1_equal_support_is_macro(rng):
    cm = rng.integers(0, 10, (4, 4))
    cm[:, 0] += 20 - cm.sum(axis=1)            # every row sums to 20
    tp = np.diag(cm).astype(float)
    p, r = tp / cm.sum(axis=0), tp / 20
    macro = np.mean(np.where(p + r > 0, 2 * p * r / np.where(p + r > 0, p + r, 1), 0))
    assert weighted_f1(cm) == pytest.approx(macro, abs=1e-12)


def test_wf1_empty_is_error():
    with pytest.raises(ValueError):
        weighted_f1(np.zeros((3, 3), int))


def test_report_all_correct():
    rep = classification_report([0, 1, 2, 2], [0, 1, 2, 2], 3)
    np.testing.assert_array_equal(rep.confusion, np.diag([1, 1, 2]))
    assert rep.accuracy == rep.wf1 == rep.precision == rep.recall == 1.0


def test_report_single_miss():
    cm = confusion_matrix([5], [2], 6)
    assert cm[2, 5] == 1 and cm.sum() == 1


def test_report_index_error():
    with pytest.raises(IndexError):
        classification_report([0, 4], [0, 1], 3)


def test_metrics_oracle_1000_cases():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        C = int(rng.integers(2, 13))
        N = int(rng.integers(1, 200))
        true = rng.integers(0, C, N)
        # mix of accurate and random predictions so every regime appears
        pred = np.where(rng.random(N) < rng.random(), true, rng.integers(0, C, N))
        rep = classification_report(pred, true, C)
        cm, acc, wp, wr, wf = metrics_script(pred.tolist(), true.tolist(), C)
        np.testing.assert_array_equal(rep.confusion, cm)
        worst = max(worst, abs(rep.accuracy - acc), abs(rep.precision - wp),
                    abs(rep.recall - wr), abs(rep.wf1 - wf))
    assert worst < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 8).flatmap(lambda C: st.tuples(
    st.just(C), st.lists(st.tuples(st.integers(0, C - 1), st.integers(0, C - 1)), min_size=1, max_size=60))))
def test_metric_invariants(case):
    C, pairs = case
    pred, true = zip(*pairs)
    rep = classification_report(pred, true, C)
    assert rep.n == len(pairs)
    np.testing.assert_array_equal(rep.confusion.sum(axis=1), np.bincount(true, minlength=C))
    for v in rep.metrics().values():
        assert 0 <= v <= 1
    if np.count_nonzero(rep.confusion - np.diag(np.diag(rep.confusion))) == 0:
        assert rep.accuracy == rep.wf1 == 1.0


def test_report_csv_round_trip():
    rep = report_from_confusion(np.array([[4, 1, 0], [2, 2, 1], [0, 0, 3]]), ("sit", "stand", "walk"))
    text = rep.to_csv()
    lines = text.splitlines()
    assert lines[0] == "sit,stand,walk"
    assert lines[1] == "4,1,0"
    assert lines[4].startswith("accuracy,")
    back = EvalReport.from_csv(text)
    np.testing.assert_array_equal(back.confusion, rep.confusion)
    assert back.metrics() == rep.metrics()
    assert back.class_names == rep.class_names
