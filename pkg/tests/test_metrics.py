import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ggnn_iml.metrics import EvalReport, EvalRow, evaluate, image_f1, mean_pixel_f1, pixel_f1, roc_auc


def confusion_f1(pred, truth):
    """Oracle: explicit loop over a confusion matrix."""
    tp = fp = fn = 0
    for p, t in zip(np.ravel(pred), np.ravel(truth)):
        if p and t:
            tp += 1
        elif p and not t:
            fp += 1
        elif t and not p:
            fn += 1
    if tp == 0 and fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


# --- pixel F1 ----------------------------------------------------------------------------

def test_pixel_f1_perfect_and_hand_case():
    g = np.array([[1, 0], [0, 1]])
    assert pixel_f1(g.astype(float), g) == 1.0
    assert pixel_f1(np.array([[0.7, 0.2], [0.6, 0.4]]), g) == 0.5


def test_pixel_f1_threshold_is_closed():
    assert pixel_f1(np.array([[0.5, 0.0]]), np.array([[1, 0]])) == 1.0


def test_pixel_f1_authentic_excluded():
    assert pixel_f1(np.zeros((3, 3)), np.zeros((3, 3))) is None
    probs = [np.ones((2, 2)), np.zeros((2, 2))]
    gts = [np.array([[1, 0], [0, 0]]), np.zeros((2, 2))]
    assert mean_pixel_f1(probs, gts) == pytest.approx(0.4)
    assert mean_pixel_f1([np.zeros((2, 2))], [np.zeros((2, 2))]) is None


def test_pixel_f1_shape_mismatch():
    with pytest.raises(ValueError):
        pixel_f1(np.zeros((2, 2)), np.zeros((2, 3)))


def test_pixel_f1_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(500):
        h, w = rng.integers(1, 12, 2)
        g = rng.random((h, w)) < rng.uniform(0.05, 0.9)
        if not g.any():
            g[0, 0] = True
        p = rng.random((h, w))
        assert abs(pixel_f1(p, g) - confusion_f1(p >= 0.5, g)) <= 1e-12


# --- image F1 ----------------------------------------------------------------------------

def test_image_f1_hand_cases():
    assert image_f1([0.9, 0.1, 0.9, 0.1], [1, 0, 1, 0]) == 1.0
    assert image_f1([0.6, 0.6], [1, 0]) == pytest.approx(2 / 3, abs=1e-15)
    assert image_f1([0.1, 0.2, 0.4], [0, 0, 0]) == 1.0
    assert image_f1([0.9, 0.2], [0, 0]) == 0.0


def test_image_f1_errors():
    with pytest.raises(ValueError):
        image_f1([0.5, 0.5], [1])
    with pytest.raises(ValueError):
        image_f1([], [])


def test_image_f1_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(500):
        n = int(rng.integers(1, 40))
        s, y = rng.random(n), rng.integers(0, 2, n)
        assert abs(image_f1(s, y) - confusion_f1(s >= 0.5, y)) <= 1e-12


# --- AUC ---------------------------------------------------------------------------------

def test_auc_hand_cases():
    assert roc_auc([0.1, 0.9], [0, 1]) == 1.0
    assert roc_auc([0.8, 0.6, 0.4], [1, 0, 1]) == 0.5
    assert roc_auc([0.3] * 5, [0, 1, 0, 1, 1]) == 0.5


def test_auc_single_class_is_undefined():
    assert roc_auc([0.2, 0.9], [1, 1]) is None
    assert roc_auc([0.2, 0.9], [0, 0]) is None


def test_auc_matches_pairwise_enumeration():
    rng = np.random.default_rng(2)
    for _ in range(500):
        n = int(rng.integers(2, 40))
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        s = np.round(rng.random(n), int(rng.integers(1, 4)))  # coarse rounding creates ties
        assert abs(roc_auc(s, y) - pairwise_auc(s, y)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 50), st.integers(0, 2**32 - 1))
def test_auc_label_flip_complements(n, seed):
    rng = np.random.default_rng(seed)
    s = rng.permutation(n) / n  # tie-free
    y = rng.integers(0, 2, n)
    y[0], y[-1] = 0, 1
    assert roc_auc(s, y) + roc_auc(s, 1 - y) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 50), st.integers(0, 2**32 - 1))
def test_auc_monotone_invariance(n, seed):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=n)
    y = rng.integers(0, 2, n)
    y[0], y[-1] = 0, 1
    base = roc_auc(s, y)
    assert roc_auc(np.exp(3 * s), y) == base
    assert roc_auc(np.arctan(s) * 7 - 2, y) == base


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 30), st.integers(0, 2**32 - 1))
def test_f1_unchanged_by_moves_within_threshold_side(n, seed):
    rng = np.random.default_rng(seed)
    s = rng.random(n)
    y = rng.integers(0, 2, n)
    above = s >= 0.5
    moved = np.where(above, rng.uniform(0.5, 1.0, n), rng.uniform(0.0, 0.4999, n))
    assert image_f1(moved, y) == image_f1(s, y)
    g = y.reshape(1, n)
    if g.any():
        assert pixel_f1(moved.reshape(1, n), g) == pixel_f1(s.reshape(1, n), g)


# --- report --------------------------------------------------------------------------------

def make_report():
    probs = [np.array([[0.9, 0.1]]), np.array([[0.2, 0.2]]), np.array([[0.7, 0.7]])]
    gts = [np.array([[1, 0]]), np.array([[0, 0]]), np.array([[1, 0]])]
    return evaluate(probs, gts, [0.8, 0.3, 0.4], [1, 0, 1], ids=["a", "b", "c"])


def test_report_rows_and_aggregates():
    rep = make_report()
    assert [r.id for r in rep.rows] == ["a", "b", "c"]
    assert rep.rows[1].pixel_f1 is None
    assert rep.pixel_f1 == pytest.approx((1.0 + 2 / 3) / 2)
    assert [r.predicted_label for r in rep.rows] == [1, 0, 0]
    assert rep.image_f1 == pytest.approx(2 / 3)
    assert rep.image_auc == 1.0  # both fakes (0.8, 0.4) outscore the authentic 0.3


def test_report_json_keys_and_roundtrip():
    rep = make_report()
    d = json.loads(rep.to_json())
    assert set(d) == {"pixel_f1", "image_f1", "image_auc", "rows"}
    assert set(d["rows"][0]) == {"id", "pixel_f1", "predicted_label", "score", "label"}
    back = EvalReport.from_json(rep.to_json())
    assert back == rep


def test_report_reaggregates_from_rows():
    rep = make_report()
    again = EvalReport.from_rows([EvalRow(**r) for r in json.loads(rep.to_json())["rows"]])
    assert (again.pixel_f1, again.image_f1, again.image_auc) == (rep.pixel_f1, rep.image_f1, rep.image_auc)
