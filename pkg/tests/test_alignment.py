import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kd3lab.alignment import alignment_weight, wfa_loss
from kd3lab.numerics import Rng
from kd3lab.trainer import gradient_check, numeric_grad, rel_error


def test_weight_examples():
    assert alignment_weight([0.3, 0.7], [0.3, 0.7]) == 0.5
    with mpmath.workdps(40):
        o2 = float(1 - 1 / (1 + mpmath.exp(-2)))
        o1 = float(1 - 1 / (1 + mpmath.exp(-1)))
    for ref in (0.11920292202211757, o2):
        assert abs(alignment_weight([1.0, 0.0], [0.0, 1.0]) - ref) < 2e-16
    for ref in (0.2689414213699951, o1):
        assert abs(alignment_weight([1.0, 0.0], [0.5, 0.5]) - ref) < 2e-16
    with pytest.raises(ValueError):
        alignment_weight([1.0], [0.5, 0.5])


def _probs(k):
    return arrays(np.float64, k, elements=st.floats(0.001, 1)).map(lambda v: v / v.sum())


@given(_probs(4), _probs(4))
def test_weight_range(p, q):
    w = alignment_weight(p, q)
    assert 1 - 1 / (1 + np.exp(-2.0)) - 1e-12 <= w <= 0.5


def test_weight_strictly_decreasing_in_gap():
    gaps = np.linspace(0, 1, 11)
    ws = [alignment_weight([1 - g / 2, g / 2], [1.0, 0.0]) for g in gaps]
    assert all(b < a for a, b in zip(ws, ws[1:]))


def test_wfa_examples():
    h = Rng(1).normal(size=(3, 4))
    loss, grad = wfa_loss(h, h.copy(), np.full(3, 0.5))
    assert loss == 0.0 and not grad.any()
    loss, _ = wfa_loss(np.array([[1.0, 0.0]]), np.zeros((1, 2)), np.array([0.5]))
    assert loss == 0.25
    loss, grad = wfa_loss(np.zeros((0, 4)), np.zeros((0, 4)), np.zeros(0))
    assert loss == 0.0 and grad.shape == (0, 4)


def test_wfa_gradient_finite_differences():
    r = Rng(2)
    hs, ht, w = r.normal(size=(4, 5)), r.normal(size=(4, 5)), r.uniform(0.1, 0.5, size=4)
    _, g = wfa_loss(hs, ht, w)
    num = numeric_grad(lambda: wfa_loss(hs, ht, w)[0], hs)
    assert rel_error(g, num) < 1e-6
    assert gradient_check("wfa", Rng(3)) < 1e-4


@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)), arrays(np.float64, (3, 4), elements=st.floats(-5, 5)))
def test_wfa_nonnegative(a, b):
    assert wfa_loss(a, b, np.full(3, 0.3))[0] >= 0


def test_smaller_prediction_gap_contributes_more():
    hs = np.array([[1.0, 2.0], [1.0, 2.0]])
    ht = np.zeros((2, 2))
    w = alignment_weight(np.array([[0.9, 0.1], [0.9, 0.1]]), np.array([[0.8, 0.2], [0.2, 0.8]]))
    per = w * np.mean((hs - ht) ** 2, axis=1)
    assert per[0] > per[1]
