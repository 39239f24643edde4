import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from deferral.core import (
    MISSING,
    DeferralDataset,
    Example,
    InvalidInputError,
    ScoreVector,
    argmax_tiebreak,
    softmax_stable,
)

finite_vectors = arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50))


def reference_softmax(values):
    exps = [math.exp(v) for v in values]
    total = math.fsum(exps)
    return [e / total for e in exps]


def test_softmax_uniform():
    np.testing.assert_allclose(softmax_stable([0.0, 0.0, 0.0]), [1 / 3] * 3, atol=1e-15)


def test_softmax_large_scores_do_not_overflow():
    p = softmax_stable([1000.0, 0.0])
    assert np.all(np.isfinite(p))
    assert p[0] == pytest.approx(1.0)
    assert p[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_known_values():
    np.testing.assert_allclose(softmax_stable([1.0, 0.0, -1.0]), [0.66524, 0.24473, 0.09003], atol=1e-5)
    np.testing.assert_allclose(softmax_stable([1.0, 0.0, -1.0]), reference_softmax([1, 0, -1]), atol=1e-15)


def test_softmax_extreme_magnitudes():
    p = softmax_stable([1e6, -1e6, 0.0])
    np.testing.assert_allclose(p, [1.0, 0.0, 0.0])


@pytest.mark.parametrize("bad", [[np.nan, 0.0], [np.inf, 1.0], []])
def test_softmax_rejects_bad_input(bad):
    with pytest.raises(InvalidInputError):
        softmax_stable(bad)


@given(finite_vectors, st.floats(-1e3, 1e3))
def test_softmax_shift_invariance(s, c):
    np.testing.assert_allclose(softmax_stable(s + c), softmax_stable(s), atol=1e-12)


@given(finite_vectors)
def test_softmax_sums_to_one(s):
    assert abs(softmax_stable(s).sum() - 1.0) <= 1e-12


@given(finite_vectors)
def test_argmax_preserved_by_softmax(s):
    p = softmax_stable(s)
    # exp can merge nearly-equal scores into an exact tie; the tie rule then
    # picks the lowest of the tied indices, which is still a maximiser of s
    i = argmax_tiebreak(p)
    assert s[i] >= s.max() - 1e-9 * max(1.0, abs(s.max()))
    if np.unique(p).size == p.size:
        assert i == argmax_tiebreak(s)


@pytest.mark.parametrize("scores, idx", [((0.1, 0.9, 0.3), 1), ((0.5, 0.5), 0), ((-1, -1, -0.5), 2)])
def test_argmax_tiebreak(scores, idx):
    assert argmax_tiebreak(scores) == idx


def test_argmax_empty():
    with pytest.raises(InvalidInputError):
        argmax_tiebreak([])


def test_score_vector_layout():
    g = ScoreVector([1.0, 2.0, 3.0])
    assert g.K == 2
    np.testing.assert_array_equal(g.class_scores, [1.0, 2.0])
    assert g.defer_score == 3.0
    np.testing.assert_array_equal(np.asarray(g), [1.0, 2.0, 3.0])


@pytest.mark.parametrize("bad", [[1.0], [np.nan, 0.0]])
def test_score_vector_invariants(bad):
    with pytest.raises(InvalidInputError):
        ScoreVector(bad)


class TestDeferralDataset:
    def test_examples_round_trip(self):
        ex = [Example(np.array([0.0, 1.0]), 1, 0, 1), Example(np.array([2.0, 3.0]), 0, None, 0)]
        data = DeferralDataset.from_examples(ex, K=2)
        assert len(data) == 2 and data.d == 2
        assert data.m.tolist() == [0, MISSING]
        back = list(data.examples())
        assert back[1].m is None and back[0].a == 1

    def test_labels_validated(self):
        with pytest.raises(InvalidInputError):
            DeferralDataset(x=np.zeros((2, 1)), y=[0, 3], K=2)
        with pytest.raises(InvalidInputError):
            DeferralDataset(x=np.zeros((2, 1)), y=[0, 1], K=2, m=[0, 2])

    def test_masked_label_not_validated(self):
        data = DeferralDataset(x=np.zeros((2, 1)), y=[0, 99], K=2, mask=[True, False])
        assert len(data.labeled()) == 1

    def test_empty_rejected(self):
        with pytest.raises(InvalidInputError):
            DeferralDataset(x=np.zeros((0, 2)), y=[], K=2)

    def test_inconsistent_lengths(self):
        with pytest.raises(InvalidInputError):
            DeferralDataset(x=np.zeros((3, 2)), y=[0, 1], K=2)
        with pytest.raises(InvalidInputError):
            DeferralDataset(x=np.zeros((2, 2)), y=[0, 1], K=2, a=[1])

    def test_mixed_group_bits_rejected(self):
        ex = [Example(np.zeros(1), 0, a=1), Example(np.zeros(1), 0)]
        with pytest.raises(InvalidInputError):
            DeferralDataset.from_examples(ex, K=2)

    def test_agree_and_with_expert(self):
        data = DeferralDataset(x=np.zeros((3, 1)), y=[0, 1, 1], K=2)
        with pytest.raises(InvalidInputError):
            data.agree
        d2 = data.with_expert([0, 0, 1])
        assert d2.agree.tolist() == [1.0, 0.0, 1.0]
        assert data.m is None

    def test_subset_and_equals(self):
        data = DeferralDataset(x=np.arange(6.0).reshape(3, 2), y=[0, 1, 0], K=2, a=[0, 1, 1])
        sub = data.subset([2, 0])
        assert sub.y.tolist() == [0, 0] and sub.a.tolist() == [1, 0]
        assert data.equals(data.subset(np.arange(3)))
        assert not data.equals(sub)
