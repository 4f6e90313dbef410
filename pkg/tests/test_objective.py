import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from epic import tensor as T
from epic.gradcheck import grad_check
from epic.objective import (ClassTextBank, cosine_matrix, loss_multi, loss_uni, metrics, predict,
                            predict_from_sims)
from epic.tensor import Tensor

SEEDS = st.integers(0, 2**32 - 1)
E = math.e


def probs_of(p):
    return Tensor(np.atleast_2d(np.asarray(p, dtype=float)))


# ------------------------------------------------------------ classifier


def test_two_class_closed_form():
    p = predict_from_sims(Tensor([[1.0, 0.0]]), tau=1.0).probs.data[0]
    np.testing.assert_allclose(p, [E / (E + 1), 1 / (E + 1)], atol=1e-12)


def test_equal_similarities_are_uniform():
    p = predict_from_sims(Tensor(np.full((2, 5), 0.3)), tau=0.07).probs.data
    np.testing.assert_allclose(p, 0.2, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(SEEDS)
def test_probabilities_normalised_and_order_preserving(seed):
    rng = np.random.default_rng(seed)
    x, h = rng.normal(size=(4, 16)), rng.normal(size=(6, 16))
    sims = cosine_matrix(Tensor(x), h).data
    ref = None
    for tau in (0.01, 0.07, 1.0, 10.0):
        p = predict(Tensor(x), h, tau).probs.data
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-10)
        assert np.array_equal(p.argmax(axis=1), sims.argmax(axis=1))
        for row_p, row_s in zip(p, sims):
            assert np.array_equal(np.argsort(row_p, kind="stable"), np.argsort(row_s, kind="stable"))
        if ref is not None:
            assert np.all(p.max(axis=1) <= ref + 1e-15)  # larger tau flattens
        ref = p.max(axis=1)


def test_cosine_matrix_reference(rng):
    x, h = rng.normal(size=(3, 8)), rng.normal(size=(4, 8))
    ref = (x / np.linalg.norm(x, axis=1, keepdims=True)) @ (
        h / np.linalg.norm(h, axis=1, keepdims=True)).T
    np.testing.assert_allclose(cosine_matrix(Tensor(x), h).data, ref, atol=1e-12)


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_nonpositive_temperature_rejected(tau):
    with pytest.raises(ValueError, match="temperature"):
        predict_from_sims(Tensor([[1.0, 0.0]]), tau)


def test_class_bank_from_frozen_text_branch(backbone, rng):
    bank = ClassTextBank.random(backbone, 4, rng)
    assert bank.embeddings.shape == (4, 32) and bank.n_classes == 4
    again = ClassTextBank.build(backbone, bank.tokens)
    assert np.array_equal(bank.embeddings, again.embeddings)
    with pytest.raises(ValueError, match="K >= 2"):
        ClassTextBank.build(backbone, bank.tokens[:1])


# ---------------------------------------------------------------- losses


def test_uni_loss_examples():
    assert loss_uni(probs_of([[0.0, 1.0, 0.0]]), [1]).item() == pytest.approx(0.0, abs=1e-11)
    assert loss_uni(probs_of(np.full((1, 4), 0.25)), [2]).item() == pytest.approx(math.log(4),
                                                                                 abs=1e-12)


def test_uni_literal_worked_example():
    value = loss_uni(probs_of([[0.5, 0.5]]), [0], literal=True).item()
    assert value == pytest.approx(math.log(2), abs=1e-12)


def test_uni_literal_hand_substitution():
    p = np.array([[0.7, 0.2, 0.1], [0.1, 0.3, 0.6]])
    y = np.array([[1, 0, 0], [0, 1, 0]])
    terms = -(y * np.log(p) + (1 - y) * np.log(1 - p))
    hand = terms.sum() / terms.size
    assert loss_uni(probs_of(p), [0, 1], literal=True).item() == pytest.approx(hand, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(SEEDS)
def test_two_class_literal_equals_default(seed):
    # with p1 = 1 - p0 both indicator terms equal -log p[label], and the literal
    # form averages those two terms, so it lands exactly on the default value
    rng = np.random.default_rng(seed)
    p0 = rng.uniform(0.01, 0.99, size=6)
    p = np.stack([p0, 1 - p0], axis=1)
    y = rng.integers(0, 2, size=6)
    default = loss_uni(probs_of(p), y).item()
    literal = loss_uni(probs_of(p), y, literal=True).item()
    assert literal == pytest.approx(default, abs=1e-12)
    summed_over_classes = 2 * literal
    assert summed_over_classes == pytest.approx(2 * default, abs=1e-12)


def test_multi_loss_examples():
    y = np.array([[1, 0, 1, 0]])
    assert loss_multi(probs_of(y), y).item() == pytest.approx(0.0, abs=1e-11)
    literal = loss_multi(probs_of([[0.5, 0.5, 0.9]]), [[1, 1, 0]], literal=True).item()
    assert literal == pytest.approx(2 * math.log(2), abs=1e-12)
    rng = np.random.default_rng(0)
    for _ in range(5):
        p = rng.uniform(0.01, 0.99, size=(1, 3))
        assert loss_multi(probs_of(p), [[0, 0, 0]], literal=True).item() == 0.0


def test_multi_default_is_mean_bce():
    p = np.array([[0.9, 0.2, 0.6], [0.3, 0.8, 0.5]])
    y = np.array([[1, 0, 1], [0, 0, 1]])
    hand = -(y * np.log(p) + (1 - y) * np.log(1 - p)).mean()
    assert loss_multi(probs_of(p), y).item() == pytest.approx(hand, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(SEEDS)
def test_losses_nonnegative(seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(4), size=5)
    y = rng.integers(0, 4, size=5)
    yb = rng.integers(0, 2, size=(5, 4))
    for literal in (False, True):
        assert loss_uni(probs_of(p), y, literal).item() >= 0
        assert loss_multi(probs_of(p), yb, literal).item() >= 0


def test_clamping_keeps_losses_finite():
    assert np.isfinite(loss_uni(probs_of([[1.0, 0.0]]), [1]).item())
    assert np.isfinite(loss_multi(probs_of([[1.0, 0.0]]), [[0, 1]]).item())


@pytest.mark.parametrize("literal", [False, True])
def test_gradient_through_predict_and_loss(literal, rng):
    x = Tensor.param(rng.normal(size=(3, 8)))
    h = rng.normal(size=(4, 8))
    y = np.array([0, 3, 1])
    yb = rng.integers(0, 2, size=(3, 4))
    from epic.objective import multilabel_probs

    uni = grad_check(lambda: loss_uni(predict(x, h, 0.5), y, literal), [x], h=1e-5, tol=1e-4)
    multi = grad_check(lambda: loss_multi(multilabel_probs(x, h, 0.5), yb, literal), [x],
                       h=1e-5, tol=1e-4)
    assert uni.passed, uni.max_rel_error
    assert multi.passed, multi.max_rel_error


def test_trainable_temperature_gradient(rng):
    tau = Tensor.param(0.3)
    x = Tensor(rng.normal(size=(2, 8)))
    h = rng.normal(size=(3, 8))
    report = grad_check(lambda: loss_uni(predict(x, h, tau), [0, 2]), [tau], tol=1e-6)
    assert report.passed


# --------------------------------------------------------------- metrics


def test_metrics_all_correct():
    assert metrics(np.eye(3), np.arange(3), "uni") == {"accuracy": 1.0}
    y = np.array([[1, 0], [0, 1], [1, 1]])
    m = metrics(y.astype(float), y, "multi")
    assert m == {"f1_micro": 1.0, "f1_macro": 1.0}


def test_metrics_complement_is_zero():
    y = np.array([[1], [0], [1]])
    m = metrics(1.0 - y, y, "multi")
    assert m == {"f1_micro": 0.0, "f1_macro": 0.0}


def test_macro_and_micro_from_hand_counts():
    # class A always right; class B predicted exactly where it is absent
    y = np.array([[1, 1], [0, 0], [1, 0], [0, 1]])
    pred = np.array([[1, 0], [0, 1], [1, 1], [0, 0]], dtype=float)
    m = metrics(pred, y, "multi")
    # A: tp 2, fp 0, fn 0 -> F1 1.   B: tp 0, fp 2, fn 2 -> F1 0.
    # pooled: tp 2, fp 2, fn 2 -> F1 = 2*2 / (2*2 + 2 + 2) = 0.5
    assert m["f1_macro"] == pytest.approx(0.5)
    assert m["f1_micro"] == pytest.approx(0.5)


def test_macro_counts_absent_unpredicted_class_as_zero():
    y = np.array([[1, 0], [1, 0]])
    m = metrics(y.astype(float), y, "multi")
    assert m["f1_macro"] == pytest.approx(0.5)
    assert m["f1_micro"] == 1.0


def test_threshold_is_inclusive_half():
    y = np.array([[1, 0]])
    assert metrics(np.array([[0.5, 0.49]]), y, "multi")["f1_micro"] == 1.0


def test_accuracy_counts_argmax_matches():
    p = np.array([[0.6, 0.4], [0.3, 0.7], [0.9, 0.1], [0.2, 0.8]])
    assert metrics(p, np.array([0, 0, 0, 1]), "uni")["accuracy"] == 0.75


def test_empty_evaluation_rejected():
    with pytest.raises(ValueError, match="empty"):
        metrics(np.zeros((0, 3)), np.zeros(0), "uni")
