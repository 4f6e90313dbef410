import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from epic import tensor as T
from epic.gradcheck import grad_check, numeric_grad, relative_error
from epic.tensor import GraphError, ShapeError, Tensor, backward, gradients, no_grad

SEEDS = st.integers(0, 2**32 - 1)


def leaf(x):
    return Tensor.param(np.asarray(x, dtype=float))


# ----------------------------------------------------------------- examples


def test_softmax_uniform_logits():
    out = T.primitive_forward("softmax_over_axis", [Tensor([1.0, 1.0, 1.0])], axis=0)
    np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)


def test_relu_definition():
    out = T.primitive_forward("relu", [Tensor([-2.0, 0.0, 3.0])])
    assert out.data.tolist() == [0.0, 0.0, 3.0]


def test_matmul_identity():
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    out = T.primitive_forward("matmul", [Tensor(np.eye(2)), b])
    np.testing.assert_array_equal(out.data, b.data)


def test_grad_of_squared_norm():
    w = leaf([1.0, 2.0, 3.0])
    backward(T.sum_over_axis(w * w))
    np.testing.assert_array_equal(w.grad, [2.0, 4.0, 6.0])


def test_leaf_not_in_loss_gets_zero_gradient():
    w, u = leaf([1.0, 2.0, 3.0]), leaf([0.5, -1.0])
    gw, gu = gradients(T.sum_over_axis(u * u), [w, u])
    np.testing.assert_array_equal(gw, np.zeros(3))
    np.testing.assert_array_equal(gu, [1.0, -2.0])


def test_softmax_cross_entropy_gradient_matches_finite_differences():
    logits = leaf([0.0, 0.0])

    def ce():
        return -T.log(T.slice_rows(T.softmax(logits), 0, 1, axis=-1))

    backward(ce())
    analytic = logits.grad.copy()
    oracle = numeric_grad(ce, logits, h=1e-6)
    np.testing.assert_allclose(analytic, [-0.5, 0.5], atol=1e-12)
    np.testing.assert_allclose(oracle, [-0.5, 0.5], atol=1e-9)


# ------------------------------------------------------------------- errors


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError) as info:
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    assert info.value.op == "matmul"
    assert info.value.shapes == ((2, 3), (4, 2))
    with pytest.raises(ShapeError, match="add"):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))


def test_softmax_axis_out_of_range():
    with pytest.raises(ShapeError, match="softmax_over_axis"):
        T.softmax(Tensor(np.ones((2, 2))), axis=2)


def test_unknown_primitive():
    with pytest.raises(ValueError, match="unknown primitive"):
        T.primitive_forward("conv", [Tensor([1.0])])


def test_backward_rejects_non_scalar_loss():
    w = leaf([1.0, 2.0])
    with pytest.raises(GraphError, match="scalar"):
        backward(w * w)


def test_backward_rejects_detached_loss():
    frozen = Tensor.param([1.0, 2.0], requires_grad=False)
    with pytest.raises(GraphError, match="detached"):
        backward(T.sum_over_axis(frozen * frozen))


# --------------------------------------------------------------- properties


@settings(max_examples=50, deadline=None)
@given(SEEDS, st.floats(-50, 50))
def test_softmax_sums_to_one_and_is_shift_invariant(seed, c):
    x = np.random.default_rng(seed).normal(0, 3, size=(4, 7))
    for axis in (0, 1):
        s = T.softmax(Tensor(x), axis=axis).data
        np.testing.assert_allclose(s.sum(axis=axis), 1.0, atol=1e-12)
        shifted = T.softmax(Tensor(x + c), axis=axis).data
        np.testing.assert_allclose(shifted, s, rtol=0, atol=1e-12)


def test_frozen_leaves_get_no_gradient_storage():
    frozen = Tensor.param(np.ones((3, 3)), requires_grad=False)
    w = leaf(np.arange(3.0).reshape(1, 3))
    loss = T.sum_over_axis(T.relu(w @ frozen))
    backward(loss)
    assert frozen.grad is None
    assert w.grad is not None


def test_no_trainable_leaf_records_no_graph():
    a = Tensor.param(np.ones((2, 2)), requires_grad=False)
    out = T.softmax(a @ a)
    assert out.op is None and not out.requires_grad
    with no_grad():
        w = leaf([1.0])
        assert (w * w).op is None


def test_recompute_is_bit_identical(rng):
    x = rng.normal(size=(3, 5))
    w = rng.normal(size=(5, 4))

    def run():
        a, b = leaf(x), leaf(w)
        y = T.layer_norm(T.relu(a @ b))
        loss = T.mean(T.softmax(y) * y)
        backward(loss)
        return loss.data.copy(), a.grad.copy(), b.grad.copy()

    for first, second in zip(run(), run()):
        assert np.array_equal(first, second)


# --------------------------------------------- Jacobian-vector product checks


def _jvp_error(fn, inputs, rng, h=1e-5):
    """Analytic <grad, v> versus a central difference along v, for loss <fn(x), w>."""
    leaves = [leaf(x) for x in inputs]
    out = fn(*leaves)
    outs = out if isinstance(out, tuple) else (out,)
    weights = [rng.normal(size=o.shape) for o in outs]
    dirs = [rng.normal(size=x.shape) for x in inputs]

    def scalar(xs):
        with no_grad():
            res = fn(*[Tensor(x) for x in xs])
        res = res if isinstance(res, tuple) else (res,)
        return sum(float(np.sum(r.data * w)) for r, w in zip(res, weights))

    loss = sum((T.sum_over_axis(o * Tensor(w)) for o, w in zip(outs, weights)), Tensor(0.0))
    grads = gradients(loss, leaves)
    analytic = sum(float(np.sum(g * d)) for g, d in zip(grads, dirs))
    plus = scalar([x + h * d for x, d in zip(inputs, dirs)])
    minus = scalar([x - h * d for x, d in zip(inputs, dirs)])
    numeric = (plus - minus) / (2 * h)
    return float(relative_error(np.array(analytic), np.array(numeric)))


def _away_from_zero(x, margin=0.05):
    return np.where(np.abs(x) < margin, np.sign(x) * margin + (x == 0) * margin, x)


CASES = {
    "matmul": (T.matmul, [(3, 4), (4, 2)]),
    "batched_matmul": (T.matmul, [(2, 3, 4), (4, 5)]),
    "add_broadcast": (T.add, [(3, 4), (4,)]),
    "elementwise_mul": (T.mul, [(3, 4), (3, 1)]),
    "div": (lambda a, b: T.div(a, T.exp(b)), [(3, 4), (3, 4)]),
    "scale": (lambda a: T.scale(a, -2.5), [(2, 3)]),
    "concat_rows": (lambda a, b: T.concat_rows([a, b]), [(2, 4), (3, 4)]),
    "split_rows": (lambda a: T.split_rows(a, [1, 3]), [(4, 3)]),
    "slice_rows": (lambda a: T.slice_rows(a, 1, 3, axis=-1), [(2, 4)]),
    "relu": (lambda a: T.relu(Tensor(0.0) + a), [(3, 5)]),
    "exp": (T.exp, [(3, 3)]),
    "log": (lambda a: T.log(T.exp(a)), [(3, 3)]),
    "sqrt": (lambda a: T.sqrt(a * a + 1.0), [(3, 3)]),
    "sigmoid": (T.sigmoid, [(4,)]),
    "softmax_last": (lambda a: T.softmax(a, axis=-1), [(3, 5)]),
    "softmax_first": (lambda a: T.softmax(a, axis=0), [(3, 5)]),
    "layer_norm": (T.layer_norm, [(4, 6)]),
    "transpose": (lambda a: T.transpose(a, (1, 2, 0)), [(2, 3, 4)]),
    "reshape": (lambda a: T.reshape(a, (6, 2)), [(3, 4)]),
    "broadcast_to": (lambda a: T.broadcast_to(a, (3, 2, 4)), [(2, 4)]),
    "sum_axis": (lambda a: T.sum_over_axis(a, axis=1, keepdims=True), [(3, 4)]),
    "mean_axis": (lambda a: T.mean(a, axis=0), [(3, 4)]),
    "take_along_axis": (lambda a: T.take_along_axis(a, np.array([[2], [0]]), axis=-2), [(3, 4)]),
    "gather_rows": (lambda a: T.gather_rows(a, np.array([[0, 2, 2]])), [(4, 3)]),
}


@pytest.mark.parametrize("name", sorted(CASES))
@settings(max_examples=15, deadline=None)
@given(seed=SEEDS)
def test_primitive_jvp_matches_finite_differences(name, seed):
    fn, shapes = CASES[name]
    rng = np.random.default_rng(seed)
    inputs = [_away_from_zero(rng.normal(size=s)) for s in shapes]
    assert _jvp_error(fn, inputs, rng) <= 1e-6


def test_clamp_gradient_inside_and_outside_range():
    a = leaf([-2.0, 0.5, 3.0])
    backward(T.sum_over_axis(T.clamp(a, -1.0, 1.0)))
    np.testing.assert_array_equal(a.grad, [0.0, 1.0, 0.0])


# -------------------------------------------------------------- grad_check


def test_grad_check_quadratic_passes_tight():
    w = leaf([1.0, -2.0, 0.5])
    report = grad_check(lambda: T.sum_over_axis(w * w), [w], h=1e-5, tol=1e-6)
    assert report["pass"] and report.max_rel_error <= 1e-6
    assert report.n_checked == 3


def _sign_flipped_square(a: Tensor) -> Tensor:
    return T._result(a.data ** 2, "bad_square", (a,), lambda g: (-2.0 * a.data * g,))


def test_grad_check_catches_sign_flipped_backward():
    w = leaf([1.0, -2.0, 0.5])
    report = grad_check(lambda: T.sum_over_axis(_sign_flipped_square(w)), [w])
    assert not report.passed
    assert report.max_rel_error == pytest.approx(2.0)


@pytest.mark.parametrize("h", [0.0, -1e-5, 2e-3])
def test_grad_check_rejects_bad_step(h):
    w = leaf([1.0])
    with pytest.raises(ValueError, match="step"):
        grad_check(lambda: T.sum_over_axis(w * w), [w], h=h)


def test_relative_error_uses_absolute_floor():
    assert relative_error(np.array(0.0), np.array(1e-12)) == pytest.approx(1e-4)
    assert relative_error(np.array(2.0), np.array(1.0)) == pytest.approx(0.5)
