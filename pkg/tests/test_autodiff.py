import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dlsa.autodiff import LOG_EPS, Parameter, Tape, check_gradients
from dlsa.errors import ContractError, DimensionError, NumericError, StateError


def test_identity_affine_passes_input_through():
    x = np.array([[1.0, -2.0, 3.5]])
    w = Parameter(np.eye(3))
    t = Tape()
    out = t.affine(t.const(x), w)
    np.testing.assert_array_equal(out.value, x)


def test_masked_affine_zeroes_blocked_connections():
    x = np.array([[1.0, 10.0]])
    w = Parameter(np.ones((2, 2)))
    mask = np.array([[1.0, 0.0], [1.0, 1.0]])
    t = Tape()
    out = t.affine(t.const(x), w, mask=mask)
    # row 0 sees only x[0], row 1 sees both
    np.testing.assert_array_equal(out.value, [[1.0, 11.0]])


def test_masked_affine_gradient_respects_mask():
    x = np.array([[2.0, 3.0]])
    w = Parameter(np.array([[0.5, 0.5], [0.5, 0.5]]))
    mask = np.array([[1.0, 0.0], [1.0, 1.0]])
    t = Tape()
    out = t.sum(t.affine(t.const(x), w, mask=mask))
    t.backward(out)
    # d out / d w = x broadcast per row, then masked
    np.testing.assert_array_equal(w.grad, [[2.0, 0.0], [2.0, 3.0]])


def test_dot_product_gradient_is_other_operand():
    w = Parameter([1.0, 2.0, 3.0])
    x = np.array([4.0, 5.0, 6.0])
    t = Tape()
    out = t.sum(t.mul(t.param(w), t.const(x)))
    t.backward(out)
    np.testing.assert_array_equal(w.grad, x)


def test_sum_of_squares_gradient_is_two_w():
    w = Parameter([1.5, -2.0, 0.0])
    t = Tape()
    wn = t.param(w)
    out = t.sum(t.mul(wn, wn))
    t.backward(out)
    np.testing.assert_array_equal(w.grad, 2.0 * w.values)


def test_reused_leaf_accumulates_once_per_use():
    # f(w) = sum(w) + sum(w) -> grad 2 everywhere
    w = Parameter([1.0, 2.0])
    t = Tape()
    wn = t.param(w)
    out = t.add(t.sum(wn), t.sum(wn))
    t.backward(out)
    np.testing.assert_array_equal(w.grad, [2.0, 2.0])


def test_grad_accumulates_across_backward_calls():
    w = Parameter([3.0])
    for _ in range(2):
        t = Tape()
        out = t.sum(t.param(w))
        t.backward(out)
    np.testing.assert_array_equal(w.grad, [2.0])
    w.zero_grad()
    np.testing.assert_array_equal(w.grad, [0.0])


def test_softmax_cross_entropy_matches_hand_computed():
    # logits [[1, 2, 0.5]], target index 1, hand-computed softmax and loss
    z = Parameter([[1.0, 2.0, 0.5]])
    onehot = np.array([[0.0, 1.0, 0.0]])
    t = Tape()
    zn = t.param(z)
    loss = t.sum(t.add(t.logsumexp(zn, axis=1), t.sum(t.mul(t.const(-onehot), zn), axis=1)))
    t.backward(loss)
    assert float(loss.value) == pytest.approx(0.4643687841079447, rel=1e-12)
    expect = np.array([[0.23122389762214904, -0.37146828078823757, 0.14024438316608848]])
    np.testing.assert_allclose(z.grad, expect, rtol=1e-12)


def test_softmax_rows_sum_to_one():
    t = Tape()
    p = t.softmax(t.const([[1.0, 2.0, 3.0], [-5.0, 0.0, 5.0]]), axis=1)
    np.testing.assert_allclose(p.value.sum(axis=1), [1.0, 1.0], rtol=1e-15)


def test_logsumexp_known_values():
    t = Tape()
    assert float(t.logsumexp(t.const([0.0, 0.0])).value) == pytest.approx(np.log(2.0), rel=1e-15)
    assert float(t.logsumexp(t.const([7.25])).value) == 7.25
    # stability: naive exp would overflow
    big = float(t.logsumexp(t.const([1000.0, 1000.0])).value)
    assert big == pytest.approx(1000.0 + np.log(2.0), rel=1e-15)


@settings(deadline=None, max_examples=200)
@given(st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=16))
def test_logsumexp_bounds(vals):
    t = Tape()
    out = float(t.logsumexp(t.const(vals)).value)
    assert max(vals) <= out + 1e-12
    assert out <= max(vals) + np.log(len(vals)) + 1e-12


def test_log_clamps_at_zero_with_zero_gradient():
    w = Parameter([0.0, 1.0])
    t = Tape()
    out = t.sum(t.log(t.param(w)))
    assert out.value == pytest.approx(np.log(LOG_EPS) + 0.0)
    t.backward(out)
    np.testing.assert_array_equal(w.grad, [0.0, 1.0])


def test_mean_gradient_divides_by_count():
    w = Parameter(np.arange(6.0).reshape(2, 3))
    t = Tape()
    t.backward(t.mean(t.param(w)))
    np.testing.assert_allclose(w.grad, np.full((2, 3), 1.0 / 6.0))


def test_bias_gradient_sums_over_batch():
    x = np.ones((4, 2))
    w = Parameter(np.zeros((3, 2)))
    b = Parameter(np.zeros(3))
    t = Tape()
    t.backward(t.sum(t.affine(t.const(x), w, b)))
    np.testing.assert_array_equal(b.grad, [4.0, 4.0, 4.0])


def test_concat_routes_gradients_to_parts():
    a = Parameter([[1.0, 2.0]])
    b = Parameter([[3.0]])
    t = Tape()
    cat = t.concat([t.param(a), t.param(b)], axis=1)
    t.backward(t.sum(t.mul(cat, t.const([[10.0, 20.0, 30.0]]))))
    np.testing.assert_array_equal(a.grad, [[10.0, 20.0]])
    np.testing.assert_array_equal(b.grad, [[30.0]])


def test_gather_rows_scatter_adds_duplicates():
    w = Parameter([[1.0], [2.0], [3.0]])
    t = Tape()
    picked = t.gather_rows(t.param(w), [0, 0, 2])
    t.backward(t.sum(picked))
    np.testing.assert_array_equal(w.grad, [[2.0], [0.0], [1.0]])


def test_two_layer_masked_network_matches_finite_differences():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 3))
    w1 = Parameter(rng.normal(size=(8, 3)) * 0.4)
    b1 = Parameter(rng.normal(size=8) * 0.1)
    w2 = Parameter(rng.normal(size=(3, 8)) * 0.4)
    b2 = Parameter(rng.normal(size=3) * 0.1)
    m1 = (rng.random((8, 3)) < 0.7).astype(float)
    m2 = (rng.random((3, 8)) < 0.7).astype(float)

    def build():
        t = Tape()
        h = t.tanh(t.affine(t.const(x), w1, b1, mask=m1))
        out = t.affine(h, w2, b2, mask=m2)
        return t, t.mean(t.mul(out, out))

    err = check_gradients(build, [w1, b1, w2, b2])
    assert err < 1e-4


def test_composite_loss_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(6, 4))
    w = Parameter(rng.normal(size=(4, 4)) * 0.5)
    onehot = np.eye(4)[rng.integers(0, 4, size=6)]

    def build():
        t = Tape()
        logits = t.affine(t.const(x), w)
        ce = t.mean(t.add(t.logsumexp(logits, axis=1), t.sum(t.mul(t.const(-onehot), logits), axis=1)))
        probs = t.softmax(logits, axis=1)
        ent = t.mean(t.sum(t.mul(probs, t.log(probs)), axis=1))
        return t, t.add(ce, ent)

    assert check_gradients(build, [w]) < 1e-4


def test_gradients_are_bit_identical_across_runs():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(4, 5))
    grads = []
    for _ in range(2):
        w = Parameter(np.arange(20.0).reshape(4, 5) / 7.0)
        t = Tape()
        h = t.tanh(t.affine(t.const(x), w))
        t.backward(t.mean(t.logsumexp(h, axis=1)))
        grads.append(w.grad.copy())
    assert np.array_equal(grads[0], grads[1])


# ----- error contracts ------------------------------------------------------


def test_backward_rejects_non_scalar():
    t = Tape()
    v = t.const([1.0, 2.0])
    with pytest.raises(ContractError):
        t.backward(v)


def test_backward_twice_rejected():
    w = Parameter([1.0])
    t = Tape()
    out = t.sum(t.param(w))
    t.backward(out)
    with pytest.raises(StateError):
        t.backward(out)


def test_recording_on_consumed_tape_rejected():
    t = Tape()
    out = t.sum(t.const([1.0]))
    t.backward(out)
    with pytest.raises(StateError):
        t.const([2.0])


def test_logsumexp_rejects_empty_and_nan():
    t = Tape()
    with pytest.raises(ContractError):
        t.logsumexp(t.const(np.zeros(0)))
    with pytest.raises(NumericError):
        t.logsumexp(t.const([1.0, np.nan]))


def test_shape_mismatches_name_operands():
    t = Tape()
    with pytest.raises(DimensionError, match="affine"):
        t.affine(t.const(np.ones((2, 3))), Parameter(np.ones((4, 5))))
    with pytest.raises(DimensionError):
        t.add(t.const(np.ones((2, 3))), t.const(np.ones((4, 5))))
    with pytest.raises(DimensionError, match="mask"):
        t.affine(t.const(np.ones((2, 3))), Parameter(np.ones((4, 3))), mask=np.ones((3, 3)))
