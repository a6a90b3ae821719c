"""Tensor core: forward values, tape mechanics, gradients vs central differences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sedgen import tensor as T
from sedgen.errors import ConfigError, ContractError, ShapeError
from sedgen.gradcheck import gradcheck
from sedgen.tensor import Tape, Tensor, backward


def rand(shape, seed, scale=1.0, offset=0.0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(0.0, 1.0, size=shape) * scale + offset, requires_grad=True)


def weighted_sum(y, seed=0):
    """Scalar loss: random fixed projection of y, so every entry matters."""
    w = np.random.default_rng(seed).normal(size=y.shape)
    return T.sum_(T.mul(y, Tensor(w)))


# ---------------------------------------------------------------------------
# forward values


def test_softmax_matches_direct_formula():
    x = Tensor([1.0, 2.0, 3.0])
    got = T.softmax(x).data
    e = np.exp([1.0, 2.0, 3.0])
    np.testing.assert_allclose(got, e / e.sum(), atol=1e-4)
    np.testing.assert_allclose(got, [0.0900, 0.2447, 0.6652], atol=1e-4)


def test_softmax_rows_sum_to_one_with_huge_entries():
    rng = np.random.default_rng(7)
    for _ in range(100):
        x = Tensor(rng.normal(size=(10, 13)) * rng.choice([1.0, 1e3]))
        s = T.softmax(x, axis=-1).data.sum(axis=-1)
        np.testing.assert_allclose(s, 1.0, atol=1e-12)


def test_layernorm_unit_example():
    # mean 2, population std sqrt(2/3); tiny eps reproduces the 4 dp values
    x = Tensor([1.0, 2.0, 3.0])
    y = T.layernorm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=1e-12).data
    np.testing.assert_allclose(y, [-1.2247, 0.0, 1.2247], atol=1e-4)


def test_layernorm_constant_row_is_zeros():
    x = Tensor(np.full((2, 5), 3.7))
    y = T.layernorm(x, Tensor(np.ones(5)), Tensor(np.zeros(5)), eps=1e-5).data
    np.testing.assert_allclose(y, 0.0, atol=1e-12)


def test_layernorm_rejects_nonpositive_eps():
    x = Tensor(np.ones(4))
    with pytest.raises(ConfigError):
        T.layernorm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)), eps=0.0)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as ei:
        T.matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((5, 2))))
    assert "(3, 4)" in str(ei.value) and "(5, 2)" in str(ei.value)


def test_argmax_tie_breaks_low_index():
    assert T.argmax_last(Tensor([1.0, 3.0, 3.0, 0.0])) == 1


def test_embedding_rejects_out_of_range_ids():
    table = Tensor(np.ones((4, 2)))
    with pytest.raises(ContractError):
        T.embedding(table, [0, 4])


# ---------------------------------------------------------------------------
# tape mechanics


def test_sum_backward_gives_ones():
    for shape in [(3,), (2, 4), (2, 3, 2)]:
        x = rand(shape, 0)
        tape = Tape()
        with tape:
            loss = T.sum_(x)
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, np.ones(shape))


def test_loss_grad_wrt_itself_is_one_and_nonscalar_rejected():
    x = rand((3,), 1)
    tape = Tape()
    with tape:
        y = T.mul(x, x)
    with pytest.raises(ContractError):
        backward(y, tape)


def test_unreachable_param_gets_zero_grad():
    x = rand((3,), 2)
    y = rand((3,), 3)
    tape = Tape()
    with tape:
        used = T.sum_(T.mul(x, x))
        _unused = T.mul(y, 2.0)  # on the tape, but not feeding the loss
    backward(used, tape)
    np.testing.assert_array_equal(y.grad, np.zeros(3))
    np.testing.assert_allclose(x.grad, 2.0 * x.data)


def test_backward_accumulates_across_tapes():
    x = rand((4,), 4)
    for _ in range(3):
        tape = Tape()
        with tape:
            loss = T.sum_(x)
        backward(loss, tape)
    np.testing.assert_array_equal(x.grad, 3.0 * np.ones(4))


def test_backward_is_deterministic():
    x = rand((6, 6), 5)
    grads = []
    for _ in range(2):
        x.grad = None
        tape = Tape()
        with tape:
            y = T.matmul(x, x)
            loss = T.sum_(T.mul(y, y))
        backward(loss, tape)
        grads.append(x.grad.copy())
    assert np.array_equal(grads[0], grads[1])


def test_no_tape_means_no_tracking():
    x = rand((3,), 6)
    y = T.mul(x, x)
    assert not y.requires_grad


def test_param_reused_twice_gets_summed_grad():
    x = rand((3,), 7)
    tape = Tape()
    with tape:
        loss = T.sum_(T.add(T.mul(x, 2.0), T.mul(x, 3.0)))
    backward(loss, tape)
    np.testing.assert_allclose(x.grad, 5.0 * np.ones(3))


# ---------------------------------------------------------------------------
# gradcheck: linear ops at 1e-6, nonlinear at 1e-4


def check(f, params, tol, eps=1e-5, seed=0):
    gradcheck(f, params, eps=eps, tol=tol, seed=seed).assert_ok()


def test_grad_matmul_2d():
    a, b = rand((3, 4), 10), rand((4, 2), 11)
    check(lambda: weighted_sum(T.matmul(a, b)), [("a", a), ("b", b)], tol=1e-6)


def test_grad_matmul_batched():
    a, b = rand((5, 3, 4), 12), rand((5, 4, 2), 13)
    check(lambda: weighted_sum(T.matmul(a, b)), [("a", a), ("b", b)], tol=1e-4)


def test_grad_elementwise_binary():
    a, b = rand((3, 4), 14), rand((3, 4), 15, offset=3.0)
    check(lambda: weighted_sum(T.add(a, b)), [("a", a), ("b", b)], tol=1e-6)
    check(lambda: weighted_sum(T.sub(a, b)), [("a", a), ("b", b)], tol=1e-6)
    check(lambda: weighted_sum(T.mul(a, b)), [("a", a), ("b", b)], tol=1e-4)
    check(lambda: weighted_sum(T.div(a, b)), [("a", a), ("b", b)], tol=1e-4)


def test_grad_broadcast_bias_add():
    a, b = rand((5, 4), 16), rand((4,), 17)
    check(lambda: weighted_sum(T.add(a, b)), [("a", a), ("b", b)], tol=1e-6)


def test_grad_unary_nonlinearities():
    x = rand((4, 5), 18)
    pos = rand((4, 5), 19, offset=2.5)  # keep log/sqrt well away from 0
    check(lambda: weighted_sum(T.exp(x)), [("x", x)], tol=1e-4)
    check(lambda: weighted_sum(T.tanh(x)), [("x", x)], tol=1e-4)
    check(lambda: weighted_sum(T.sigmoid(x)), [("x", x)], tol=1e-4)
    check(lambda: weighted_sum(T.gelu(x)), [("x", x)], tol=1e-4)
    check(lambda: weighted_sum(T.log(pos)), [("p", pos)], tol=1e-4)
    check(lambda: weighted_sum(T.sqrt(pos)), [("p", pos)], tol=1e-4)


def test_grad_relu_away_from_kink():
    x = rand((4, 5), 20)
    x.data[np.abs(x.data) < 0.05] += 0.1
    check(lambda: weighted_sum(T.relu(x)), [("x", x)], tol=1e-4)


def test_grad_structure_ops():
    x = rand((4, 6), 21)
    y = rand((3, 6), 22)
    check(lambda: weighted_sum(T.transpose(x)), [("x", x)], tol=1e-6)
    check(lambda: weighted_sum(T.reshape(x, (2, 12))), [("x", x)], tol=1e-6)
    check(lambda: weighted_sum(T.concat([x, y], axis=0)), [("x", x), ("y", y)], tol=1e-6)
    check(lambda: weighted_sum(T.stack([x, T.mul(x, 2.0)], axis=0)), [("x", x)], tol=1e-6)
    check(lambda: weighted_sum(T.slice_(x, (slice(1, 3), slice(2, 6)))), [("x", x)], tol=1e-6)
    check(lambda: weighted_sum(T.flip(x, axis=1)), [("x", x)], tol=1e-6)


def test_grad_reductions():
    x = rand((3, 4, 2), 23)
    check(lambda: weighted_sum(T.sum_(x, axis=1)), [("x", x)], tol=1e-6)
    check(lambda: weighted_sum(T.mean(x, axis=(0, 2))), [("x", x)], tol=1e-6)
    check(lambda: T.mean(x), [("x", x)], tol=1e-6)


def test_grad_softmax_and_layernorm():
    x = rand((3, 7), 24)
    g, bshift = rand((7,), 25, offset=1.0), rand((7,), 26)
    check(lambda: weighted_sum(T.softmax(x, axis=-1)), [("x", x)], tol=1e-4)
    check(
        lambda: weighted_sum(T.layernorm(x, g, bshift, eps=1e-5)),
        [("x", x), ("gain", g), ("shift", bshift)],
        tol=1e-4,
    )


def test_grad_log_softmax():
    x = rand((3, 7), 27)
    check(lambda: weighted_sum(T.log_softmax(x, axis=-1)), [("x", x)], tol=1e-4)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_grad_conv2d(stride, padding):
    x = rand((2, 6, 5), 28)
    w = rand((3, 2, 3, 3), 29)
    b = rand((3,), 30)
    check(
        lambda: weighted_sum(T.conv2d(x, w, b, stride=stride, padding=padding)),
        [("x", x), ("w", w), ("b", b)],
        tol=1e-4,
    )


def test_grad_pooling():
    x = rand((2, 6, 4), 31)
    check(lambda: weighted_sum(T.avg_pool2d(x, 2)), [("x", x)], tol=1e-6)
    check(lambda: weighted_sum(T.max_pool2d(x, 2)), [("x", x)], tol=1e-4)


def test_grad_embedding():
    table = rand((7, 3), 32)
    ids = [0, 2, 2, 6]
    check(lambda: weighted_sum(T.embedding(table, ids)), [("t", table)], tol=1e-6)


def test_grad_dropout_with_replayed_mask():
    x = rand((5, 5), 33)

    def f():
        rng = np.random.default_rng(99)  # same mask on every call
        return weighted_sum(T.dropout(x, 0.2, rng))

    check(f, [("x", x)], tol=1e-4)


def test_grad_l2_normalize():
    v = rand((6,), 34)
    check(lambda: weighted_sum(T.l2_normalize(v)), [("v", v)], tol=1e-4)


def test_gradcheck_flags_nondeterminism():
    x = rand((3,), 35)
    state = {"n": 0}

    def f():
        state["n"] += 1
        return T.sum_(T.mul(x, float(state["n"])))

    with pytest.raises(ContractError):
        gradcheck(f, [("x", x)])


def test_gradcheck_catches_wrong_gradient():
    # a deliberately broken op: forward x^2, backward pretends d/dx = 1
    x = rand((3,), 36)

    def bad_square(t):
        out = Tensor(t.data**2)
        return T._record(out, (t,), lambda g: (g.copy(),))

    rep = gradcheck(lambda: T.sum_(bad_square(x)), [("x", x)], tol=1e-4)
    assert not rep.ok


# ---------------------------------------------------------------------------
# properties


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_softmax_rows_always_sum_to_one(n, m, seed):
    x = Tensor(np.random.default_rng(seed).normal(size=(n, m)) * 100.0)
    np.testing.assert_allclose(T.softmax(x, axis=-1).data.sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_sum_grad_is_ones(n, m, seed):
    x = Tensor(np.random.default_rng(seed).normal(size=(n, m)), requires_grad=True)
    tape = Tape()
    with tape:
        loss = T.sum_(x)
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, np.ones((n, m)))


def test_dropout_zero_p_is_identity_and_scaling():
    x = rand((1000,), 37)
    rng = np.random.default_rng(5)
    assert T.dropout(x, 0.0, rng) is x
    y = T.dropout(x, 0.2, np.random.default_rng(5)).data
    kept = y != 0
    np.testing.assert_allclose(y[kept], x.data[kept] / 0.8)
    assert abs(kept.mean() - 0.8) < 0.05
