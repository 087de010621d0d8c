import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mmsent import tensor as T
from mmsent.errors import GradientStateError, ParameterError, ShapeError
from mmsent.tensor import Rng, Tensor


def leaf(values, dtype=None):
    return Tensor(values, requires_grad=True, dtype=dtype)


def weighted_sum(out, weights):
    """Scalar probe loss sum(out * weights) so every output coordinate matters."""
    return T.tensor_sum(T.mul(out, Tensor(weights, dtype=out.dtype)))


# --------------------------------------------------------------------------- #
# matmul
# --------------------------------------------------------------------------- #


def test_matmul_identity():
    out = T.matmul(Tensor(np.eye(2)), Tensor([[3, 4], [5, 6]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_zero():
    out = T.matmul(Tensor([[1, 2]]), Tensor([[0], [0]]))
    np.testing.assert_array_equal(out.data, [[0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_matmul_gradient_matches_finite_differences_float32(rng):
    a = leaf(rng.normal((3, 4)), np.float32)
    b = leaf(rng.normal((4, 2)), np.float32)
    w = rng.normal((3, 2))
    # matmul is linear, so a coarse step has no truncation error
    assert T.finite_diff_check(lambda x: weighted_sum(T.matmul(x, b), w), a, h=0.5, floor=1e-2) < 1e-3
    assert T.finite_diff_check(lambda x: weighted_sum(T.matmul(a, x), w), b, h=0.5, floor=1e-2) < 1e-3


def test_batched_matmul_gradient(f64, rng):
    a = leaf(rng.normal((2, 3, 4)))
    b = leaf(rng.normal((4, 5)))
    w = rng.normal((2, 3, 5))
    assert T.finite_diff_check(lambda x: weighted_sum(x @ b, w), a) < 1e-5
    assert T.finite_diff_check(lambda x: weighted_sum(a @ x, w), b) < 1e-5


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6),
                  elements=st.floats(-1e3, 1e3)))
def test_matmul_identity_is_exact(x):
    out = T.matmul(Tensor(np.eye(x.shape[0]), dtype=np.float64), Tensor(x, dtype=np.float64))
    np.testing.assert_array_equal(out.data, x)


# --------------------------------------------------------------------------- #
# relu / softmax / layer_norm
# --------------------------------------------------------------------------- #


def test_relu_values():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_relu_all_negative_has_zero_gradient():
    x = leaf([-3.0, -1.0, -0.5])
    out = T.relu(x)
    T.backward(T.tensor_sum(out))
    np.testing.assert_array_equal(out.data, 0)
    np.testing.assert_array_equal(x.grad, 0)


def test_relu_subgradient_at_zero_is_zero():
    x = leaf([0.0])
    T.backward(T.tensor_sum(T.relu(x)))
    assert x.grad[0] == 0


def test_relu_gradient_away_from_kink(f64, rng):
    vals = rng.normal((20,))
    vals[np.abs(vals) < 0.05] = 0.5
    x = leaf(vals)
    assert T.finite_diff_check(lambda t: weighted_sum(T.relu(t), np.arange(20.0)), x) < 1e-5


def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(Tensor(np.zeros(7))).data, np.full(7, 1 / 7), rtol=1e-6)


def test_softmax_large_logits_do_not_overflow():
    out = T.softmax(Tensor([1000.0, 0.0])).data
    assert np.isfinite(out).all()
    assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0, abs=1e-30)


def test_softmax_jacobian(f64, rng):
    x = leaf(rng.normal((3, 5)))
    w = rng.normal((3, 5))
    assert T.finite_diff_check(lambda t: weighted_sum(T.softmax(t, axis=-1), w), x) < 1e-5
    y = leaf(rng.normal((3, 5)))
    assert T.finite_diff_check(lambda t: weighted_sum(T.softmax(t, axis=0), w), y) < 1e-5


@settings(max_examples=60)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 9)), elements=st.floats(-50, 50)))
def test_softmax_rows_are_probability_vectors(x):
    y = T.softmax(Tensor(x, dtype=np.float64), axis=-1).data
    assert (y > 0).all()
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)


def test_softmax_bad_axis():
    with pytest.raises(ShapeError):
        T.softmax(Tensor(np.zeros((2, 3))), axis=2)


def _ln(x, eps=1e-5):
    d = x.shape[-1]
    return T.layer_norm(x, Tensor(np.ones(d), dtype=x.dtype), Tensor(np.zeros(d), dtype=x.dtype), eps)


def test_layer_norm_constant_row_is_zero():
    out = _ln(Tensor(np.full((1, 6), 3.7)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-6)


def test_layer_norm_zero_gain_gives_bias():
    bias = np.arange(4.0)
    out = T.layer_norm(Tensor(np.random.default_rng(0).normal(size=(3, 4))), Tensor(np.zeros(4)), Tensor(bias))
    np.testing.assert_array_equal(out.data, np.broadcast_to(bias, (3, 4)))


@settings(max_examples=60)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 32)), elements=st.floats(-10, 10)))
def test_layer_norm_statistics(x):
    x = x + np.linspace(0, 1, x.shape[1])  # non-constant rows
    with T.precision(np.float64):
        out = _ln(Tensor(x), eps=1e-12).data
    assert np.abs(out.mean(axis=-1)).max() < 1e-5
    var = x.var(axis=-1)
    ok = var > 1e-6
    assert np.abs(out.var(axis=-1) - 1)[ok].max(initial=0) < 1e-4


def test_layer_norm_random_row_statistics_default_eps(rng):
    out = _ln(Tensor(rng.normal((8, 64), 2.0, 3.0), dtype=np.float64)).data
    assert np.abs(out.mean(axis=-1)).max() < 1e-5
    assert np.abs(out.var(axis=-1) - 1).max() < 1e-4


def test_layer_norm_gradient(f64, rng):
    x = leaf(rng.normal((3, 6)))
    g = leaf(rng.normal((6,)))
    b = leaf(rng.normal((6,)))
    w = rng.normal((3, 6))
    assert T.finite_diff_check(lambda t: weighted_sum(T.layer_norm(t, g, b), w), x) < 1e-5
    assert T.finite_diff_check(lambda t: weighted_sum(T.layer_norm(x, t, b), w), g) < 1e-5
    assert T.finite_diff_check(lambda t: weighted_sum(T.layer_norm(x, g, t), w), b) < 1e-5


def test_layer_norm_shape_check():
    with pytest.raises(ShapeError):
        T.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


# --------------------------------------------------------------------------- #
# dropout
# --------------------------------------------------------------------------- #


def test_dropout_eval_is_identity(rng):
    x = Tensor(rng.normal((5, 5)))
    assert T.dropout(x, 0.3, training=False, rng=rng) is x


def test_dropout_p_zero_is_identity(rng):
    x = Tensor(rng.normal((5, 5)))
    np.testing.assert_array_equal(T.dropout(x, 0.0, True, rng).data, x.data)


def test_dropout_rejects_p_one(rng):
    with pytest.raises(ParameterError):
        T.dropout(Tensor(np.ones(3)), 1.0, True, rng)


def test_dropout_monte_carlo():
    x = Tensor(np.full(100_000, 2.0), dtype=np.float64)
    out = T.dropout(x, 0.3, True, Rng(42)).data
    assert abs((out == 0).mean() - 0.3) < 0.01
    assert abs(out.mean() / 2.0 - 1.0) < 0.01


def test_dropout_masks_reproducible():
    x = Tensor(np.ones((50, 50)))
    a = T.dropout(x, 0.3, True, Rng(42)).data
    b = T.dropout(x, 0.3, True, Rng(42)).data
    np.testing.assert_array_equal(a, b)


def test_dropout_gradient_uses_same_mask():
    x = leaf(np.ones(1000))
    out = T.dropout(x, 0.5, True, Rng(9))
    T.backward(T.tensor_sum(out))
    np.testing.assert_array_equal(x.grad, out.data)


# --------------------------------------------------------------------------- #
# cross entropy
# --------------------------------------------------------------------------- #


def test_cross_entropy_uniform_is_ln7():
    loss = T.cross_entropy(Tensor(np.zeros((4, 7)), dtype=np.float64), [0, 3, 6, 2])
    assert loss.item() == pytest.approx(math.log(7), abs=1e-12)
    assert loss.item() == pytest.approx(1.9459, abs=1e-4)


def test_cross_entropy_dominant_logit():
    logits = np.zeros((2, 7))
    logits[0, 1] = logits[1, 5] = 1e4
    assert T.cross_entropy(Tensor(logits), [1, 5]).item() == pytest.approx(0.0, abs=1e-6)


def test_cross_entropy_gradient(rng):
    logits = leaf(rng.normal((5, 7)), np.float32)
    targets = [0, 6, 3, 3, 1]
    with T.precision(np.float32):
        err = T.finite_diff_check(lambda t: T.cross_entropy(t, targets), logits, h=1e-2, floor=1e-2)
    assert err < 1e-3


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        T.cross_entropy(Tensor(np.zeros((1, 7))), [7])


# --------------------------------------------------------------------------- #
# backward
# --------------------------------------------------------------------------- #


def test_backward_sum_gives_ones():
    x = leaf(np.arange(12.0).reshape(3, 4))
    T.backward(T.tensor_sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_zero_times_x():
    x = leaf([1.0, -2.0, 3.0])
    T.backward(T.tensor_sum(x * 0.0))
    np.testing.assert_array_equal(x.grad, 0)


def test_backward_non_scalar_raises():
    x = leaf([1.0, 2.0])
    with pytest.raises(GradientStateError):
        T.backward(x * 2.0)


def test_backward_twice_raises():
    x = leaf([1.0, 2.0])
    loss = T.tensor_sum(x * 3.0)
    T.backward(loss)
    x.zero_grad()
    with pytest.raises(GradientStateError, match="consumed"):
        T.backward(loss)


def test_backward_with_stale_grad_raises():
    x = leaf([1.0, 2.0])
    T.backward(T.tensor_sum(x))
    with pytest.raises(GradientStateError, match="zero_grad"):
        T.backward(T.tensor_sum(x * 2.0))


def test_backward_accumulates_over_shared_uses():
    x = leaf([2.0])
    T.backward(T.tensor_sum(x * x + x))
    assert x.grad[0] == pytest.approx(5.0)


def test_node_ids_increase_along_graph():
    x = leaf([1.0])
    y = x * 2.0
    z = y + x
    assert x._id < y._id < z._id


def test_structural_op_gradients(f64, rng):
    x = leaf(rng.normal((2, 3, 4)))
    w1, w2, w3 = rng.normal((4, 2, 3)), rng.normal((2, 3, 6)), rng.normal((2, 3, 3))
    assert T.finite_diff_check(lambda t: weighted_sum(T.transpose(t, (2, 0, 1)), w1), x) < 1e-5
    assert T.finite_diff_check(lambda t: weighted_sum(t.reshape(6, 4), np.arange(24.0).reshape(6, 4)), x) < 1e-5
    assert T.finite_diff_check(lambda t: weighted_sum(T.take(t, 1, axis=1), np.ones((2, 4))), x) < 1e-5
    fixed = Tensor(rng.normal((2, 3, 4)))
    y = leaf(rng.normal((2, 3, 2)))
    assert T.finite_diff_check(lambda t: weighted_sum(T.concat([fixed, t], -1), w2), y) < 1e-5
    z = leaf(rng.normal((2, 3)))
    other = Tensor(rng.normal((2, 3)))
    assert T.finite_diff_check(lambda t: weighted_sum(T.stack([other, t, t], 1), w3), z) < 1e-5


def test_embedding_gradient_scatter_adds(f64):
    table = leaf(np.arange(12.0).reshape(4, 3))
    out = T.embedding(table, np.array([[1, 1, 3]]))
    T.backward(T.tensor_sum(out))
    np.testing.assert_array_equal(table.grad, [[0, 0, 0], [2, 2, 2], [0, 0, 0], [1, 1, 1]])


def test_masked_mean_gradient(f64, rng):
    x = leaf(rng.normal((2, 4, 3)))
    mask = np.array([[1, 1, 0, 0], [1, 1, 1, 1]], bool)
    w = rng.normal((2, 3))
    assert T.finite_diff_check(lambda t: weighted_sum(T.masked_mean(t, mask), w), x) < 1e-5


# --------------------------------------------------------------------------- #
# finite_diff_check itself
# --------------------------------------------------------------------------- #


def test_finite_diff_square(f64):
    x = leaf([3.0])
    T.backward(T.tensor_sum(x * x))
    assert x.grad[0] == 6.0
    x.zero_grad()
    numeric = T.numeric_grad(lambda t: T.tensor_sum(t * t), x, h=1e-4)
    assert abs(numeric[0] - 6.0) < 1e-5
    assert T.finite_diff_check(lambda t: T.tensor_sum(t * t), x, h=1e-4) < 1e-5


def test_finite_diff_linear_is_exact(f64):
    x = leaf([1.0, -2.0, 0.5])
    assert T.finite_diff_check(lambda t: T.tensor_sum(t * 4.0), x, h=1e-3) < 1e-10


# --------------------------------------------------------------------------- #
# Rng
# --------------------------------------------------------------------------- #


def test_splitmix64_reference_values():
    # sequential SplitMix64 reference, seed 0
    state, ref = 0, []
    for _ in range(4):
        state = (state + 0x9E3779B97F4A7C15) & T.MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & T.MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & T.MASK64
        ref.append(z ^ (z >> 31))
    assert Rng(0).next_u64(4).tolist() == ref
    assert ref[0] == 0xE220A8397B1DCDAF


def test_rng_blocks_equal_one_stream():
    a = Rng(42)
    first = np.concatenate([a.next_u64(3), a.next_u64(5)])
    np.testing.assert_array_equal(first, Rng(42).next_u64(8))


def test_rng_uniform_range_and_determinism():
    u = Rng(7).uniform((1000,))
    assert (u >= 0).all() and (u < 1).all()
    np.testing.assert_array_equal(u, Rng(7).uniform(1000))


def test_rng_derive_independent():
    r = Rng(42)
    assert not np.array_equal(r.derive(1).next_u64(4), r.derive(2).next_u64(4))
    np.testing.assert_array_equal(r.derive(2, 5).next_u64(4), Rng(42).derive(2, 5).next_u64(4))


def test_rng_permutation_and_integers():
    p = Rng(3).permutation(50)
    assert sorted(p.tolist()) == list(range(50))
    ints = Rng(3).integers(-3, 4, 7000)
    assert ints.min() == -3 and ints.max() == 3


def test_rng_normal_moments():
    z = Rng(11).normal(200_000)
    assert abs(z.mean()) < 0.01
    assert abs(z.std() - 1) < 0.01
