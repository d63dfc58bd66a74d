import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from supra import tensor as T
from supra.gradcheck import check_tensors, numeric_grad, rel_err
from supra.tensor import NonFiniteError, ShapeError, Tensor


def leaf(rng, *shape, positive=False):
    x = rng.normal(size=shape)
    return Tensor(np.abs(x) + 0.5 if positive else x, requires_grad=True)


def assert_grads(loss_fn, tensors, tol=1e-6):
    errs = check_tensors(loss_fn, dict(enumerate(tensors)))
    assert max(errs.values()) <= tol, errs


# (name, builder) pairs: each builder returns (inputs, loss_fn)
def _unary(op, positive=False):
    def build(rng):
        x = leaf(rng, 3, 4, positive=positive)
        w = rng.normal(size=(3, 4))
        return [x], lambda: T.tsum(op(x) * w)
    return build


def _binary(op, positive_b=False):
    def build(rng):
        a, b = leaf(rng, 3, 4), leaf(rng, 3, 4, positive=positive_b)
        w = rng.normal(size=(3, 4))
        return [a, b], lambda: T.tsum(op(a, b) * w)
    return build


def _matmul_batched(rng):
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 2, 4, 5)
    return [a, b], lambda: T.tsum(T.matmul(a, b) * np.arange(30.0).reshape(2, 3, 5))


def _matmul_shared(rng):
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 4, 5)
    return [a, b], lambda: T.tsum(T.exp(T.scale(a @ b, 0.3)))


def _softmax(rng):
    x = leaf(rng, 2, 5, 5)
    mask = np.tril(np.ones((5, 5), dtype=bool))
    w = rng.normal(size=(2, 5, 5))
    return [x], lambda: T.tsum(T.softmax_rows(x, mask) * w)


def _group_norm(rng):
    x, g, b = leaf(rng, 3, 8), leaf(rng, 8), leaf(rng, 8)
    w = rng.normal(size=(3, 8))
    return [x, g, b], lambda: T.tsum(T.group_norm(x, 2, g, b) * w)


def _cross_entropy(rng):
    x = leaf(rng, 2, 3, 7)
    t = rng.integers(0, 7, (2, 3))
    return [x], lambda: T.cross_entropy(x, t)


def _embedding(rng):
    table = leaf(rng, 6, 3)
    ids = np.array([[0, 2, 2], [5, 0, 1]])
    return [table], lambda: T.tsum(T.exp(T.embedding(table, ids)))


def _shape_ops(rng):
    x = leaf(rng, 2, 3, 4)
    y = leaf(rng, 4)

    def f():
        p = T.permute(x, (2, 0, 1))
        r = T.reshape(p, (4, 6))
        c = T.concat([r, T.expand(T.reshape(y, (4, 1)), (4, 6))], axis=1)
        s = T.stack([c, c * 2.0], axis=0)
        return T.tsum(T.getitem(s, (slice(None), slice(1, 3))) * np.arange(48.0).reshape(2, 2, 12)) \
            + T.mean(T.transpose(x) * T.transpose(x))
    return [x, y], f


OPS = {
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "div": _binary(T.div, positive_b=True),
    "neg": _unary(T.neg),
    "relu": _unary(lambda x: T.relu(x + 0.05)),
    "elu": _unary(T.elu),
    "exp": _unary(T.exp),
    "log": _unary(T.log, positive=True),
    "gelu": _unary(T.gelu),
    "clamp_min": _unary(lambda x: T.clamp_min(x, 0.1)),
    "scale": _unary(lambda x: T.scale(x, -2.5)),
    "mean_axis": _unary(lambda x: T.expand(T.mean(x, axis=1, keepdims=True), (3, 4)) * x),
    "sum_axis": _unary(lambda x: T.expand(T.tsum(x * x, axis=0, keepdims=True), (3, 4)) * x),
    "matmul_batched": _matmul_batched,
    "matmul_shared": _matmul_shared,
    "softmax_rows": _softmax,
    "group_norm": _group_norm,
    "cross_entropy": _cross_entropy,
    "embedding": _embedding,
    "shape_ops": _shape_ops,
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(sorted(OPS).index(name))
    inputs, f = OPS[name](rng)
    assert_grads(f, inputs)


def test_reused_node_accumulates():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    y = x * x
    T.tsum(y + y * 3.0).backward()
    assert np.allclose(x.grad, 8 * x.data)


def test_leaf_grads_accumulate_across_backward_calls():
    x = Tensor(np.ones(3), requires_grad=True)
    T.tsum(x * 2.0).backward()
    T.tsum(x * 3.0).backward()
    assert np.array_equal(x.grad, np.full(3, 5.0))


def test_scalar_broadcast_grad():
    s = Tensor(np.array(2.0), requires_grad=True)
    x = Tensor(np.arange(4.0), requires_grad=True)
    T.tsum(x * s).backward()
    assert s.grad.shape == () and float(s.grad) == 6.0
    assert np.array_equal(x.grad, np.full(4, 2.0))


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) * np.ones((4, 3))


def test_non_scalar_backward_raises():
    with pytest.raises(ShapeError):
        (Tensor(np.ones(3), requires_grad=True) * 2.0).backward()


def test_division_by_zero_raises():
    with pytest.raises(ZeroDivisionError):
        T.div(Tensor(np.ones(2)), Tensor(np.array([1.0, 0.0])))


def test_non_finite_output_raises():
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        T.exp(Tensor(np.array([1000.0])))


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        T.embedding(Tensor(np.ones((4, 2))), [4])


def test_group_norm_divisibility():
    with pytest.raises(ValueError):
        T.group_norm(Tensor(np.ones((2, 6))), 4)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._backward is None
    assert T.is_grad_enabled()


def test_softmax_rows_mask_zeroes_future():
    x = Tensor(np.random.default_rng(0).normal(size=(4, 4)))
    y = T.softmax_rows(x, np.tril(np.ones((4, 4), dtype=bool))).data
    assert np.allclose(np.triu(y, 1), 0.0)
    assert np.allclose(y.sum(-1), 1.0)


def test_cross_entropy_uniform_logits_is_log_vocab():
    loss = T.cross_entropy(Tensor(np.zeros((5, 259))), np.arange(5))
    assert abs(loss.item() - np.log(259)) < 1e-12


def test_numeric_grad_oracle_on_quadratic():
    x = np.array([1.0, -2.0, 0.5])
    g = numeric_grad(lambda: float((x ** 2).sum()), x)
    assert np.allclose(g, 2 * x, atol=1e-8)
    assert rel_err(np.zeros(2), np.zeros(2)) == 0.0


finite = st.floats(-3, 3, allow_nan=False, width=64)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4, 2), elements=finite))
def test_matmul_forward_matches_numpy(a, b):
    assert np.array_equal(T.matmul(Tensor(a), Tensor(b)).data, a @ b)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (2, 6), elements=finite))
def test_group_norm_output_is_standardized(x):
    y = T.group_norm(Tensor(x), 2, eps=1e-5).data.reshape(2, 2, 3)
    assert np.allclose(y.mean(-1), 0.0, atol=1e-9)
    var = x.reshape(2, 2, 3).var(-1)
    assert np.allclose(y.var(-1), var / (var + 1e-5), atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (2, 3), elements=finite))
def test_product_rule_property(a, b):
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    T.tsum(ta * tb).backward()
    assert np.array_equal(ta.grad, b) and np.array_equal(tb.grad, a)


def test_matmul_identity_and_hand_cases():
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), Tensor([[3.0, 4.0], [5.0, 6.0]])).data, [[3, 4], [5, 6]])
    assert np.array_equal(T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data, [[11.0]])


def test_matmul_sum_gradient_5x7_by_7x3(rng):
    a, b = leaf(rng, 5, 7), Tensor(rng.normal(size=(7, 3)))
    errs = check_tensors(lambda: T.tsum(T.matmul(a, b)), {"a": a})
    assert errs["a"] <= 1e-6


def test_elementwise_values():
    assert np.array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    assert np.array_equal((T.elu(Tensor([0.0])) + 1.0).data, [1.0])
    assert np.array_equal(T.elementwise("relu", Tensor([-1.0, 3.0])).data, [0.0, 3.0])


def test_softmax_rows_values():
    assert np.array_equal(T.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    y = T.softmax_rows(Tensor([[1000.0, 0.0]])).data
    assert np.isfinite(y).all() and abs(y[0, 0] - 1.0) < 1e-12 and y[0, 1] < 1e-300


def test_group_norm_constant_groups_are_zero():
    assert np.array_equal(T.group_norm(Tensor(np.full((2, 8), 3.5)), 2).data, np.zeros((2, 8)))


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (3, 8), elements=st.floats(-5, 5)), st.floats(0.01, 100))
def test_group_norm_scale_invariance(x, alpha):
    x = x + np.arange(8.0)  # keep every group's variance away from zero
    a = T.group_norm(Tensor(alpha * x), 4, eps=1e-12).data
    b = T.group_norm(Tensor(x), 4, eps=1e-12).data
    assert np.abs(a - b).max() <= 1e-6


def test_backward_of_sum_is_ones():
    x = Tensor(np.zeros((2, 3, 4)), requires_grad=True)
    T.tsum(x).backward()
    assert np.array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_of_sum_of_squares():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    T.tsum(x * x).backward()
    assert np.array_equal(x.grad, [2.0, 4.0, 6.0])
