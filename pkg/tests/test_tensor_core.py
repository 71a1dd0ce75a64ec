import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from selective_ssm import tensor_core as tc

from conftest import central_diff

floats = st.floats(-2, 2, allow_nan=False)


def grad_of(fn, *arrays):
    ts = [tc.Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*ts)
    tc.backward(tc.tsum(out) if out.data.size != 1 else out)
    return [t.grad for t in ts]


def test_softplus_at_zero_is_log2():
    assert float(tc.softplus(tc.Tensor(0.0)).data) == pytest.approx(math.log(2), abs=1e-15)


def test_softplus_large_inputs_do_not_overflow():
    x = np.array([-1e4, -50.0, 0.0, 25.0, 1e4])
    y = tc.np_softplus(x)
    assert np.all(np.isfinite(y))
    assert y[-1] == 1e4 and y[0] == 0.0
    assert y[3] == pytest.approx(25.0 + math.log1p(math.exp(-25.0)), rel=1e-15)


def test_relu_values():
    out = tc.relu(tc.Tensor([-3.0, 3.0])).data
    assert out.tolist() == [0.0, 3.0]


def test_silu_matches_relu_far_from_zero():
    x = np.array([-100.0, 100.0])
    assert np.max(np.abs(tc.silu(tc.Tensor(x)).data - tc.relu(tc.Tensor(x)).data)) < 1e-10


def test_matmul_small_examples():
    v = np.array([[1.0], [2.0], [3.0]])
    assert np.array_equal(tc.matmul(tc.Tensor(np.eye(3)), tc.Tensor(v)).data, v)
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert tc.matmul(tc.Tensor(a), tc.Tensor([[0.0], [1.0]])).data.tolist() == [[2.0], [4.0]]


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    ref = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(7):
                ref[i, j] += a[i, k] * b[k, j]
    assert np.max(np.abs(tc.matmul(tc.Tensor(a), tc.Tensor(b)).data - ref)) < 1e-13


def test_matmul_dimension_mismatch():
    with pytest.raises(ValueError):
        tc.matmul(tc.Tensor(np.ones((2, 3))), tc.Tensor(np.ones((2, 3))))


def test_non_broadcastable_shapes_raise():
    with pytest.raises(ValueError):
        tc.add(tc.Tensor(np.ones((2, 3))), tc.Tensor(np.ones((4,))))


def test_cross_entropy_uniform_logits():
    C = 7
    loss = tc.softmax_cross_entropy(tc.Tensor(np.zeros((3, C))), [0, 3, 6])
    assert float(loss.data) == pytest.approx(math.log(C), abs=1e-14)


def test_cross_entropy_saturates():
    z = np.zeros((2, 4))
    z[0, 1] = z[1, 2] = 1e4
    assert float(tc.softmax_cross_entropy(tc.Tensor(z), [1, 2]).data) < 1e-6


def test_cross_entropy_matches_logsumexp_oracle(rng):
    z = rng.normal(size=(4, 8)) * 3
    y = np.array([0, 7, 3, 3])
    mask = np.array([True, False, True, True])
    ref = []
    for i in range(4):
        if mask[i]:
            m = max(z[i])
            ref.append(m + math.log(sum(math.exp(v - m) for v in z[i])) - z[i, y[i]])
    got = float(tc.softmax_cross_entropy(tc.Tensor(z), y, mask).data)
    assert abs(got - sum(ref) / len(ref)) < 1e-12


def test_cross_entropy_all_masked_raises():
    with pytest.raises(ValueError):
        tc.softmax_cross_entropy(tc.Tensor(np.zeros((2, 3))), [0, 1], [False, False])


def test_cross_entropy_gradient(rng):
    z = rng.normal(size=(5, 6))
    y = rng.integers(0, 6, size=5)
    mask = np.array([1, 1, 0, 1, 0], dtype=bool)
    (g,) = grad_of(lambda t: tc.softmax_cross_entropy(t, y, mask), z)
    num = central_diff(lambda v: float(tc.softmax_cross_entropy(tc.Tensor(v), y, mask).data), z)
    assert np.max(np.abs(g - num)) < 1e-8


def test_square_gradient_and_softplus_slope():
    (g,) = grad_of(lambda x: x * x, np.array(3.0))
    assert float(g) == pytest.approx(6.0)
    (g,) = grad_of(tc.softplus, np.array(0.0))
    assert float(g) == pytest.approx(0.5)


def test_backward_requires_scalar():
    x = tc.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        tc.backward(x * 2.0)


def test_non_parameter_leaves_untouched():
    x = tc.Tensor(np.ones(3), requires_grad=True)
    c = tc.Tensor(np.full(3, 2.0))
    tc.backward(tc.tsum(x * c))
    assert c.grad is None
    assert np.array_equal(x.grad, np.full(3, 2.0))


def test_graph_is_topologically_ordered(rng):
    a = tc.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = tc.Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    h = tc.silu(tc.matmul(a, b))
    loss = tc.tsum(h * h + tc.exp(h))
    g = tc.build_graph(loss)
    assert g.check_order()
    tc.backward(loss, g)
    for p in g.parameters():
        assert p.grad.shape == p.shape


def test_no_graph_without_gradients():
    out = tc.exp(tc.Tensor(np.ones(2))) * 3.0
    assert out.is_leaf and not out.requires_grad


UNARY = ["exp", "softplus", "silu", "relu", "sigmoid"]
BINARY = ["add", "sub", "mul"]


@given(op=st.sampled_from(UNARY), x=hnp.arrays(np.float64, (3, 2), elements=floats))
def test_unary_gradients_match_finite_differences(op, x):
    if op == "relu":
        x = np.where(np.abs(x) < 1e-3, 0.5, x)
    (g,) = grad_of(lambda t: tc.elementwise(op, t), x)
    num = central_diff(lambda v: float(tc.elementwise(op, tc.Tensor(v)).data.sum()), x)
    assert np.max(np.abs(g - num) / np.maximum(np.abs(num), 1.0)) < 1e-5


@given(op=st.sampled_from(BINARY), a=hnp.arrays(np.float64, (2, 3), elements=floats),
       b=hnp.arrays(np.float64, (3,), elements=floats))
def test_binary_broadcast_gradients(op, a, b):
    ga, gb = grad_of(lambda s, t: tc.elementwise(op, s, t), a, b)
    assert ga.shape == a.shape and gb.shape == b.shape
    num_a = central_diff(lambda v: float(tc.elementwise(op, tc.Tensor(v), tc.Tensor(b)).data.sum()), a)
    num_b = central_diff(lambda v: float(tc.elementwise(op, tc.Tensor(a), tc.Tensor(v)).data.sum()), b)
    assert np.max(np.abs(ga - num_a)) < 1e-5
    assert np.max(np.abs(gb - num_b)) < 1e-5


@given(a=hnp.arrays(np.float64, (3, 4), elements=floats), b=hnp.arrays(np.float64, (4, 2), elements=floats))
def test_matmul_gradients(a, b):
    ga, gb = grad_of(lambda s, t: tc.matmul(s, t) * tc.matmul(s, t), a, b)
    f = lambda u, v: float(((u @ v) ** 2).sum())
    assert np.allclose(ga, central_diff(lambda v: f(v, b), a), atol=1e-5)
    assert np.allclose(gb, central_diff(lambda v: f(a, v), b), atol=1e-5)


@given(x=hnp.arrays(np.float64, (4,), elements=floats))
def test_division_and_log_gradients(x):
    pos = np.abs(x) + 0.5
    (g,) = grad_of(lambda t: tc.log(t) / (t + 1.0), pos)
    num = central_diff(lambda v: float((np.log(v) / (v + 1.0)).sum()), pos)
    assert np.max(np.abs(g - num)) < 1e-5


@given(x=st.floats(-50, 50), y=st.floats(-50, 50))
def test_softplus_monotone(x, y):
    if x < y:
        assert tc.np_softplus(x) <= tc.np_softplus(y)
        if y - x > 1e-6:
            assert tc.np_softplus(x) < tc.np_softplus(y)


shapes = hnp.array_shapes(min_dims=0, max_dims=3, min_side=1, max_side=3)


@given(shapes, shapes, shapes)
def test_broadcast_shape_associative(s1, s2, s3):
    try:
        left = tc.broadcast_shape(tc.broadcast_shape(s1, s2), s3)
    except ValueError:
        left = None
    try:
        right = tc.broadcast_shape(s1, tc.broadcast_shape(s2, s3))
    except ValueError:
        right = None
    assert left == right


def test_reshape_transpose_concat_getitem_gradients(rng):
    a = rng.normal(size=(2, 3))
    b = rng.normal(size=(2, 2))

    def f(s, t):
        u = tc.concat([tc.transpose(tc.reshape(s, (3, 2))), t], axis=-1)
        return tc.getitem(u, (slice(None), slice(1, 4))) * 2.0

    ga, gb = grad_of(f, a, b)

    def ref(u, v):
        w = np.concatenate([u.reshape(3, 2).T, v], axis=-1)
        return float((w[:, 1:4] * 2.0).sum())

    assert np.allclose(ga, central_diff(lambda v: ref(v, b), a), atol=1e-7)
    assert np.allclose(gb, central_diff(lambda v: ref(a, v), b), atol=1e-7)


def test_take_rows_accumulates_repeated_ids():
    table = tc.Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    out = tc.take_rows(table, np.array([[0, 2, 0]]))
    tc.backward(tc.tsum(out))
    assert table.grad.tolist() == [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]]
