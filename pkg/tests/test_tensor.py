import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from zootune import tensor as ops
from zootune.errors import (
    DegenerateBatchError,
    DimensionError,
    EvaluationError,
    GeometryError,
    GraphError,
    LabelError,
    NonFiniteError,
)
from zootune.gradcheck import finite_diff_check
from zootune.tensor import Graph

from oracles import conv2d_loop, cross_entropy_loop, rel_err


def probe(node, seed=0, classes=3):
    """Scalar loss with non-uniform sensitivity to every output entry."""
    n = node.shape[0]
    flat = ops.reshape(node, (n, -1))
    r = np.random.default_rng([seed, 99])
    w = r.normal(size=(classes, flat.shape[1])) / (2.0 * np.sqrt(flat.shape[1]))
    return ops.softmax_cross_entropy(ops.affine(flat, w), r.integers(classes, size=n))


def value(node):
    return np.asarray(node.value)


# -- construction --------------------------------------------------------------


def test_as_tensor_rejects_nonfinite():
    with pytest.raises(NonFiniteError):
        ops.as_tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        ops.as_tensor([np.inf])


def test_as_tensor_rejects_empty_dimension():
    with pytest.raises(DimensionError):
        ops.as_tensor(np.zeros((2, 0)))


def test_as_tensor_keeps_requested_dtype():
    assert ops.as_tensor([1, 2], np.float32).dtype == np.float32


# -- conv2d --------------------------------------------------------------------


def test_conv2d_single_patch():
    g = Graph()
    x = g.constant(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    w = np.array([[[[1.0, 0.0], [0.0, 1.0]]]])
    assert value(ops.conv2d(x, w)).tolist() == [[[[5.0]]]]


def test_conv2d_zero_kernel(rng):
    g = Graph()
    out = ops.conv2d(g.constant(rng.normal(size=(2, 3, 5, 5))), np.zeros((4, 3, 3, 3)), padding=1)
    assert not value(out).any()


def test_conv2d_identity_kernel(rng):
    x = rng.normal(size=(1, 1, 3, 3))
    out = ops.conv2d(Graph().constant(x), np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(value(out), x)


@pytest.mark.parametrize("k,stride,padding", [(3, 1, 1), (3, 2, 1), (1, 2, 0), (1, 1, 0), (2, 1, 0), (3, 1, 0), (3, 2, 0), (2, 2, 1)])
def test_conv2d_matches_loop(rng, k, stride, padding):
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=4)
    out = ops.conv2d(Graph().constant(x), w, b, stride, padding)
    np.testing.assert_allclose(value(out), conv2d_loop(x, w, b, stride, padding), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("k,stride,padding", [(3, 1, 1), (3, 2, 1), (1, 2, 0)])
def test_sample_conv2d_matches_loop(rng, k, stride, padding):
    x = rng.normal(size=(3, 2, 6, 6))
    w = rng.normal(size=(3, 4, 2, k, k))
    out = value(ops.sample_conv2d(Graph().constant(x), w, None, stride, padding))
    for j in range(3):
        np.testing.assert_allclose(out[j : j + 1], conv2d_loop(x[j : j + 1], w[j], None, stride, padding), atol=1e-12)


def test_conv2d_shape_errors(rng):
    g = Graph()
    x = g.constant(rng.normal(size=(1, 3, 4, 4)))
    with pytest.raises(DimensionError, match=r"\(1, 3, 4, 4\)"):
        ops.conv2d(x, np.zeros((2, 5, 3, 3)))
    with pytest.raises(GeometryError):
        ops.conv2d(x, np.zeros((2, 3, 5, 5)))


def test_conv2d_linearity(rng):
    x = Graph().constant(rng.normal(size=(2, 3, 6, 6)))
    w1, w2 = rng.normal(size=(2, 4, 3, 3, 3))
    a, b = 0.7, -1.3
    lhs = value(ops.conv2d(x, a * w1 + b * w2, padding=1))
    rhs = a * value(ops.conv2d(x, w1, padding=1)) + b * value(ops.conv2d(x, w2, padding=1))
    assert rel_err(lhs, rhs) < 1e-10


def test_conv2d_pointwise_weight_gradient(rng):
    # loss = sum(conv(x, w)) with a 1x1 kernel: dL/dw[o, c] = sum of x over batch and space
    x = rng.normal(size=(2, 3, 4, 4))
    g = Graph()
    w = g.param(rng.normal(size=(5, 3, 1, 1)))
    grads = g.backward(ops.total(ops.conv2d(g.constant(x), w)))
    expect = np.broadcast_to(x.sum(axis=(0, 2, 3)).reshape(1, 3, 1, 1), (5, 3, 1, 1))
    np.testing.assert_allclose(grads[w.id], expect, rtol=1e-12)


# -- other ops -------------------------------------------------------------------


def test_global_avg_pool_examples():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]], [[0.0, 0.0], [0.0, 8.0]]]])
    out = value(ops.global_avg_pool(Graph().constant(x)))
    assert out.reshape(-1).tolist() == [2.5, 2.0]
    assert out.shape == (1, 2, 1, 1)


def test_global_avg_pool_unit_plane(rng):
    x = rng.normal(size=(3, 2, 1, 1))
    np.testing.assert_array_equal(value(ops.global_avg_pool(Graph().constant(x))), x)


def test_affine_examples():
    g = Graph()
    out = ops.affine(g.constant(np.array([[1.0, 2.0]])), np.array([[1.0, 1.0], [2.0, 0.0]]), np.array([0.0, 1.0]))
    assert value(out).tolist() == [[3.0, 3.0]]
    zero = ops.affine(g.constant(np.ones((3, 2))), np.zeros((2, 2)), np.array([4.0, -1.0]))
    assert value(zero).tolist() == [[4.0, -1.0]] * 3
    with pytest.raises(DimensionError):
        ops.affine(g.constant(np.ones((3, 2))), np.zeros((2, 3)))


def _bn(x, gamma, beta, mean, var, training, eps=1e-5):
    g = Graph()
    return value(ops.batch_norm(g.constant(x), gamma, beta, mean, var, training, eps=eps))


def test_batch_norm_eval_example():
    x = np.full((1, 1, 2, 2), 3.0)
    out = _bn(x, np.array([2.0]), np.array([0.0]), np.array([1.0]), np.array([1.0]), False, eps=0.0)
    np.testing.assert_array_equal(out, np.full_like(x, 4.0))


def test_batch_norm_train_on_normalized_input(rng):
    x = rng.normal(size=(8, 2, 4, 4))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    out = _bn(x, np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), True, eps=1e-12)
    np.testing.assert_allclose(out, x, atol=1e-5)


def test_batch_norm_zero_gamma_gives_beta(rng):
    out = _bn(rng.normal(size=(4, 2, 3, 3)), np.zeros(2), np.array([0.5, -2.0]), np.zeros(2), np.ones(2), True)
    np.testing.assert_array_equal(out[:, 0], 0.5)
    np.testing.assert_array_equal(out[:, 1], -2.0)


def test_batch_norm_updates_running_stats_in_place(rng):
    x = rng.normal(2.0, 3.0, size=(4, 1, 5, 5))
    mean, var = np.zeros(1), np.ones(1)
    _bn(x, np.ones(1), np.zeros(1), mean, var, True)
    n = x.size
    np.testing.assert_allclose(mean, 0.1 * x.mean(), rtol=1e-12)
    np.testing.assert_allclose(var, 0.9 + 0.1 * x.var() * n / (n - 1), rtol=1e-12)


def test_batch_norm_degenerate_batch():
    with pytest.raises(DegenerateBatchError):
        _bn(np.ones((1, 2, 1, 1)), np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), True)


def test_activation_examples():
    g = Graph()
    assert value(ops.sigmoid(g.constant(np.array([0.0])))).tolist() == [0.5]
    assert value(ops.sigmoid(g.constant(np.array([math.log(0.25)])))).tolist() == [0.2]
    assert value(ops.relu(g.constant(np.array([-1.0, 0.0, 2.0])))).tolist() == [0.0, 0.0, 2.0]
    with pytest.raises(ValueError):
        ops.activation(g.constant(np.zeros(1)), "tanh")


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20))
def test_sigmoid_stays_in_closed_unit_interval(xs):
    s = value(ops.sigmoid(Graph().constant(np.array(xs))))
    assert np.all((s >= 0) & (s <= 1)) and np.all(np.isfinite(s))


@pytest.mark.parametrize(
    "logits,label,expected",
    [([0.0, 0.0], 0, math.log(2.0)), ([1.0, 2.0, 3.0], 2, math.log(1 + math.exp(-1) + math.exp(-2)))],
)
def test_cross_entropy_examples(logits, label, expected):
    loss = ops.softmax_cross_entropy(Graph().constant(np.array([logits])), [label])
    assert ops.as_scalar(loss) == pytest.approx(expected, abs=1e-12)


def test_cross_entropy_saturated():
    loss = ops.softmax_cross_entropy(Graph().constant(np.array([[1e3, 0.0]])), [0])
    assert ops.as_scalar(loss) < 1e-6


def test_cross_entropy_matches_loop(rng):
    logits = rng.normal(size=(5, 4)) * 3
    labels = rng.integers(4, size=5)
    loss = ops.softmax_cross_entropy(Graph().constant(logits), labels)
    assert ops.as_scalar(loss) == pytest.approx(cross_entropy_loop(logits, labels), rel=1e-12)


def test_cross_entropy_label_range():
    with pytest.raises(LabelError):
        ops.softmax_cross_entropy(Graph().constant(np.zeros((2, 3))), [0, 3])


# -- tape contract -------------------------------------------------------------------


def test_sigmoid_derivative_at_zero():
    g = Graph()
    x = g.param(np.array([0.0]))
    grads = g.backward(ops.total(ops.sigmoid(x)))
    assert grads[x.id].tolist() == [0.25]


def test_backward_twice_is_an_error():
    g = Graph()
    x = g.param(np.array([1.0]))
    loss = ops.total(ops.relu(x))
    g.backward(loss)
    with pytest.raises(GraphError):
        g.backward(loss)


def test_backward_requires_scalar():
    g = Graph()
    x = g.param(np.ones(3))
    with pytest.raises(GraphError):
        g.backward(ops.relu(x))


def test_unreachable_leaf_gets_exact_zero():
    g = Graph()
    x = g.param(np.array([2.0]))
    unused = g.param(np.ones((2, 2)))
    grads = g.backward(ops.total(ops.sigmoid(x)))
    assert grads[unused.id].shape == (2, 2) and not grads[unused.id].any()


def test_named_gradients():
    g = Graph()
    x = g.param(np.array([1.0, -1.0]), name="x")
    grads = g.named(g.backward(ops.total(ops.relu(x))))
    assert grads["x"].tolist() == [1.0, 0.0]


def test_mixing_graphs_fails():
    a, b = Graph().param(np.ones(2)), Graph().param(np.ones(2))
    with pytest.raises(GraphError):
        ops.add(a, b)


def test_forward_is_deterministic(rng):
    x = rng.normal(size=(2, 3, 5, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    first = value(ops.conv2d(Graph().constant(x), w, padding=1))
    second = value(ops.conv2d(Graph().constant(x), w, padding=1))
    assert first.tobytes() == second.tobytes()


# -- gradient oracle -------------------------------------------------------------------


def test_finite_diff_quadratic():
    report = finite_diff_check(lambda g, p: ops.total(ops.weighted_sum(p[0], [p[0]])), [np.array([3.0])])
    assert report.numeric[0][0] == pytest.approx(6.0, abs=1e-9)
    assert report.passed


def test_finite_diff_constant_function():
    report = finite_diff_check(lambda g, p: g.constant(np.array(2.0)), [np.array([1.0, 2.0])])
    assert report.passed and report.max_rel_error == 0.0
    assert not report.analytic[0].any() and not report.numeric[0].any()


def test_finite_diff_contract():
    with pytest.raises(ValueError):
        finite_diff_check(lambda g, p: ops.total(p[0]), [np.ones(1)], step=1e-2)
    with pytest.raises(TypeError):
        finite_diff_check(lambda g, p: ops.total(p[0]), [np.ones(1, dtype=np.float32)])
    with pytest.raises(EvaluationError):
        finite_diff_check(lambda g, p: g.constant(np.array(np.inf)), [np.ones(1)])


def test_finite_diff_flags_a_wrong_gradient():
    def broken(g, p):
        x = p[0]
        # forward doubles, backward claims the identity
        return ops.total(x.graph._add(2 * x.value, "bad", [x], lambda gr: (gr,)))

    assert not finite_diff_check(broken, [np.ones(3)]).passed


OPS = {
    "conv2d": (lambda g, p: probe(ops.conv2d(p[0], p[1], p[2], 2, 1)), [(2, 2, 5, 5), (3, 2, 3, 3), (3,)]),
    "sample_conv2d": (lambda g, p: probe(ops.sample_conv2d(p[0], p[1], p[2], 1, 1)), [(2, 2, 4, 4), (2, 3, 2, 3, 3), (2, 3)]),
    "affine": (lambda g, p: probe(ops.affine(p[0], p[1], p[2])), [(3, 4), (2, 4), (2,)]),
    "batch_norm": (
        lambda g, p: probe(ops.batch_norm(p[0], p[1], p[2], np.zeros(2), np.ones(2), True)),
        [(3, 2, 2, 2), (2,), (2,)],
    ),
    "gap+sigmoid": (lambda g, p: probe(ops.sigmoid(ops.global_avg_pool(p[0]))), [(2, 3, 3, 3)]),
    "relu": (lambda g, p: probe(ops.relu(p[0])), [(2, 5)]),
    "channel_mix": (lambda g, p: probe(ops.reshape(ops.channel_mix(p[0], p[1]), (1, -1))), [(3, 3), (3, 2, 2, 2)]),
    "weighted_sum": (lambda g, p: probe(ops.weighted_sum(p[0], [p[1], p[2]])), [(4, 2), (3, 2), (3, 2)]),
    "mean+concat": (lambda g, p: probe(ops.reshape(ops.mean(ops.concat([p[0], p[1]], 1), 0), (1, -1))), [(3, 2), (3, 1)]),
}


@pytest.mark.parametrize("op", sorted(OPS))
@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(op, seed):
    builder, shapes = OPS[op]
    r = np.random.default_rng([seed, 5])
    params = [r.normal(size=s) for s in shapes]
    report = finite_diff_check(builder, params, step=1e-5)
    assert report.max_rel_error < 1e-4, (op, report.worst_param, report.worst_index)
