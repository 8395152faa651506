import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qilcm import diffcore as dc
from qilcm.errors import DimensionError, DomainError, NonFiniteError


def const(values):
    return dc.Graph().constant(values)


def grads_of(loss_builder, **values):
    g = dc.Graph()
    leaves = {k: g.param(v, name=k) for k, v in values.items()}
    grads = dc.backward(g, loss_builder(**leaves))
    return {k: grads[t.id] for k, t in leaves.items()}


# forward examples --------------------------------------------------------------


def test_matmul_examples():
    g = dc.Graph()
    eye, m = g.constant(np.eye(2)), g.constant([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(dc.matmul(eye, m).value, [[1, 2], [3, 4]])
    np.testing.assert_array_equal(dc.matmul(g.constant([[1.0, 0.0]]), g.constant([[0.0], [5.0]])).value, [[0.0]])


def test_matmul_shape_error_names_both_shapes():
    g = dc.Graph()
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        dc.matmul(g.constant(np.ones((2, 3))), g.constant(np.ones((2, 2))))


def test_elu_examples():
    out = dc.elu(const([0.0, 2.0, -1.0])).value
    np.testing.assert_allclose(out, [0.0, 2.0, math.exp(-1) - 1], rtol=0, atol=1e-15)
    assert round(out[2], 5) == -0.63212


def test_softmax_examples():
    np.testing.assert_allclose(dc.softmax(const([0.0, 0.0])).value, [0.5, 0.5])
    np.testing.assert_array_equal(dc.softmax(const([123.4])).value, [1.0])
    np.testing.assert_allclose(dc.softmax(const([math.log(1), math.log(3)])).value, [0.25, 0.75], rtol=1e-15)
    with pytest.raises(DomainError):
        dc.softmax(const(np.zeros(0)))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_invariants(x, shift):
    s = dc.softmax(const(x)).value
    assert np.all(s > 0)
    assert abs(s.sum() - 1.0) <= 1e-12
    np.testing.assert_allclose(dc.softmax(const(x + shift)).value, s, rtol=1e-9, atol=1e-15)


def test_elementwise_examples():
    g = dc.Graph()
    np.testing.assert_array_equal(dc.hadamard(g.constant([1.0, 2.0]), g.constant([0.0, 1.0])).value, [0, 2])
    np.testing.assert_array_equal(dc.concat([g.constant([1.0]), g.constant([2.0, 3.0])], axis=0).value, [1, 2, 3])
    with pytest.raises(DimensionError):
        dc.hadamard(g.constant([1.0, 2.0]), g.constant([1.0]))
    with pytest.raises(DimensionError):
        dc.concat([g.constant(np.ones((2, 2))), g.constant(np.ones((3, 3)))], axis=1)


def test_tensors_reject_non_finite_and_are_read_only():
    g = dc.Graph()
    with pytest.raises(NonFiniteError):
        g.constant([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        g.param([np.inf])
    t = g.constant([1.0])
    with pytest.raises(ValueError):
        t.value[0] = 2.0


def test_tensors_from_different_graphs_do_not_mix():
    with pytest.raises(DomainError):
        dc.add(dc.Graph().constant([1.0]), dc.Graph().constant([1.0]))


# backward ------------------------------------------------------------------------


def test_backward_examples():
    np.testing.assert_array_equal(grads_of(lambda x: dc.sum(x), x=np.array([1.0, 2.0, 3.0]))["x"], [1, 1, 1])
    np.testing.assert_array_equal(grads_of(lambda x: dc.sum(dc.hadamard(x, x)), x=np.array([1.0, -2.0]))["x"], [2, -4])


def test_backward_mean_hadamard():
    a, b = np.array([0.3, -1.2, 2.0]), np.array([1.5, 0.5, -0.7])
    got = grads_of(lambda a, b: dc.mean(dc.hadamard(a, b)), a=a, b=b)
    np.testing.assert_allclose(got["a"], b / 3)
    np.testing.assert_allclose(got["b"], a / 3)


def test_backward_requires_scalar_loss():
    g = dc.Graph()
    x = g.param([1.0, 2.0])
    with pytest.raises(DomainError):
        dc.backward(g, dc.scale(x, 2.0))


def test_unused_leaf_gets_zero_gradient():
    g = dc.Graph()
    x, y = g.param([1.0, 2.0]), g.param([[3.0]])
    grads = dc.backward(g, dc.sum(x))
    np.testing.assert_array_equal(grads[y.id], [[0.0]])


def test_backward_is_bitwise_deterministic(rng):
    w, x = rng.normal(size=(4, 3)), rng.normal(size=(5, 4))

    def run():
        return grads_of(lambda w: dc.sum(dc.elu(dc.matmul(w.graph.constant(x), w))), w=w)["w"]

    assert run().tobytes() == run().tobytes()


def test_sqrt_zero_has_zero_subgradient():
    np.testing.assert_array_equal(grads_of(lambda x: dc.sum(dc.sqrt(x)), x=np.array([0.0, 4.0]))["x"], [0.0, 0.25])


def test_min_routes_gradient_to_first_argmin():
    x = np.array([[3.0, 1.0, 1.0], [2.0, 2.0, 5.0]])
    np.testing.assert_array_equal(grads_of(lambda x: dc.sum(dc.min_axis(x, 1)), x=x)["x"], [[0, 1, 0], [1, 0, 0]])
    np.testing.assert_array_equal(grads_of(lambda x: dc.sum(dc.min_axis(x, 0)), x=x)["x"], [[0, 1, 1], [1, 0, 0]])


def test_segment_ops_match_per_segment_computation(rng):
    seg = dc.Segments((2, 3, 1))
    x = rng.normal(size=6)
    s = dc.segment_softmax(const(x), seg).value
    for k in range(seg.count):
        np.testing.assert_allclose(s[seg.slice(k)], dc.softmax(const(x[seg.slice(k)])).value, rtol=1e-14)
    m = rng.normal(size=(6, 2))
    sums = dc.segment_sum(const(m), seg).value
    np.testing.assert_allclose(sums, [m[:2].sum(0), m[2:5].sum(0), m[5:].sum(0)])
    d = rng.normal(size=(4, 6))
    mins = dc.segment_min_cols(const(d), seg).value
    np.testing.assert_array_equal(mins, np.stack([d[:, :2].min(1), d[:, 2:5].min(1), d[:, 5:].min(1)], axis=1))


def test_pairwise_sqdist_both_paths_agree(rng):
    a, b = rng.normal(size=(3, 2)), rng.normal(size=(4, 2))
    expected = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    g = dc.Graph()
    np.testing.assert_allclose(dc.pairwise_sqdist(g.constant(a), g.constant(b)).value, expected, rtol=1e-14)
    big_a, big_b = rng.normal(size=(200, 120)), rng.normal(size=(200, 120))
    ref = ((big_a[:, None, :] - big_b[None, :, :]) ** 2).sum(-1)
    np.testing.assert_allclose(dc.pairwise_sqdist(g.constant(big_a), g.constant(big_b)).value, ref, rtol=1e-10)


# finite-difference checks of every primitive -----------------------------------------

SEG = dc.Segments((2, 3))


def _weights(g, shape, seed=7):
    return g.constant(np.random.default_rng(seed).uniform(-1, 1, shape))


def _weighted(out):
    g = out.graph
    return dc.sum(dc.hadamard(out, _weights(g, out.shape)))


PRIMITIVES = {
    "matmul": (lambda a, b: dc.matmul(a, b), {"a": (3, 4), "b": (4, 2)}),
    "affine": (lambda x, w, b: dc.affine(x, w, b), {"x": (3, 4), "w": (4, 2), "b": (2,)}),
    "add": (lambda a, b: dc.add(a, b), {"a": (3,), "b": (3,)}),
    "sub": (lambda a, b: dc.sub(a, b), {"a": (2, 2), "b": (2, 2)}),
    "scale_add": (lambda a, b: dc.scale_add(a, b, 0.3, -1.7), {"a": (3,), "b": (3,)}),
    "scale": (lambda a: dc.scale(a, -2.5), {"a": (4,)}),
    "add_scalar": (lambda a: dc.add_scalar(a, 0.7), {"a": (4,)}),
    "hadamard": (lambda a, b: dc.hadamard(a, b), {"a": (2, 3), "b": (2, 3)}),
    "divide": (lambda a, b: dc.divide(a, dc.add_scalar(dc.square(b), 0.5)), {"a": (3,), "b": (3,)}),
    "square": (lambda a: dc.square(a), {"a": (3,)}),
    "sqrt": (lambda a: dc.sqrt(dc.add_scalar(dc.square(a), 0.5)), {"a": (3,)}),
    "elu": (lambda a: dc.elu(a), {"a": (6,)}),
    "log_clamped": (lambda a: dc.log_clamped(dc.add_scalar(dc.square(a), 0.5)), {"a": (3,)}),
    "reshape": (lambda a: dc.reshape(a, (3, 2)), {"a": (6,)}),
    "concat": (lambda a, b: dc.concat([a, b], axis=1), {"a": (2, 1), "b": (2, 3)}),
    "sum": (lambda a: dc.reshape(dc.sum(a), (1,)), {"a": (2, 3)}),
    "mean": (lambda a: dc.reshape(dc.mean(a), (1,)), {"a": (2, 3)}),
    "softmax": (lambda a: dc.softmax(a), {"a": (5,)}),
    "segment_softmax": (lambda a: dc.segment_softmax(a, SEG), {"a": (5,)}),
    "scale_rows": (lambda x, w: dc.scale_rows(x, w), {"x": (5, 2), "w": (5,)}),
    "segment_sum": (lambda x: dc.segment_sum(x, SEG), {"x": (5, 2)}),
    "gather_rows": (lambda x: dc.gather_rows(x, np.array([1, 0, 1, 2])), {"x": (3, 2)}),
    "pairwise_sqdist": (lambda a, b: dc.pairwise_sqdist(a, b), {"a": (3, 2), "b": (4, 2)}),
    "min_axis": (lambda a: dc.min_axis(a, 1), {"a": (3, 4)}),
    "segment_min_cols": (lambda a: dc.segment_min_cols(a, SEG), {"a": (3, 5)}),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_vjp_matches_finite_differences(name):
    op, shapes = PRIMITIVES[name]
    rng = np.random.default_rng(sum(map(ord, name)))
    params = {k: rng.uniform(-2, 2, s) for k, s in shapes.items()}
    report = dc.gradient_check(lambda g, leaves: _weighted(op(**leaves)), params, step=1e-5, tol=1e-6)
    assert report.passed, report.errors


def test_gradient_check_linear_model_passes(rng):
    x, y = rng.normal(size=(6, 3)), rng.normal(size=6)

    def loss(g, p):
        r = dc.sub(dc.reshape(dc.affine(g.constant(x), p["w"], p["b"]), (6,)), g.constant(y))
        return dc.mean(dc.square(r))

    report = dc.gradient_check(loss, {"w": rng.normal(size=(3, 1)), "b": np.zeros(1)}, tol=1e-6)
    assert report.passed and report.failures == []


def test_gradient_check_flags_corrupted_vjp(rng):
    def broken_double(x):
        return dc._node("broken", 2.0 * x.value, (x,), lambda g: (3.0 * g,))

    def loss(g, p):
        return dc.add(dc.sum(dc.square(p["fine"])), dc.sum(broken_double(p["bad"])))

    report = dc.gradient_check(loss, {"fine": rng.normal(size=3), "bad": rng.normal(size=2)}, tol=1e-6)
    assert not report.passed
    assert report.failures == ["bad"]
    assert report.worst[0] == "bad"
