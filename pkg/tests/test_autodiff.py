import numpy as np
import pytest

from sizeshift import autodiff as ad
from sizeshift.autodiff import Tape, Tensor
from sizeshift.graphs import AttributedGraph, build_csr

from conftest import make_random_graph


def _check_unary(op, shape, rng, tol=1e-5, positive=False, **kwargs):
    vals = rng.normal(size=shape)
    if positive:
        vals = np.abs(vals) + 0.5
    x = Tensor(vals, requires_grad=True)
    err = ad.gradient_check(lambda: ad.sum_all(op(x, **kwargs)), [x])
    assert err < tol, f"{op.__name__} gradcheck error {err}"


def test_primitive_gradients():
    rng = np.random.default_rng(0)
    _check_unary(ad.tanh, (4, 3), rng)
    _check_unary(ad.reciprocal, (4, 3), rng, positive=True)
    _check_unary(ad.elementwise_pow, (4, 3), rng, k=3)
    _check_unary(ad.sqrt_eps, (4, 3), rng, positive=True)
    _check_unary(ad.row_mean, (5, 3), rng)
    _check_unary(ad.rowwise_sum, (5, 3), rng)
    # relu away from the kink
    x = Tensor(rng.normal(size=(4, 3)) + np.sign(rng.normal(size=(4, 3))) * 0.5, requires_grad=True)
    assert ad.gradient_check(lambda: ad.sum_all(ad.relu(x)), [x]) < 1e-5


def test_binary_gradients_with_broadcast():
    rng = np.random.default_rng(1)
    a = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    row = Tensor(rng.normal(size=(3,)), requires_grad=True)
    scalar = Tensor(np.asarray(0.7), requires_grad=True)
    for expr in (
        lambda: ad.sum_all(a + row),
        lambda: ad.sum_all(a - row),
        lambda: ad.sum_all(a * row),
        lambda: ad.sum_all(a * scalar),
        lambda: ad.sum_all((a + scalar) * row),
    ):
        assert ad.gradient_check(expr, [a, row, scalar]) < 1e-5


def test_matmul_gradient_and_shape_error():
    rng = np.random.default_rng(2)
    a = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    assert ad.gradient_check(lambda: ad.sum_all(a @ b), [a, b]) < 1e-5
    with pytest.raises(ValueError):
        _ = b @ a


def test_tanh_relu_values():
    assert ad.tanh(Tensor(0.0)).item() == 0.0
    x = Tensor(np.asarray(0.0), requires_grad=True)
    with Tape():
        grads = ad.backward(ad.tanh(x))
    assert grads[x] == pytest.approx(1.0)
    assert ad.relu(Tensor(-2.0)).item() == 0.0
    assert ad.relu(Tensor(3.0)).item() == 3.0
    for v, expected in ((-2.0, 0.0), (3.0, 1.0)):
        x = Tensor(np.asarray(v), requires_grad=True)
        with Tape():
            grads = ad.backward(ad.relu(x))
        assert grads[x] == pytest.approx(expected)


def test_pow_rejects_bad_exponent():
    with pytest.raises(ValueError):
        ad.elementwise_pow(Tensor(np.ones(2)), 0)
    with pytest.raises(ValueError):
        ad.elementwise_pow(Tensor(np.ones(2)), 2.5)


def test_weighted_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((1, 2)), requires_grad=True)
    loss = ad.weighted_softmax_cross_entropy(logits, np.array([0]), np.array([1.0, 1.0]))
    assert loss.item() == pytest.approx(np.log(2.0))


def test_weighted_cross_entropy_gradient():
    rng = np.random.default_rng(3)
    logits = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    labels = np.array([0, 2, 1, 1, 0])
    weights = np.array([1.0, 2.0, 0.5])
    err = ad.gradient_check(
        lambda: ad.weighted_softmax_cross_entropy(logits, labels, weights), [logits]
    )
    assert err < 1e-5


def test_dropout_inverted_scaling():
    rng = np.random.default_rng(4)
    x = Tensor(np.ones((200, 50)))
    out = ad.dropout(x, 0.3, np.random.default_rng(0), train=True)
    kept = out.values[out.values != 0]
    assert np.allclose(kept, 1.0 / 0.7)
    # eval mode is the identity
    same = ad.dropout(x, 0.3, rng, train=False)
    assert same is x


def test_sum_backward_all_ones():
    w = Tensor(np.zeros((2, 2)), requires_grad=True)
    with Tape():
        grads = ad.backward(ad.sum_all(w))
    assert np.array_equal(grads[w], np.ones((2, 2)))


def test_elementwise_square_backward():
    w = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
    with Tape():
        grads = ad.backward(ad.sum_all(w * w))
    assert np.allclose(grads[w], [[2.0, 4.0], [6.0, 8.0]])


def test_backward_accumulates_shared_inputs():
    x = Tensor(np.array(3.0), requires_grad=True)
    with Tape():
        y = x * x + x
        grads = ad.backward(y)
    assert grads[x] == pytest.approx(7.0)


def test_backward_requires_scalar_and_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        y = x * 2.0
        with pytest.raises(ValueError):
            ad.backward(y)
    loose = Tensor(np.asarray(1.0), requires_grad=True)
    with pytest.raises(ValueError):
        ad.backward(loose)


def test_segment_mean_and_expand():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(7, 2)), requires_grad=True)
    offsets = np.array([0, 3, 4, 7])
    out = ad.segment_mean(x, offsets)
    assert np.allclose(out.values[0], x.values[:3].mean(axis=0))
    assert np.allclose(out.values[1], x.values[3])
    mixer = Tensor(rng.normal(size=(3, 2)))
    assert ad.gradient_check(lambda: ad.sum_all(ad.segment_mean(x, offsets) * mixer), [x]) < 1e-5
    s = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    expanded = ad.segment_expand(s, offsets)
    assert expanded.values.shape == (7, 2)
    assert ad.gradient_check(lambda: ad.sum_all(ad.elementwise_pow(ad.segment_expand(s, offsets), 2)), [s]) < 1e-5


def test_row_slice_gradient():
    rng = np.random.default_rng(6)
    x = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
    err = ad.gradient_check(
        lambda: ad.sum_all(ad.elementwise_pow(ad.row_slice(x, 2, 5), 2)), [x]
    )
    assert err < 1e-5


def test_neighbor_aggregate_sum_matches_dense():
    rng = np.random.default_rng(7)
    for _ in range(10):
        n = int(rng.integers(1, 21))
        g = make_random_graph(rng, n, 0.3, 4, connected=False)
        adj = build_csr(g)
        dense = np.zeros((n, n))
        for u, v in g.edges:
            dense[u, v] = dense[v, u] = 1.0
        h = rng.normal(size=(n, 4))
        out = ad.neighbor_aggregate(Tensor(h), adj, "sum")
        assert np.allclose(out.values, dense @ h)


def test_neighbor_aggregate_isolated_node():
    g = AttributedGraph(1, (), np.ones((1, 2)))
    adj = build_csr(g)
    h = Tensor(np.array([[2.0, -1.0]]))
    assert np.allclose(ad.neighbor_aggregate(h, adj, "sum").values, 0.0)
    # with a self-loop of degree 1 the node keeps its own row
    assert np.allclose(ad.neighbor_aggregate(h, adj, "sym_norm").values, h.values)


def test_neighbor_aggregate_sym_norm_path():
    # path 0-1-2 with unit features; degrees with self-loops are 2, 3, 2
    g = AttributedGraph(3, ((0, 1), (1, 2)), np.ones((3, 1)))
    adj = build_csr(g)
    out = ad.neighbor_aggregate(Tensor(np.ones((3, 1))), adj, "sym_norm")
    end = 1.0 / 2.0 + 1.0 / np.sqrt(6.0)
    center = 1.0 / 3.0 + 2.0 / np.sqrt(6.0)
    assert np.allclose(out.values[:, 0], [end, center, end])


def test_neighbor_aggregate_gradient_both_modes():
    rng = np.random.default_rng(8)
    g = make_random_graph(rng, 6, 0.5, 3)
    adj = build_csr(g)
    h = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
    for mode in ("sum", "sym_norm"):
        err = ad.gradient_check(
            lambda: ad.sum_all(ad.elementwise_pow(ad.neighbor_aggregate(h, adj, mode), 2)), [h]
        )
        assert err < 1e-5


def test_neighbor_aggregate_row_mismatch():
    g = AttributedGraph(3, ((0, 1),), np.ones((3, 1)))
    with pytest.raises(ValueError):
        ad.neighbor_aggregate(Tensor(np.ones((2, 1))), build_csr(g), "sum")


def test_gradient_check_constant():
    x = Tensor(np.ones(3), requires_grad=True)
    c = Tensor(np.asarray(5.0))
    assert ad.gradient_check(lambda: c * 1.0, [x]) == 0.0


def test_gradient_check_quadratic_tight():
    rng = np.random.default_rng(9)
    a = rng.normal(size=(4, 4))
    q = a @ a.T + np.eye(4)
    x = Tensor(rng.normal(size=(4, 1)), requires_grad=True)

    def quad():
        qx = Tensor(q) @ x
        return ad.sum_all(x * qx)

    assert ad.gradient_check(quad, [x]) < 1e-7


def test_replay_bitwise_deterministic():
    rng_vals = np.random.default_rng(10).normal(size=(5, 4))

    def run():
        x = Tensor(rng_vals, requires_grad=True)
        drop_rng = np.random.default_rng(42)
        with Tape():
            y = ad.dropout(ad.tanh(x @ Tensor(np.eye(4))), 0.5, drop_rng, train=True)
            loss = ad.sum_all(y)
            ad.backward(loss)
        return loss.values.tobytes(), x.grad.tobytes()

    assert run() == run()
