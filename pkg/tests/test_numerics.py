import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clode import numerics as nx
from clode.numerics import Tensor, NumericsError


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)))


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


# --- forward ops -----------------------------------------------------------


def test_matmul_hand_arithmetic():
    out = nx.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_softplus_at_zero():
    assert nx.softplus(Tensor(0.0)).item() == pytest.approx(math.log(2.0), abs=1e-12)


def test_concat_axis0():
    np.testing.assert_array_equal(nx.concat([Tensor([1.0, 2.0]), Tensor([3.0])]).data, [1.0, 2.0, 3.0])


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(NumericsError, match=r"\(2, 3\).*\(4,\)"):
        nx.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(4)))
    with pytest.raises(NumericsError, match="matmul"):
        nx.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


@pytest.mark.parametrize(
    "op, arg",
    [(nx.log, -1.0), (nx.log, 0.0), (nx.exp, 1000.0), (nx.sqrt, -1.0)],
)
def test_non_finite_results_fail_fast(op, arg):
    with pytest.raises(NumericsError, match="non-finite"):
        op(Tensor(arg))


def test_scalar_broadcast():
    out = Tensor([1.0, 2.0]) * 3.0 + 1.0
    np.testing.assert_array_equal(out.data, [4.0, 7.0])


def test_sigmoid_is_stable_for_large_inputs():
    out = nx.sigmoid(Tensor([-800.0, 0.0, 800.0]))
    np.testing.assert_allclose(out.data, [0.0, 0.5, 1.0])


# --- backward --------------------------------------------------------------


def test_backward_square_sum():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    g = nx.backward((x * x).sum())
    np.testing.assert_array_equal(g[x].data, [2.0, 4.0, 6.0])


def test_backward_constant_loss_gives_empty_map():
    assert len(nx.backward(Tensor(3.0))) == 0


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(NumericsError, match="scalar"):
        nx.backward(x * 2.0)


def test_unreachable_leaf_maps_to_zero():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([[5.0]], requires_grad=True)
    g = nx.backward(x.sum())
    assert y not in g
    np.testing.assert_array_equal(g[y].data, [[0.0]])


@pytest.mark.parametrize("k", [1, 2, 5])
def test_gradient_accumulates_over_reuse(k):
    x = Tensor([0.5, -1.5], requires_grad=True)
    total = x
    for _ in range(k - 1):
        total = total + x
    g = nx.backward((total * 1.0).sum())
    np.testing.assert_array_equal(g[x].data, [float(k), float(k)])


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with nx.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.node is None


def test_finite_diff_examples():
    g = nx.finite_diff_grad(lambda t: t.sum(), Tensor([0.3, -2.0, 7.0]))
    np.testing.assert_allclose(g.data, [1.0, 1.0, 1.0], rtol=1e-9)
    g = nx.finite_diff_grad(lambda t: (t * t).sum(), Tensor([1.0, -1.0]))
    np.testing.assert_allclose(g.data, [2.0, -2.0], atol=1e-8)


def test_finite_diff_rejects_bad_eps():
    with pytest.raises(NumericsError):
        nx.finite_diff_grad(lambda t: t.sum(), Tensor([1.0]), eps=0.0)


# every op in the family against central differences (eps 1e-6, rel 1e-4)
_UNARY = {
    "tanh": nx.tanh,
    "sigmoid": nx.sigmoid,
    "exp": nx.exp,
    "softplus": nx.softplus,
    "square": nx.square,
    "log": lambda t: nx.log(nx.square(t) + 0.5),
    "sqrt": lambda t: nx.sqrt(nx.square(t) + 0.5),
    "negate": lambda t: -t,
    "sum_axis": lambda t: t.sum(axis=1),
    "mean": lambda t: t.mean(axis=0),
    "slice": lambda t: t[1:, ::2],
    "fancy_index": lambda t: t[[0, 0, 2]],
    "reshape": lambda t: t.reshape(-1),
    "concat": lambda t: nx.concat([t, t * 2.0], axis=1),
    "stack": lambda t: nx.stack([t, nx.tanh(t)], axis=1),
}


@pytest.mark.parametrize("name", sorted(_UNARY))
def test_unary_ops_match_finite_differences(name):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    x = leaf(rng, 3, 4)
    w = rng.normal(size=_UNARY[name](Tensor(x.data)).shape)

    def f(t):
        return (_UNARY[name](t) * w).sum()

    g = nx.backward(f(x))[x].data
    fd = nx.finite_diff_grad(f, x, eps=1e-6).data
    assert rel_err(g, fd) <= 1e-4


_BINARY = {
    "add": nx.add,
    "subtract": nx.subtract,
    "multiply": nx.multiply,
    "divide": lambda a, b: nx.divide(a, nx.square(b) + 1.0),
}


@pytest.mark.parametrize("name", sorted(_BINARY))
@pytest.mark.parametrize("shape_b", [(3, 4), (4,), (1, 4), ()])
def test_binary_ops_match_finite_differences(name, shape_b):
    rng = np.random.default_rng(7)
    a, b = leaf(rng, 3, 4), leaf(rng, *shape_b)
    w = rng.normal(size=(3, 4))
    op = _BINARY[name]
    ga = nx.backward((op(a, b) * w).sum())
    fa = nx.finite_diff_grad(lambda t: (op(t, Tensor(b.data)) * w).sum(), a)
    fb = nx.finite_diff_grad(lambda t: (op(Tensor(a.data), t) * w).sum(), b)
    assert rel_err(ga[a].data, fa.data) <= 1e-4
    assert rel_err(ga[b].data, fb.data) <= 1e-4


def test_matmul_and_linear_gradients():
    rng = np.random.default_rng(1)
    x, w, b = leaf(rng, 2, 3, 4), leaf(rng, 4, 5), leaf(rng, 5)
    for fn in (lambda x_, w_, b_: nx.matmul(x_, w_) + b_, lambda x_, w_, b_: nx.linear(x_, w_, b_, "tanh")):
        g = nx.backward(fn(x, w, b).sum())
        for target in (x, w, b):
            def f(t, target=target):
                args = [Tensor(x.data), Tensor(w.data), Tensor(b.data)]
                args[[x, w, b].index(target)] = t
                return fn(*args).sum()

            assert rel_err(g[target].data, nx.finite_diff_grad(f, target).data) <= 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.integers(1, 4))
def test_random_expression_gradients(seed, n, m):
    rng = np.random.default_rng(seed)
    x = leaf(rng, n, m)
    w = Tensor(rng.normal(size=(m, 2)))

    def f(t):
        h = nx.tanh(nx.matmul(t, w))
        return (nx.softplus(h) * nx.sigmoid(h) + nx.square(h)).mean()

    assert rel_err(nx.backward(f(x))[x].data, nx.finite_diff_grad(f, x).data) <= 1e-4


def test_forward_is_bit_identical():
    rng = np.random.default_rng(0)
    p = nx.init_mlp([5, 7, 7, 3], rng)
    x = rng.normal(size=(4, 5))
    a = nx.mlp_forward(p, x).data
    b = nx.mlp_forward(p, x).data
    assert a.tobytes() == b.tobytes()


# --- MLP / GRU -------------------------------------------------------------


def test_mlp_identity_layer():
    p = nx.MlpParams([Tensor(np.eye(3))], [Tensor(np.zeros(3))])
    x = np.array([[1.0, -2.0, 0.5]])
    np.testing.assert_array_equal(nx.mlp_forward(p, x).data, x)


def test_mlp_zero_params_give_zero():
    p = nx.init_mlp([4, 6, 6, 2], np.random.default_rng(0))
    for w, b in zip(p.weights, p.biases):
        w.data[:] = 0.0
        b.data[:] = 0.0
    np.testing.assert_array_equal(nx.mlp_forward(p, np.ones((3, 4))).data, np.zeros((3, 2)))


def test_mlp_batch_rows_match_single_calls():
    rng = np.random.default_rng(3)
    p = nx.init_mlp([3, 8, 8, 2], rng)
    x = rng.normal(size=(2, 3))
    batch = nx.mlp_forward(p, x).data
    for i in range(2):
        np.testing.assert_allclose(batch[i], nx.mlp_forward(p, x[i]).data, rtol=0, atol=1e-14)


def test_mlp_dimension_checks():
    rng = np.random.default_rng(0)
    p = nx.init_mlp([3, 4, 2], rng)
    with pytest.raises(NumericsError, match="input dim"):
        nx.mlp_forward(p, np.zeros(5))
    with pytest.raises(NumericsError, match="out-dim"):
        nx.MlpParams([Tensor(np.zeros((3, 4))), Tensor(np.zeros((5, 2)))], [Tensor(np.zeros(4)), Tensor(np.zeros(2))])


def test_mlp_init_bounds():
    p = nx.init_mlp([16, 64, 2], np.random.default_rng(0))
    assert np.all(np.abs(p.weights[0].data) <= 1 / 4)
    assert np.all(np.abs(p.weights[1].data) <= 1 / 8)
    assert all(np.all(b.data == 0) for b in p.biases)


def _gru(rng, n_in=3, h=4):
    return nx.init_gru(n_in, h, rng)


def test_gru_closed_update_gate_keeps_hidden():
    rng = np.random.default_rng(0)
    p = _gru(rng)
    p.b_update.data[:] = -60.0
    h = rng.normal(size=(2, 4)) * 0.5
    out = nx.gru_cell(p, h, rng.normal(size=(2, 3)))
    np.testing.assert_allclose(out.data, h, atol=1e-20)


def test_gru_open_gates_give_candidate():
    rng = np.random.default_rng(1)
    p = _gru(rng)
    p.b_update.data[:] = 60.0
    p.b_reset.data[:] = 60.0
    h = rng.normal(size=4)
    x = rng.normal(size=3)
    out = nx.gru_cell(p, h, x)
    pre = x @ p.w_cand.data + h @ p.u_cand.data + p.b_cand.data
    np.testing.assert_allclose(out.data, np.tanh(pre), atol=1e-20)


def test_gru_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    p = _gru(rng)
    h = Tensor(rng.normal(size=(2, 4)))
    x = leaf(rng, 2, 3)
    g = nx.backward(nx.gru_cell(p, h, x).sum())[x].data
    fd = nx.finite_diff_grad(lambda t: nx.gru_cell(p, h, t).sum(), x).data
    assert rel_err(g, fd) <= 1e-4


def test_gru_dimension_checks():
    p = _gru(np.random.default_rng(0))
    with pytest.raises(NumericsError, match="hidden dim"):
        nx.gru_cell(p, np.zeros(5), np.zeros(3))
    with pytest.raises(NumericsError, match="input dim"):
        nx.gru_cell(p, np.zeros(4), np.zeros(2))
