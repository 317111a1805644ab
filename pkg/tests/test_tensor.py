import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from siamav.tensor import (
    ConfigError,
    ShapeError,
    Tensor,
    backward,
    concat,
    finite_diff_check,
    gelu,
    graph,
    layer_norm,
    linear,
    log_softmax,
    matmul,
    multi_head_attention,
    no_grad,
    softmax,
    stop_gradient,
    take_rows,
)


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# -- matmul ------------------------------------------------------------------


def test_matmul_identity_and_zero(rng):
    b = rng.standard_normal((3, 2))
    assert np.array_equal(matmul(t64(np.eye(3)), t64(b)).data, b)
    assert np.array_equal(matmul(t64(np.zeros((2, 3))), t64(b)).data, np.zeros((2, 2)))


def test_matmul_triple_loop_oracle(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    want = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            want[i, j] = math.fsum(a[i, k] * b[k, j] for k in range(4))
    got = matmul(t64(a), t64(b)).data
    assert np.all(np.abs(got - want) <= 1e-6 * np.maximum(1, np.abs(want)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))


# -- softmax -------------------------------------------------------------------


def test_softmax_uniform_and_shift():
    assert np.allclose(softmax(t64([5.0, 5.0, 5.0])).data, 1 / 3, atol=1e-15)
    x = np.array([0.3, -1.2, 2.0])
    assert np.allclose(softmax(t64(x + 1e3)).data, softmax(t64(x)).data, atol=1e-12)


def test_softmax_extended_precision_oracle():
    getcontext().prec = 50
    e = [Decimal(v).exp() for v in (1, 2, 3)]
    want = [float(v / sum(e)) for v in e]
    got = softmax(t64([1.0, 2.0, 3.0])).data
    assert np.allclose(got, want, rtol=0, atol=1e-15)
    assert np.allclose(got, [0.0900, 0.2447, 0.6652], atol=1e-4)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_is_a_distribution(xs):
    p = softmax(t64(xs)).data
    assert np.all(p >= 0) and np.all(p <= 1)
    assert abs(p.sum() - 1) <= 1e-7


# -- layer norm ----------------------------------------------------------------


def test_layer_norm_constant_row_and_zero_gamma(rng):
    ones, zeros = t64(np.ones(4)), t64(np.zeros(4))
    assert np.array_equal(layer_norm(t64(np.full((2, 4), 3.0)), ones, zeros).data, np.zeros((2, 4)))
    beta = rng.standard_normal(4)
    out = layer_norm(t64(rng.standard_normal((3, 4))), zeros, t64(beta)).data
    assert np.array_equal(out, np.broadcast_to(beta, (3, 4)))


def test_layer_norm_two_pass_oracle(rng):
    x = rng.standard_normal(8) * 3 + 1
    g, b = rng.standard_normal(8), rng.standard_normal(8)
    mean = math.fsum(x) / 8
    var = math.fsum((v - mean) ** 2 for v in x) / 8
    want = (x - mean) / math.sqrt(var + 1e-5) * g + b
    assert np.allclose(layer_norm(t64(x), t64(g), t64(b)).data, want, rtol=0, atol=1e-6)


# -- attention -----------------------------------------------------------------


def naive_attention(q, k, v, heads):
    t, d = q.shape
    dh = d // heads
    out = np.zeros_like(q)
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(t):
            s = np.array([np.dot(q[i, sl], k[j, sl]) / math.sqrt(dh) for j in range(k.shape[0])])
            w = np.exp(s - s.max())
            w /= w.sum()
            out[i, sl] = sum(w[j] * v[j, sl] for j in range(k.shape[0]))
    return out


def test_attention_naive_oracle(rng):
    q, k, v = (rng.standard_normal((4, 6)) for _ in range(3))
    got = multi_head_attention(t64(q), t64(k), t64(v), 2).data
    assert np.allclose(got, naive_attention(q, k, v, 2), rtol=0, atol=1e-5)


def test_attention_single_token_returns_projected_v(rng):
    q, k, v = (rng.standard_normal((1, 1, 4)) for _ in range(3))
    w, b = rng.standard_normal((4, 4)), rng.standard_normal(4)
    got = multi_head_attention(t64(q), t64(k), t64(v), 2, t64(w), t64(b)).data
    assert np.allclose(got, v @ w.T + b, atol=1e-12)


def test_attention_permutation_equivariance(rng):
    x = rng.standard_normal((5, 8))
    perm = rng.permutation(5)
    a = multi_head_attention(t64(x), t64(x), t64(x), 4).data
    b = multi_head_attention(t64(x[perm]), t64(x[perm]), t64(x[perm]), 4).data
    assert np.allclose(a[perm], b, atol=1e-12)


def test_attention_heads_must_divide_width():
    x = t64(np.ones((2, 6)))
    with pytest.raises(ConfigError):
        multi_head_attention(x, x, x, 4)


def test_attention_key_bias_hides_keys(rng):
    q, k, v = (rng.standard_normal((1, 3, 4)) for _ in range(3))
    bias = np.array([[0.0, 0.0, -1e9]])
    got = multi_head_attention(t64(q), t64(k), t64(v), 1, key_bias=bias).data
    want = multi_head_attention(t64(q), t64(k[:, :2]), t64(v[:, :2]), 1).data
    assert np.allclose(got, want, atol=1e-12)


# -- stop gradient and backward ----------------------------------------------------


def test_stop_gradient_forward_is_bitwise(rng):
    x = t64(rng.standard_normal(5), grad=True)
    assert stop_gradient(x).data.tobytes() == x.data.tobytes()


def test_stop_gradient_blocks_exactly(rng):
    x = t64(rng.standard_normal(5), grad=True)
    backward((stop_gradient(x) ** 2).sum() + x.sum() * 0.0)
    assert np.array_equal(x.grad, np.zeros(5))


def test_stop_gradient_hand_derivative(rng):
    x = t64(rng.standard_normal(5), grad=True)
    backward((x * stop_gradient(x)).sum())
    assert np.array_equal(x.grad, x.data)


def test_backward_square_and_softmax_sum(rng):
    x = t64(rng.standard_normal(6), grad=True)
    backward((x * x).sum())
    assert np.array_equal(x.grad, 2 * x.data)
    y = t64(rng.standard_normal((2, 6)), grad=True)
    backward(softmax(y, axis=1).sum())
    assert np.allclose(y.grad, 0, atol=1e-15)


def test_backward_needs_scalar():
    x = t64(np.ones(3), grad=True)
    with pytest.raises(ShapeError):
        backward(x * 2)


def test_graph_visits_each_node_once(rng):
    x = t64(rng.standard_normal(3), grad=True)
    y = x * x
    z = (y + y * x).sum()
    nodes = graph(z)
    assert len(nodes) == len({id(n) for n in nodes})
    backward(z)
    assert np.allclose(x.grad, 2 * x.data + 3 * x.data**2)


def test_no_grad_builds_no_graph(rng):
    x = t64(rng.standard_normal(3), grad=True)
    with no_grad():
        y = (x * x).sum()
    assert not y.requires_grad


def test_dtype_mismatch_is_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.ones(2, np.float32)) + Tensor(np.ones(2, np.float64))


def test_ops_are_deterministic(rng):
    q = rng.standard_normal((2, 5, 8))
    a = multi_head_attention(t64(q), t64(q), t64(q), 2).data
    b = multi_head_attention(t64(q), t64(q), t64(q), 2).data
    assert a.tobytes() == b.tobytes()


# -- finite differences ----------------------------------------------------------


def test_finite_diff_quadratic(rng):
    x = t64(rng.standard_normal(5))
    assert finite_diff_check(lambda t: (t * t * 3.0).sum(), x) <= 1e-9


def test_finite_diff_layer_norm_composite(rng):
    g, b = t64(rng.standard_normal(6)), t64(rng.standard_normal(6))
    w = rng.standard_normal((3, 6))
    x = t64(rng.standard_normal((3, 6)))
    assert finite_diff_check(lambda t: (layer_norm(t, g, b) * w).sum(), x) <= 1e-6


def test_finite_diff_attention_block(rng):
    w = rng.standard_normal((3, 8))
    wo, bo = t64(rng.standard_normal((8, 8)) * 0.3), t64(rng.standard_normal(8))
    x = t64(rng.standard_normal((3, 8)))
    f = lambda t: (multi_head_attention(t, t * 0.5, t, 2, wo, bo) * w).sum()  # noqa: E731
    assert finite_diff_check(f, x) <= 1e-6


def test_finite_diff_needs_f64():
    with pytest.raises(ConfigError):
        finite_diff_check(lambda t: t.sum(), Tensor(np.ones(2, np.float32)))


OPS = {
    "add": lambda x, c: (x + c * x).sum(),
    "sub": lambda x, c: ((c - x) * x).sum(),
    "div": lambda x, c: (c / (x * x + 1.0)).sum(),
    "exp_log": lambda x, c: ((x * 0.3).exp() + (x * x + 0.5).log() * c).sum(),
    "sqrt_tanh": lambda x, c: ((x * x + 1.0).sqrt() * (x * c).tanh()).sum(),
    "pow": lambda x, c: ((x * x + 1.0) ** 1.5 * c).sum(),
    "mean_axis": lambda x, c: (x.mean(axis=1, keepdims=True) * x * c).sum(),
    "reshape_T": lambda x, c: (x.reshape(-1).reshape(x.shape).T @ (x * c)).sum(),
    "getitem": lambda x, c: (x[0] * x[1:].sum(axis=0) + x[:, [0, 0]].sum() * c[0, 0]).sum(),
    "linear": lambda x, c: linear(x, x.T[:2] * 0.5, x[0, :2]).sum() * c[0, 0],
    "softmax": lambda x, c: (softmax(x, axis=1) * c).sum(),
    "log_softmax": lambda x, c: (log_softmax(x, axis=0) * c).sum(),
    "gelu": lambda x, c: (gelu(x) * c).sum(),
    "concat_take": lambda x, c: (take_rows(concat([x, x * 2.0], axis=0), np.array([[0, 3], [3, 1]])) * c[0, 0]).sum(),
}


@pytest.mark.parametrize("name", sorted(OPS))
@given(seed=st.integers(0, 2**31 - 1))
def test_op_gradients_match_central_differences(name, seed):
    r = np.random.default_rng(seed)
    x = t64(r.standard_normal((3, 3)))
    c = r.standard_normal((3, 3))
    assert finite_diff_check(lambda t: OPS[name](t, c), x) <= 1e-6
