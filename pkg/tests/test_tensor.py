import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import adam_scalar, central_diff, float_triple_loop, gelu_tanh_scalar, rel_err
from q4fg import tensor as T
from q4fg.exceptions import DimensionError, TrainingError
from q4fg.tensor import Tensor, backward

RNG = np.random.default_rng(1234)


def grad_check(build, *arrays, h=1e-3, tol=1e-3):
    """Compare backward() against central differences of ``sum(build(...) * probe)``."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out = build(*[Tensor(a, dtype=np.float64) for a in arrays])
    probe = np.random.default_rng(7).standard_normal(out.shape)

    def f(*arrs):
        with T.no_grad():
            return float((build(*[Tensor(a, dtype=np.float64) for a in arrs]).data * probe).sum())

    leaves = [Tensor(a.copy(), requires_grad=True, dtype=np.float64) for a in arrays]
    loss = T.sum_(T.mul(build(*leaves), Tensor(probe, dtype=np.float64)))
    backward(loss)
    numeric = central_diff(f, arrays, h=h)
    for leaf, num in zip(leaves, numeric):
        assert leaf.grad is not None
        assert rel_err(leaf.grad, num) < tol


def r(*shape):
    return RNG.standard_normal(shape)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def test_matmul_identity_and_hand_case():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), m).data, m.data)
    assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop_in_float64():
    a, b = r(5, 7), r(7, 3)
    got = T.matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).data
    assert np.allclose(got, float_triple_loop(a, b), rtol=0, atol=1e-12)


def test_matmul_integer_valued_exact():
    a = RNG.integers(-8, 8, (5, 7)).astype(np.float64)
    b = RNG.integers(-8, 8, (7, 3)).astype(np.float64)
    assert np.array_equal(T.matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).data,
                          float_triple_loop(a, b))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


# ---------------------------------------------------------------------------
# layer norm, gelu, softmax, attention
# ---------------------------------------------------------------------------

def test_layer_norm_examples():
    one, zero = Tensor(np.ones(4)), Tensor(np.zeros(4))
    out = T.layer_norm(Tensor([[5.0, 5.0, 5.0, 5.0]]), one, zero)
    assert np.array_equal(out.data, np.zeros((1, 4), dtype=np.float32))
    x = np.array([1.0, 2.0, 3.0, 4.0])
    out = T.layer_norm(Tensor(x[None], dtype=np.float64), Tensor(np.ones(4), dtype=np.float64),
                       Tensor(np.zeros(4), dtype=np.float64)).data[0]
    assert abs(out.mean()) < 1e-5 and abs(out.var() - 1) < 1e-4
    out = T.layer_norm(Tensor(x[None]), Tensor(np.zeros(4)), Tensor(np.full(4, 7.0)))
    assert np.all(out.data == 7.0)


def test_layer_norm_empty_dim():
    with pytest.raises(DimensionError):
        T.layer_norm(Tensor(np.zeros((2, 0))), Tensor(np.zeros(0)), Tensor(np.zeros(0)))


@given(st.integers(2, 32), st.integers(0, 10_000))
def test_layer_norm_normalizes_slices(h, seed):
    x = np.random.default_rng(seed).standard_normal((3, h)) * 5 + 2
    out = T.layer_norm(Tensor(x, dtype=np.float64), Tensor(np.ones(h), dtype=np.float64),
                       Tensor(np.zeros(h), dtype=np.float64)).data
    assert np.all(np.abs(out.mean(-1)) < 1e-5)
    var = out.var(-1)
    # eps shrinks the variance of low-variance slices slightly
    assert np.all(np.abs(var - x.var(-1) / (x.var(-1) + 1e-5)) < 1e-9)
    wide = x.var(-1) > 0.1  # eps / var < 1e-4
    assert np.all(np.abs(var[wide] - 1) < 1e-4)


def test_gelu_examples():
    assert T.gelu(Tensor([0.0])).data[0] == 0.0
    assert abs(T.gelu(Tensor([12.0], dtype=np.float64)).data[0] - 12.0) < 1e-4
    got = T.gelu(Tensor([1.0], dtype=np.float64)).data[0]
    assert abs(got - gelu_tanh_scalar(1.0)) < 1e-6
    assert abs(T.gelu(Tensor([1.0])).data[0] - gelu_tanh_scalar(1.0)) < 1e-6


def test_gelu_monotone_on_grid():
    xs = np.linspace(-0.75, 8, 2001)
    ys = T.gelu(Tensor(xs, dtype=np.float64)).data
    assert np.all(np.diff(ys) > 0)


def _qkv(b, h, tq, tk, d, seed=0):
    g = np.random.default_rng(seed)
    return (Tensor(g.standard_normal((b, h, tq, d)), dtype=np.float64),
            Tensor(g.standard_normal((b, h, tk, d)), dtype=np.float64),
            Tensor(g.standard_normal((b, h, tk, d)), dtype=np.float64))


def test_attention_examples():
    q, k, v = _qkv(1, 1, 1, 1, 4)
    _, _, probs, _ = T.softmax_attention(q, k, v)
    assert probs.data.reshape(-1).tolist() == [1.0]
    q, k, v = _qkv(1, 1, 2, 2, 4)
    _, _, probs, _ = T.softmax_attention(q, k, v, "causal")
    assert probs.data[0, 0, 0].tolist() == [1.0, 0.0]
    u = Tensor(np.ones((1, 2, 5, 4)))
    _, _, probs, _ = T.softmax_attention(u, u, u)
    assert np.allclose(probs.data, 1 / 5)


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 1000))
def test_attention_rows_sum_to_one_and_causal_zero(tq, tk, seed):
    q, k, v = _qkv(2, 2, tq, tk, 3, seed)
    _, _, probs, _ = T.softmax_attention(q, k, v, "cross")
    assert np.allclose(probs.data.sum(-1), 1.0, atol=1e-6)
    q, k, v = _qkv(2, 2, tq, tq, 3, seed)
    _, scores, probs, allowed = T.softmax_attention(q, k, v, "causal")
    assert np.all(probs.data[..., ~allowed] == 0.0)
    assert np.all(np.triu(np.ones((tq, tq)), 1).astype(bool) == ~allowed)


def test_attention_errors():
    q, k, v = _qkv(1, 1, 2, 3, 4)
    with pytest.raises(DimensionError):
        T.softmax_attention(q, k, v, "causal")
    with pytest.raises(DimensionError):
        T.softmax_attention(q, Tensor(np.zeros((1, 1, 3, 5))), v)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def test_backward_examples():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward(T.sum_(x))
    assert x.grad.tolist() == [1.0, 1.0]
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward(T.sum_(T.mul(x, x)))
    assert x.grad.tolist() == [2.0, 4.0]


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(DimensionError):
        backward(T.mul(x, 2.0))


def test_tape_visits_shared_nodes_once():
    x = Tensor([3.0], requires_grad=True)
    y = T.mul(x, x)
    z = T.add(y, y)
    tape = T.Tape(z)
    assert len(tape) == len({id(n) for n in tape}) == 3
    backward(T.sum_(z))
    assert x.grad.tolist() == [12.0]


UNARY = {
    "neg": T.neg,
    "exp": T.exp,
    "tanh": T.tanh,
    "pow3": lambda a: T.pow_scalar(a, 3.0),
    "gelu": T.gelu,
    "softmax": lambda a: T.softmax(a, axis=-1),
    "log_softmax": lambda a: T.log_softmax(a, axis=-1),
    "sum_axis": lambda a: T.sum_(a, axis=0, keepdims=True),
    "mean_axis": lambda a: T.mean(a, axis=1),
    "reshape": lambda a: T.reshape(a, (-1,)),
    "transpose": lambda a: T.transpose(a, (1, 0)),
    "getitem": lambda a: T.getitem(a, (slice(None), slice(1, 3))),
    "split": lambda a: T.mul(T.split(a, 2, axis=-1)[1], 3.0),
    "masked_fill": lambda a: T.masked_fill(a, np.eye(3, 4, dtype=bool), -5.0),
    "dropout": lambda a: T.dropout(a, 0.3, np.random.default_rng(3), training=True),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    grad_check(UNARY[name], r(3, 4))


def test_log_gradient():
    grad_check(T.log, np.abs(r(3, 4)) + 0.5)


BINARY = {
    "add_broadcast": lambda a, b: T.add(a, T.reshape(T.getitem(b, 0), (1, 4))),
    "sub": T.sub,
    "mul": T.mul,
    "div": lambda a, b: T.div(a, T.add(T.mul(b, b), 1.0)),
    "matmul": lambda a, b: T.matmul(a, T.transpose(b, (1, 0))),
    "concat": lambda a, b: T.concat([a, T.mul(b, 2.0)], axis=0),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_gradients(name):
    grad_check(BINARY[name], r(3, 4), r(3, 4))


def test_batched_matmul_gradient():
    grad_check(T.matmul, r(2, 3, 4), r(2, 4, 5))


def test_linear_gradient():
    grad_check(T.linear, r(2, 3, 4), r(5, 4), r(5))


def test_layer_norm_gradient():
    grad_check(T.layer_norm, r(3, 6), r(6), r(6))


def test_embedding_and_gather_gradients():
    ids = np.array([[0, 2, 2], [1, 0, 3]])
    grad_check(lambda t: T.embedding(t, ids), r(4, 5))
    grad_check(lambda x: T.gather_last(x, ids), r(2, 3, 4))


def test_cross_entropy_gradient():
    targets = np.array([[1, 0, 3], [2, 2, 0]])
    grad_check(lambda z: T.cross_entropy(z, targets), r(2, 3, 4))


@pytest.mark.parametrize("mode", ["full", "causal"])
def test_attention_gradient(mode):
    def build(q, k, v):
        ctx, scores, probs, _ = T.softmax_attention(q, k, v, mode)
        return T.add(T.sum_(ctx), T.mul(T.sum_(T.mul(probs, probs)), 0.5))

    grad_check(build, r(1, 2, 3, 4), r(1, 2, 3, 4), r(1, 2, 3, 4))


def test_composite_graph_gradient():
    def build(x, w1, w2):
        hid = T.gelu(T.linear(x, w1))
        return T.layer_norm(T.linear(hid, w2), Tensor(np.ones(3), dtype=np.float64),
                            Tensor(np.zeros(3), dtype=np.float64))

    grad_check(build, r(4, 5), r(6, 5), r(3, 6))


def test_no_grad_records_nothing():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad and y._parents == ()


def test_forward_ops_stay_finite():
    x = Tensor(r(4, 8) * 30)
    for fn in (T.gelu, T.tanh, lambda a: T.softmax(a), lambda a: T.log_softmax(a)):
        assert np.all(np.isfinite(fn(x).data))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    state = T.adam_state(p)
    T.adam_step(p, {"w": np.zeros(2)}, state, lr=0.1)
    assert p["w"].data.tolist() == [1.0, -2.0]


def test_adam_matches_scalar_oracle():
    p = {"w": Tensor(np.array([0.5]), dtype=np.float64)}
    state = T.adam_state(p)
    gs = [1.0, -0.3, 2.0, 0.7]
    for g in gs:
        T.adam_step(p, {"w": np.array([g])}, state, lr=0.1)
    assert abs(p["w"].data[0] - adam_scalar(0.5, gs, 0.1)) < 1e-12
    p = {"w": Tensor(np.array([0.0]), dtype=np.float64)}
    T.adam_step(p, {"w": np.array([1.0])}, T.adam_state(p), lr=0.1)
    assert math.isclose(p["w"].data[0], -0.1, rel_tol=1e-7)


def test_adam_deterministic():
    outs = []
    for _ in range(2):
        p = {"w": Tensor(np.linspace(-1, 1, 5))}
        s = T.adam_state(p)
        for _ in range(2):
            T.adam_step(p, {"w": np.full(5, 0.25, dtype=np.float32)}, s, lr=0.01)
        outs.append(p["w"].data.tobytes())
    assert outs[0] == outs[1]


def test_adam_non_finite_gradient_names_parameter():
    p = {"layer.weight": Tensor(np.zeros(2))}
    with pytest.raises(TrainingError, match="layer.weight"):
        T.adam_step(p, {"layer.weight": np.array([1.0, np.nan])}, T.adam_state(p), lr=0.1)
