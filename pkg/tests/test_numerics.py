import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mambasip.numerics import (
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    check_param_gradients,
    finite_difference_gradient,
    ops,
    precision,
    relative_error,
)

finite = st.floats(-5, 5, allow_nan=False, width=64)


def small_arrays(min_side=1, max_side=6, ndim=2):
    shape = st.tuples(*[st.integers(min_side, max_side)] * ndim)
    return shape.flatmap(lambda s: arrays(np.float64, s, elements=finite))


# --- examples -------------------------------------------------------------

def test_softplus_at_zero():
    assert ops.softplus(Tensor([0.0])).item() == pytest.approx(math.log(2), abs=1e-6)


def test_flip_reverses():
    np.testing.assert_array_equal(ops.flip(Tensor([1.0, 2.0, 3.0]), 0).data, [3.0, 2.0, 1.0])


def test_mean_over_time():
    np.testing.assert_array_equal(ops.mean(Tensor([[1.0, 2.0], [3.0, 4.0]]), 0).data, [2.0, 3.0])


def test_backprop_square():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(ops.mul(w, w))
    np.testing.assert_allclose(tape.backward(loss)[w], [2.0, 4.0])


def test_backprop_sigmoid_at_zero():
    x = Tensor([0.0], requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(ops.sigmoid(x))
    assert tape.backward(loss)[x][0] == pytest.approx(0.25)


def test_fd_square():
    g = finite_difference_gradient(lambda x: float(x[0] ** 2), np.array([3.0]), h=1e-5)
    assert abs(g[0] - 6.0) < 1e-7


def test_fd_huber_quadratic_branch():
    f = lambda e: ops.huber(Tensor(e), Tensor(np.zeros(1)), 1.0).item()  # noqa: E731
    assert abs(finite_difference_gradient(f, np.array([0.5]))[0] - 0.5) < 1e-6


def test_huber_values():
    e = Tensor(np.array([0.0, 1.0, 3.0, -3.0]))
    np.testing.assert_allclose(ops.huber(e, Tensor(np.zeros(4)), 1.0).data, [0.0, 0.5, 2.5, 2.5])


def test_gelu_exact_form():
    x = np.linspace(-4, 4, 17)
    want = 0.5 * x * (1 + np.vectorize(math.erf)(x / math.sqrt(2)))
    np.testing.assert_allclose(ops.gelu(Tensor(x)).data, want, rtol=1e-12)


def test_causal_conv_hand_example():
    x = Tensor(np.array([[1.0], [2.0], [3.0]]))
    w = Tensor(np.array([[0.5, 1.0]]))  # taps (t-1, t)
    y = ops.causal_conv1d(x, w, Tensor(np.zeros(1)))
    np.testing.assert_allclose(y.data[:, 0], [1.0, 2.5, 4.0])


# --- tensor and tape mechanics -----------------------------------------------

def test_tensor_is_read_only():
    t = Tensor(np.zeros(3))
    with pytest.raises(ValueError):
        t.data[0] = 1.0


def test_tensor_copies_source():
    src = np.zeros(2)
    t = Tensor(src)
    src[0] = 5.0
    assert t.data[0] == 0.0


def test_default_precision_is_32_bit():
    assert Tensor([1.0]).dtype == np.float32
    with precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64


def test_no_tape_records_nothing():
    w = Tensor([1.0], requires_grad=True)
    y = ops.exp(w)
    with Tape() as tape:
        pass
    assert tape.nodes == [] and y.item() == pytest.approx(math.e)


def test_untracked_ops_are_not_recorded():
    with Tape() as tape:
        ops.exp(Tensor([1.0]))
    assert tape.nodes == []


def test_unused_parameter_gets_zero_gradient():
    a = Tensor([1.0], requires_grad=True)
    b = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(ops.mul(a, a))
    g = tape.gradient(loss, {"a": a, "b": b})
    assert g["b"].tolist() == [0.0]


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = ops.exp(x)
    with pytest.raises(ShapeError):
        tape.backward(y)


def test_gradient_accumulates_over_reuse():
    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(ops.add(ops.mul(x, x), x))
    assert tape.backward(loss)[x][0] == pytest.approx(7.0)


def test_nonfinite_is_rejected_with_context():
    with pytest.raises(NonFiniteError, match="exp"):
        ops.exp(Tensor(np.array([1000.0])))


def test_shape_errors():
    with pytest.raises(ShapeError):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        ops.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ShapeError):
        ops.slice(Tensor(np.ones(3)), 0, 2, 5)


def test_dropout_rate_validated():
    with pytest.raises(ValueError):
        ops.dropout(Tensor(np.ones(3)), 1.0, np.random.default_rng(0))


def test_relative_error_ignores_unprobed():
    assert relative_error(np.array([1.0, 5.0]), np.array([1.0, np.nan])) == 0.0


# --- gradient checks: every primitive, 20 random points each ------------------

PRIMITIVES = {
    "add": ({"a": (3, 4), "b": (4,)}, lambda p: ops.add(p["a"], p["b"])),
    "sub": ({"a": (3, 4), "b": (3, 1)}, lambda p: ops.sub(p["a"], p["b"])),
    "mul": ({"a": (3, 4), "b": (1, 4)}, lambda p: ops.mul(p["a"], p["b"])),
    "scale": ({"a": (5,)}, lambda p: ops.scale(p["a"], -1.7)),
    "matmul": ({"a": (3, 4), "b": (4, 2)}, lambda p: ops.matmul(p["a"], p["b"])),
    "matmul_batched": ({"a": (2, 3, 4), "b": (2, 4, 3)}, lambda p: ops.matmul(p["a"], p["b"])),
    "exp": ({"a": (4,)}, lambda p: ops.exp(p["a"])),
    "sigmoid": ({"a": (4,)}, lambda p: ops.sigmoid(p["a"])),
    "softplus": ({"a": (4,)}, lambda p: ops.softplus(p["a"])),
    "tanh": ({"a": (4,)}, lambda p: ops.tanh(p["a"])),
    "silu": ({"a": (4,)}, lambda p: ops.silu(p["a"])),
    "gelu": ({"a": (4,)}, lambda p: ops.gelu(p["a"])),
    "huber": ({"a": (6,), "b": (6,)}, lambda p: ops.huber(p["a"], p["b"], 0.7)),
    "softmax": ({"a": (3, 5)}, lambda p: ops.softmax(p["a"])),
    "layer_norm": ({"a": (3, 5)}, lambda p: ops.layer_norm(p["a"])),
    "mean": ({"a": (3, 4)}, lambda p: ops.mean(p["a"], 0)),
    "sum": ({"a": (3, 4)}, lambda p: ops.sum(p["a"], 1)),
    "concat": ({"a": (2, 3), "b": (2, 2)}, lambda p: ops.concat([p["a"], p["b"]], 1)),
    "flip": ({"a": (4, 2)}, lambda p: ops.flip(p["a"], 0)),
    "slice": ({"a": (5, 2)}, lambda p: ops.slice(p["a"], 0, 1, 4)),
    "reshape": ({"a": (2, 6)}, lambda p: ops.reshape(p["a"], (3, 4))),
    "swapaxes": ({"a": (2, 3, 4)}, lambda p: ops.swapaxes(p["a"], 0, 2)),
    "causal_conv1d": ({"x": (2, 6, 3), "w": (3, 4), "b": (3,)}, lambda p: ops.causal_conv1d(p["x"], p["w"], p["b"])),
    "dropout": ({"a": (4, 4)}, lambda p: ops.dropout(p["a"], 0.3, np.random.default_rng(5))),
    "linear": ({"x": (3, 4), "w": (4, 2), "b": (2,)}, lambda p: ops.linear(p["x"], p["w"], p["b"])),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    shapes, fn = PRIMITIVES[name]
    with precision(np.float64):
        for point in range(20):
            rng = np.random.default_rng([point, 7])
            params = {k: rng.standard_normal(s) for k, s in shapes.items()}
            weights = np.random.default_rng([point, 8])
            w = {}

            def loss(p):
                y = fn(p)
                if "r" not in w:
                    w["r"] = Tensor(weights.standard_normal(y.shape))
                return ops.sum(ops.mul(y, w["r"]))

            errs = check_param_gradients(loss, params)
            assert max(errs.values()) < 1e-4, (point, errs)


# --- properties -------------------------------------------------------------

@given(small_arrays())
def test_flip_is_an_involution(x):
    t = Tensor(x)
    assert np.array_equal(ops.flip(ops.flip(t, 0), 0).data, x)


@given(small_arrays(min_side=2))
def test_layer_norm_moments(x):
    x = x + np.linspace(0, 1, x.shape[-1])  # avoid all-constant rows
    y = ops.layer_norm(Tensor(x)).data
    var = x.var(axis=-1)
    assert np.all(np.abs(y.mean(axis=-1)) < 1e-6)
    # eps=1e-5 shrinks the variance by var/(var+eps)
    np.testing.assert_allclose(y.var(axis=-1), var / (var + 1e-5), atol=1e-10)
    big = var > 0.1
    assert np.all(np.abs(y.var(axis=-1)[big] - 1.0) < 1e-4)


@given(small_arrays())
def test_softmax_rows_sum_to_one(x):
    y = ops.softmax(Tensor(x * 20)).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(y >= 0)


@given(st.integers(1, 12), st.integers(1, 5), st.integers(0, 11), st.integers(0, 2**31 - 1))
def test_causal_conv_ignores_future(t_len, k, t_cut, seed):
    t_cut = min(t_cut, t_len - 1)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((t_len, 3))
    w, b = Tensor(rng.standard_normal((3, k))), Tensor(rng.standard_normal(3))
    y = ops.causal_conv1d(Tensor(x), w, b).data
    x2 = x.copy()
    x2[t_cut + 1:] += rng.standard_normal(x2[t_cut + 1:].shape) * 10
    y2 = ops.causal_conv1d(Tensor(x2), w, b).data
    assert np.array_equal(y[: t_cut + 1], y2[: t_cut + 1])


@given(small_arrays())
def test_dropout_eval_is_identity(x):
    t = Tensor(x)
    assert ops.dropout(t, 0.3, None) is t


def test_dropout_expectation_matches_eval():
    x = Tensor(np.linspace(1.0, 2.0, 50))
    draws = [ops.dropout(x, 0.3, np.random.default_rng(s)).data for s in range(20000)]
    np.testing.assert_allclose(np.mean(draws, axis=0), x.data, rtol=0.02)


@given(small_arrays(), small_arrays())
def test_unbroadcast_restores_shape(a, b):
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        return
    g = np.ones(shape)
    assert ops.unbroadcast(g, a.shape).shape == a.shape
    assert ops.unbroadcast(g, a.shape).sum() == g.sum()
