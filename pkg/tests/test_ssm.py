import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mambasip.numerics import Tape, Tensor, check_param_gradients, ops, precision
from mambasip.ssm import (
    SelectiveSsmParams,
    blelloch_states,
    combine,
    discretize,
    dt_rank_for,
    init_ssm,
    scan_parallel,
    scan_sequential,
    selective_params,
    selective_scan,
    sequential_states,
    ssm_step,
)

LN2 = math.log(2.0)


def random_params(seed, d=4, n=3, dtype=np.float64, skip=True):
    rng = np.random.default_rng(seed)
    raw = init_ssm(rng, d, n, 2, d_skip=skip)
    raw["a_log"] = raw["a_log"] + rng.normal(0, 0.3, raw["a_log"].shape)
    raw["dt_bias"] = raw["dt_bias"] + 2.0  # larger steps make the test dynamics less trivial
    return SelectiveSsmParams.from_params({k: v.astype(dtype) for k, v in raw.items()})


def loop_oracle(x, params):
    """Frame-by-frame recurrence through ssm_step, from a zero state."""
    h = np.zeros((params.d_inner, params.d_state), dtype=x.dtype)
    ys = []
    for t in range(x.shape[0]):
        h, y = ssm_step(h, x[t], params, t)
        ys.append(y)
    return np.stack(ys)


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-30))


# --- examples -----------------------------------------------------------------

@pytest.mark.parametrize("method", ["sequential", "parallel"])
def test_hand_recurrence(method):
    # D = N = 1, A = -1, B = C = 1, delta = ln 2, no skip, x = [1, 0, 0]
    x = Tensor(np.array([[1.0], [0.0], [0.0]]))
    y = selective_scan(x, Tensor(np.full((3, 1), LN2)), Tensor([[-1.0]]),
                       Tensor(np.ones((3, 1))), Tensor(np.ones((3, 1))), None, method)
    np.testing.assert_allclose(y.data[:, 0], [0.6931, 0.3466, 0.1733], atol=5e-5)
    np.testing.assert_allclose(y.data[:, 0], [LN2, LN2 / 2, LN2 / 4], rtol=1e-6)


def test_selective_params_at_origin():
    p = random_params(0)
    p.dt_bias = np.zeros_like(p.dt_bias)
    b, c, delta = selective_params(np.zeros(p.d_inner), p)
    assert not b.any() and not c.any()
    np.testing.assert_allclose(delta, LN2)


def test_selective_params_basis_vector():
    p = random_params(1)
    p.w_b = np.eye(p.d_inner, p.d_state)
    e1 = np.zeros(p.d_inner)
    e1[0] = 1.0
    b, _, _ = selective_params(e1, p)
    np.testing.assert_array_equal(b, p.w_b[0])


def test_delta_always_positive():
    p = random_params(2)
    x = np.random.default_rng(3).normal(0, 10, (10_000, p.d_inner))
    _, _, delta = selective_params(x, p)
    assert (delta > 0).all()


def test_discretize_examples():
    a_bar, b_bar = discretize(np.array([-1.0]), np.array([1.0]), LN2)
    np.testing.assert_allclose(a_bar, [0.5])
    np.testing.assert_allclose(b_bar, [LN2])
    a_bar, b_bar = discretize(np.array([-1.0, -5.0]), np.array([2.0, 3.0]), 1e-12)
    np.testing.assert_allclose(a_bar, 1.0)
    np.testing.assert_allclose(b_bar, 0.0, atol=1e-11)
    with pytest.raises(ValueError):
        discretize(np.array([-1.0]), np.array([1.0]), 0.0)


def test_ssm_step_zero_dynamics():
    p = random_params(4)
    h, y = ssm_step(np.zeros((p.d_inner, p.d_state)), np.zeros(p.d_inner), p)
    assert not h.any() and not y.any()


def test_zero_input_decays_geometrically():
    p = random_params(5)
    rng = np.random.default_rng(0)
    h = rng.standard_normal((p.d_inner, p.d_state))
    a_bar = np.exp(np.logaddexp(0, p.dt_bias)[:, None] * p.A)
    for _ in range(5):
        h_next, _ = ssm_step(h, np.zeros(p.d_inner), p)
        np.testing.assert_allclose(h_next, a_bar * h, rtol=1e-12)
        h = h_next


def test_t1_equals_single_step():
    p = random_params(6)
    x = np.random.default_rng(1).standard_normal((1, p.d_inner))
    _, y = ssm_step(np.zeros((p.d_inner, p.d_state)), x[0], p)
    np.testing.assert_array_equal(scan_sequential(x, p)[0], y)
    np.testing.assert_array_equal(scan_parallel(x, p), scan_sequential(x, p))


def test_skip_off_gives_plain_readout():
    p = random_params(7, skip=False)
    x = np.random.default_rng(2).standard_normal((9, p.d_inner))
    np.testing.assert_allclose(scan_sequential(x, p), loop_oracle(x, p), rtol=1e-12)


def test_dt_rank():
    assert dt_rank_for(384) == 24
    assert dt_rank_for(8) == 1


# --- equivalence against the loop oracle --------------------------------------

LENGTHS = (1, 2, 3, 64, 65, 257)


@pytest.mark.parametrize("t_len", LENGTHS)
def test_sequential_matches_loop_oracle(t_len):
    p = random_params(t_len)
    x = np.random.default_rng(t_len).standard_normal((t_len, p.d_inner))
    assert rel_err(scan_sequential(x, p), loop_oracle(x, p)) < 1e-12


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-10), (np.float32, 1e-5)])
@pytest.mark.parametrize("t_len", LENGTHS)
def test_parallel_matches_sequential(t_len, dtype, tol):
    for seed in range(17):
        p = random_params([seed, t_len], dtype=dtype)
        x = np.random.default_rng([seed, t_len]).standard_normal((t_len, p.d_inner)).astype(dtype)
        assert rel_err(scan_parallel(x, p), scan_sequential(x, p)) < tol


def test_power_of_two_edges():
    for t_len in (8, 9, 16, 17, 32, 33):
        p = random_params(t_len)
        x = np.random.default_rng(t_len).standard_normal((2, t_len, p.d_inner))
        assert rel_err(scan_parallel(x, p), scan_sequential(x, p)) < 1e-10


@given(st.integers(1, 40), st.integers(0, 2**31 - 1))
def test_blelloch_states_match_sequential_states(t_len, seed):
    rng = np.random.default_rng(seed)
    decay = rng.uniform(0, 1, (t_len, 3, 2))
    drive = rng.standard_normal((t_len, 3, 2))
    np.testing.assert_allclose(blelloch_states(decay, drive), sequential_states(decay, drive), rtol=1e-10, atol=1e-12)


# --- properties ---------------------------------------------------------------

pairs = st.tuples(st.floats(0, 1), st.floats(-10, 10))


@given(pairs, pairs, pairs)
def test_combine_is_associative(p, q, r):
    p, q, r = [tuple(np.array(v) for v in pair) for pair in (p, q, r)]
    left = combine(combine(p, q), r)
    right = combine(p, combine(q, r))
    np.testing.assert_allclose(left, right, rtol=1e-6, atol=1e-6)


@pytest.mark.parametrize("method", ["sequential", "parallel"])
@given(st.integers(2, 30), st.integers(0, 29), st.integers(0, 2**31 - 1))
def test_perturbing_future_frames_leaves_past_unchanged(method, t_len, t_cut, seed):
    t_cut = t_cut % (t_len - 1)
    p = random_params(seed % 1000)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((t_len, p.d_inner))
    x2 = x.copy()
    x2[t_cut + 1] += rng.standard_normal(p.d_inner) * 3
    fn = scan_sequential if method == "sequential" else scan_parallel
    assert np.array_equal(fn(x, p)[: t_cut + 1], fn(x2, p)[: t_cut + 1])


@pytest.mark.parametrize("method", ["sequential", "parallel"])
def test_adjoint_is_causal(method):
    rng = np.random.default_rng(0)
    t_len, d, n = 12, 3, 2
    x = Tensor(rng.standard_normal((t_len, d)), requires_grad=True)
    delta = Tensor(rng.uniform(0.1, 1, (t_len, d)), requires_grad=True)
    A = Tensor(-rng.uniform(0.5, 2, (d, n)))
    B = Tensor(rng.standard_normal((t_len, n)), requires_grad=True)
    C = Tensor(rng.standard_normal((t_len, n)))
    for t in range(t_len - 1):
        with Tape() as tape:
            y = selective_scan(x, delta, A, B, C, None, method)
            loss = ops.sum(ops.slice(y, 0, 0, t + 1))
        g = tape.backward(loss)
        for leaf in (x, delta, B):
            assert not g[leaf][t + 1:].any()


def test_zero_upstream_gradient_gives_zero_gradients():
    rng = np.random.default_rng(1)
    leaves = [Tensor(v, requires_grad=True) for v in (
        rng.standard_normal((5, 3)), rng.uniform(0.1, 1, (5, 3)), -rng.uniform(0.5, 2, (3, 2)),
        rng.standard_normal((5, 2)), rng.standard_normal((5, 2)), rng.standard_normal(3))]
    with Tape() as tape:
        y = selective_scan(*leaves)
        loss = ops.sum(ops.scale(y, 0.0))
    assert all(not g.any() for g in tape.backward(loss).values())


@given(st.integers(1, 60), st.integers(0, 2**31 - 1))
def test_states_respect_stability_bound(t_len, seed):
    rng = np.random.default_rng(seed)
    d, n = 3, 4
    x = rng.uniform(-2, 2, (t_len, d))
    delta = rng.uniform(0.01, 1.0, (t_len, d))
    A = -rng.uniform(0.1, 3.0, (d, n))
    B = rng.standard_normal((t_len, n))
    decay = np.exp(delta[..., None] * A)
    drive = (delta * x)[..., None] * B[:, None, :]
    h = sequential_states(decay, drive)
    bound = np.abs(drive).max() / (1.0 - decay.max())
    assert np.abs(h).max() <= bound * (1 + 1e-12)


# --- gradients ------------------------------------------------------------

@pytest.mark.parametrize("method", ["sequential", "parallel"])
def test_scan_gradient_matches_finite_differences(method):
    with precision(np.float64):
        for seed in range(3):
            rng = np.random.default_rng(seed)
            t_len, d, n = 7, 3, 2
            params = {
                "x": rng.standard_normal((2, t_len, d)),
                "a_log": rng.normal(0, 0.5, (d, n)),
                "w_b": rng.standard_normal((d, n)),
                "w_c": rng.standard_normal((d, n)),
                "w_dn": rng.standard_normal((d, 2)),
                "w_up": rng.standard_normal((2, d)),
                "bias": rng.standard_normal(d),
                "skip": rng.standard_normal(d),
            }
            r = Tensor(rng.standard_normal((2, t_len, d)))

            def loss(p):
                x = p["x"]
                delta = ops.softplus(ops.add(ops.matmul(ops.matmul(x, p["w_dn"]), p["w_up"]), p["bias"]))
                A = ops.scale(ops.exp(p["a_log"]), -1.0)
                y = selective_scan(x, delta, A, ops.matmul(x, p["w_b"]), ops.matmul(x, p["w_c"]), p["skip"], method)
                return ops.sum(ops.mul(y, r))

            errs = check_param_gradients(loss, params)
            assert max(errs.values()) < 1e-4, errs


def test_unknown_method_rejected():
    p = random_params(0)
    x = Tensor(np.zeros((2, p.d_inner)))
    with pytest.raises(ValueError):
        selective_scan(x, x, Tensor(p.A), Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))), method="fft")
