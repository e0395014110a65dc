import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from queryfuse import numerics as nx
from queryfuse.numerics import LayerNormParams, LinearParams, make_rng


def test_matmul_identity_and_scalar():
    a = make_rng(0).normal(size=(4, 3))
    np.testing.assert_array_equal(nx.matmul(a, np.eye(3)), a)
    assert nx.matmul([[2.0]], [[3.0]])[0, 0] == 6.0


def test_matmul_matches_triple_loop():
    rng = make_rng(1)
    a, b = rng.normal(size=(7, 5)), rng.normal(size=(5, 3))
    want = np.array([[sum(a[i, t] * b[t, j] for t in range(5)) for j in range(3)] for i in range(7)])
    np.testing.assert_allclose(nx.matmul(a, b), want, atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(nx.DimensionError):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_softmax_uniform_and_one_hot():
    p = nx.softmax_masked(np.zeros((4, 4)), np.zeros((4, 4)))
    np.testing.assert_array_equal(p, np.full((4, 4), 0.25))
    mask = np.full((3, 3), nx.NEG_BLOCK)
    np.fill_diagonal(mask, 0.0)
    np.testing.assert_array_equal(nx.softmax_masked(make_rng(2).normal(size=(3, 3)), mask), np.eye(3))


def test_softmax_matches_formula():
    rng = make_rng(3)
    z = rng.normal(size=(6, 6))
    mask = np.where(rng.random((6, 6)) < 0.4, nx.NEG_BLOCK, 0.0)
    np.fill_diagonal(mask, 0.0)
    e = np.exp(z + mask)
    np.testing.assert_allclose(nx.softmax_masked(z, mask), e / e.sum(1, keepdims=True), atol=1e-12)
    assert np.all(nx.softmax_masked(z, mask)[mask < 0] == 0.0)


def test_softmax_fully_blocked_row_is_contract_error():
    mask = np.zeros((3, 3))
    mask[1] = nx.NEG_BLOCK
    with pytest.raises(nx.ContractError):
        nx.softmax_masked(np.zeros((3, 3)), mask)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_softmax_rows_sum_to_one(n, seed):
    rng = make_rng(seed)
    mask = np.where(rng.random((n, n)) < 0.5, nx.NEG_BLOCK, 0.0)
    np.fill_diagonal(mask, 0.0)
    p = nx.softmax_masked(rng.normal(size=(n, n)) * 5, mask)
    assert np.all(np.abs(p.sum(1) - 1.0) < 1e-12)


def test_layer_norm_cases():
    out, _ = nx.layer_norm(np.array([[1.0, 2.0, 3.0]]), LayerNormParams.identity(3))
    np.testing.assert_allclose(out, [[-1.2247, 0.0, 1.2247]], atol=1e-3)
    p = LayerNormParams(np.ones(4), np.array([0.5, -1.0, 2.0, 0.0]))
    out, _ = nx.layer_norm(np.full((1, 4), 7.0), p)
    np.testing.assert_allclose(out[0], p.beta, atol=1e-12)


def test_layer_norm_matches_formula():
    rng = make_rng(4)
    x = rng.normal(size=(5, 6))
    p = LayerNormParams(rng.normal(size=6), rng.normal(size=6))
    mu = x.mean(1, keepdims=True)
    var = ((x - mu) ** 2).mean(1, keepdims=True)
    want = p.gamma * (x - mu) / np.sqrt(var + 1e-5) + p.beta
    np.testing.assert_allclose(nx.layer_norm(x, p)[0], want, atol=1e-12)


def test_linear_cases():
    x = make_rng(5).normal(size=(3, 4))
    np.testing.assert_array_equal(nx.linear(x, LinearParams(np.eye(4), np.zeros(4))), x)
    w = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    np.testing.assert_array_equal(nx.linear(np.array([[1.0, 2.0]]), LinearParams(w, np.zeros(3))), [[1, 2, 3]])
    with pytest.raises(nx.DimensionError):
        nx.linear(np.ones((2, 3)), LinearParams(w, np.zeros(3)))


def test_linear_matches_loop():
    rng = make_rng(6)
    x = rng.normal(size=(5, 4))
    p = nx.init_params(rng, 4, 3)
    p.bias[:] = rng.normal(size=3)
    want = [[sum(x[i, j] * p.weight[o, j] for j in range(4)) + p.bias[o] for o in range(3)] for i in range(5)]
    np.testing.assert_allclose(nx.linear(x, p), want, atol=1e-12)


def test_linear_row_results_do_not_depend_on_row_count():
    rng = make_rng(7)
    p = nx.init_params(rng, 32, 32)
    x = rng.normal(size=(40, 32))
    full = nx.linear(x, p)
    for n in (1, 3, 17):
        np.testing.assert_array_equal(nx.linear(x[:n], p), full[:n])


def test_bias_gradient_of_sum_is_ones():
    rng = make_rng(8)
    p = nx.init_params(rng, 4, 3)
    x = rng.normal(size=(6, 4))
    grads = {}
    nx.linear_backward(np.ones((6, 3)), x, p, grads, "lin")
    np.testing.assert_array_equal(grads["lin.bias"], np.full(3, 6.0))
    np.testing.assert_array_equal(nx.linear_backward(np.ones((1, 3)), x[:1], p, None)[0], p.weight.sum(0))


def test_softmax_gradient_of_uniform_row_under_symmetric_upstream():
    p = np.full((1, 5), 0.2)
    np.testing.assert_array_equal(nx.softmax_backward(np.ones((1, 5)), p), np.zeros((1, 5)))


def test_finite_diff_quadratic():
    x = make_rng(9).normal(size=7)
    params = {"x": x}
    rep = nx.finite_diff_check(lambda: float(x @ x), params, {"x": 2 * x}, tol=1e-8, floor=1e-6)
    assert rep.passed, rep.worst


def test_finite_diff_layer_norm_sum_weighted():
    rng = make_rng(10)
    x = rng.normal(size=(3, 5))
    p = LayerNormParams(rng.normal(size=5), rng.normal(size=5))
    w = rng.normal(size=(3, 5))

    def f():
        return float((nx.layer_norm(x, p)[0] * w).sum())

    grads = {}
    _, cache = nx.layer_norm(x, p)
    dx = nx.layer_norm_backward(w, cache, p, grads, "ln")
    rep = nx.finite_diff_check(f, {"ln.gamma": p.gamma, "ln.beta": p.beta, "x": x}, {**grads, "x": dx}, tol=1e-6)
    assert rep.passed, rep.worst


def test_finite_diff_catches_wrong_gradient():
    x = make_rng(11).normal(size=4)
    rep = nx.finite_diff_check(lambda: float(x @ x), {"x": x}, {"x": x})
    assert not rep.passed


def test_finite_diff_rejects_non_finite_objective():
    x = np.ones(2)
    with pytest.raises(nx.GradCheckError):
        nx.finite_diff_check(lambda: math.inf, {"x": x}, {"x": x})


def _attn(rng, d=8, heads=2):
    return nx.AttentionParams(*(nx.init_params(rng, d, d) for _ in range(4)), heads=heads)


def test_mhsa_and_ffn_gradients():
    rng = make_rng(12)
    x = rng.normal(size=(5, 8))
    p = _attn(rng)
    f1, f2 = nx.init_params(rng, 8, 16), nx.init_params(rng, 16, 8)
    mask = np.where(rng.random((5, 5)) < 0.3, nx.NEG_BLOCK, 0.0)
    np.fill_diagonal(mask, 0.0)
    w = rng.normal(size=(5, 8))

    def f():
        a, _ = nx.mhsa(x, mask, p)
        return float((nx.ffn(a, f1, f2)[0] * w).sum())

    a, ac = nx.mhsa(x, mask, p)
    _, fc = nx.ffn(a, f1, f2)
    grads = {}
    da = nx.ffn_backward(w, fc, f1, f2, grads, "ffn")
    dx = nx.mhsa_backward(da, ac, p, grads, "attn")
    params = dict(nx.named_arrays(p, "attn")) | {"ffn.ffn1.weight": f1.weight, "ffn.ffn2.bias": f2.bias, "x": x}
    rep = nx.finite_diff_check(f, params, {**grads, "x": dx})
    assert rep.passed, rep.worst


def test_mhsa_unmasked_matches_reference():
    rng = make_rng(13)
    x = rng.normal(size=(9, 8))
    p = _attn(rng)
    np.testing.assert_allclose(nx.mhsa(x, np.zeros((9, 9)), p)[0], nx.plain_mhsa(x, p), atol=1e-12)


def test_mhsa_head_count_must_divide_width():
    rng = make_rng(14)
    with pytest.raises(nx.DimensionError):
        nx.mhsa(rng.normal(size=(3, 8)), np.zeros((3, 3)), _attn(rng, heads=3))


def test_init_params_deterministic_and_bounded():
    a = nx.init_params(make_rng(15), 30, 20)
    b = nx.init_params(make_rng(15), 30, 20)
    np.testing.assert_array_equal(a.weight, b.weight)
    assert np.all(np.abs(a.weight) <= math.sqrt(6 / 50))
    np.testing.assert_array_equal(a.bias, 0.0)


def test_init_params_mean_near_zero():
    w = nx.init_params(make_rng(16), 100, 100).weight
    bound = math.sqrt(6 / 200)
    sigma = bound / math.sqrt(3) / math.sqrt(w.size)
    assert abs(w.mean()) < 3 * sigma


def test_rng_streams_reproducible():
    np.testing.assert_array_equal(make_rng(17).random(5), make_rng(17).random(5))
    assert not np.array_equal(make_rng(17).random(5), make_rng(18).random(5))


def test_adam_zero_lr_leaves_params():
    p = {"w": np.ones(3)}
    opt = nx.Adam(lr=0.0)
    opt.step(p, {"w": np.array([1.0, -2.0, 3.0])})
    np.testing.assert_array_equal(p["w"], 1.0)


def test_adam_descends_quadratic():
    p = {"w": np.array([3.0, -2.0])}
    opt = nx.Adam(lr=0.1)
    for _ in range(300):
        opt.step(p, {"w": 2 * p["w"]})
    assert np.linalg.norm(p["w"]) < 0.1


def test_adam_clips_global_norm():
    p1, p2 = {"w": np.zeros(2)}, {"w": np.zeros(2)}
    nx.Adam(lr=1.0, clip_norm=1.0).step(p1, {"w": np.array([300.0, 400.0])})
    nx.Adam(lr=1.0).step(p2, {"w": np.array([0.6, 0.8])})
    np.testing.assert_allclose(p1["w"], p2["w"])
