import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from queryfuse import fusion, geometry as geo, numerics as nx, wire
from queryfuse.numerics import make_rng
from queryfuse.verify import oracle_masks, random_batch, random_slots


def _payload(aid, k=4, d=8, pose=None, centers=None, seed=0):
    rng = make_rng(seed + aid)
    c = rng.uniform(-5, 5, (k, 3)) if centers is None else centers
    return wire.QueryPayload(aid, rng.normal(size=(k, d)), c, rng.uniform(0.3, 1, (k, 1)), pose or geo.Pose())


def _mln(d=8, seed=0):
    return fusion.init_mln(make_rng(seed), d)


def test_mask_config_validation():
    with pytest.raises(ValueError):
        fusion.MaskConfig(tau=0)
    with pytest.raises(ValueError):
        fusion.MaskConfig(theta=1.0)
    with pytest.raises(ValueError):
        fusion.MaskConfig(L=0)
    assert fusion.MaskConfig(tau=math.inf).tau == math.inf


def test_mln_identity_at_init():
    rng = make_rng(1)
    q = rng.normal(size=(5, 8))
    e = geo.random_transform(rng)
    want, _ = nx.layer_norm(q, nx.LayerNormParams.identity(8))
    out = fusion.mln_align(q, e, _mln())
    assert out.shape == (5, 8)
    np.testing.assert_array_equal(out, want)


def test_mln_gradients():
    rng = make_rng(2)
    p = _mln()
    p.enc2.weight[...] = rng.normal(0, 0.2, p.enc2.weight.shape)
    q = rng.normal(size=(4, 8))
    w = rng.normal(size=(4, 8))
    e = geo.random_transform(rng, scale=1.0)

    def f():
        return float((fusion.mln_forward(q, e, p)[0] * w).sum())

    grads = {}
    _, cache = fusion.mln_forward(q, e, p)
    fusion.mln_backward(w, cache, p, grads)
    rep = nx.finite_diff_check(f, dict(nx.named_arrays(p, "mln")), grads)
    assert rep.passed, rep.worst


def test_ego_only_padding():
    cfg = fusion.MaskConfig(L=3)
    b = fusion.align_and_concat(_payload(0), [], geo.Pose(), cfg, _mln())
    assert b.q_all.shape == (12, 8)
    assert b.valid.tolist() == [True] * 4 + [False] * 8
    assert not b.q_all[4:].any() and not b.c_all[4:].any() and not b.s_all[4:].any()
    assert b.slot_agent.tolist() == [0] * 4 + [-1] * 8


def test_cav_at_ego_pose_keeps_centres():
    ego = _payload(0, pose=geo.Pose.from_xyyaw(10, -3, 0.7))
    cav = _payload(1, pose=ego.pose)
    b = fusion.align_and_concat(ego, [cav], ego.pose, fusion.MaskConfig(), _mln())
    np.testing.assert_allclose(b.c_all[4:8], cav.centers, atol=1e-12)


def test_cav_ahead_of_ego():
    cav = _payload(1, k=1, pose=geo.Pose.from_xyyaw(10, 0, 0), centers=np.array([[5.0, 0, 0]]))
    b = fusion.align_and_concat(_payload(0, k=1), [cav], geo.Pose(), fusion.MaskConfig(), _mln())
    np.testing.assert_allclose(b.c_all[1], [15.0, 0, 0], atol=1e-12)


def test_cav_order_is_by_agent_id():
    cavs = [_payload(3), _payload(1), _payload(2)]
    b = fusion.align_and_concat(_payload(0), cavs, geo.Pose(), fusion.MaskConfig(), _mln())
    assert b.slot_agent.tolist() == sum(([a] * 4 for a in range(4)), [])


def test_align_errors():
    cfg = fusion.MaskConfig(L=2)
    with pytest.raises(fusion.CapacityError):
        fusion.align_and_concat(_payload(0), [_payload(1), _payload(2)], geo.Pose(), cfg, _mln())
    with pytest.raises(ValueError):
        fusion.align_and_concat(_payload(0), [_payload(1, k=3)], geo.Pose(), cfg, _mln())


def test_qsm_prefix_block():
    valid = np.array([True] * 6 + [False] * 6)
    m = fusion.build_qsm(valid).blocked
    assert not m[:6, :6].any()
    assert m[6:, :].all() and m[:, 6:].all()
    assert not fusion.build_qsm(np.ones(5, bool)).blocked.any()


def test_pcm_boundary_is_allowed():
    c = np.array([[0.0, 0, 0], [3.0, 4.0, 0], [3.0, 4.0, 0.001]])
    m = fusion.build_pcm(c, 5.0).blocked
    assert not m[0, 1] and m[0, 2]
    assert not m.diagonal().any()
    with pytest.raises(ValueError):
        fusion.build_pcm(c, 0.0)


def test_pcm_uses_height():
    c = np.array([[0.0, 0, 0], [0.0, 0, 11.0]])
    assert fusion.build_pcm(c, 10.0).blocked[0, 1]


def test_ssm_cases():
    s = np.array([[0.9], [0.5], [0.3], [0.1], [0.2]])
    m = fusion.build_ssm(s, 0.2).blocked
    assert m[3].all() and m[:, 3].all()
    assert m[4].all()  # a key equal to theta is blocked
    assert not m[:3, :3].any()


def test_combine_union_with_open_diagonal():
    n = 5
    none = fusion.AttnMask(np.zeros((n, n), bool))
    assert not fusion.combine_masks(none, none, none).blocked.any()
    one = np.zeros((n, n), bool)
    one[1, 3] = True
    assert fusion.combine_masks(none, fusion.AttnMask(one), none).blocked[1, 3]
    full = fusion.AttnMask(np.ones((n, n), bool))
    comb = fusion.combine_masks(full, full, full).blocked
    np.testing.assert_array_equal(comb, ~np.eye(n, dtype=bool))
    with pytest.raises(ValueError):
        fusion.combine_masks(none, fusion.AttnMask(np.zeros((2, 2), bool)))


def test_to_additive():
    n = 4
    assert not fusion.to_additive(fusion.AttnMask(np.zeros((n, n), bool))).any()
    a = fusion.to_additive(fusion.combine_masks(fusion.AttnMask(np.ones((n, n), bool))))
    np.testing.assert_array_equal(a, np.where(np.eye(n, dtype=bool), 0.0, -1e9))


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.5, 30), st.floats(0, 0.99))
def test_masks_match_oracle(seed, tau, theta):
    _, c, s, valid = random_slots(make_rng(seed))
    q, p, sm, comb = oracle_masks(valid, c, s, tau, theta)
    got_q, got_p, got_s = fusion.build_qsm(valid), fusion.build_pcm(c, tau), fusion.build_ssm(s, theta)
    np.testing.assert_array_equal(got_q.blocked, q)
    np.testing.assert_array_equal(got_p.blocked, p)
    np.testing.assert_array_equal(got_s.blocked, sm)
    np.testing.assert_array_equal(fusion.combine_masks(got_q, got_p, got_s).blocked, comb)
    for m in (got_q, got_p, got_s):
        np.testing.assert_array_equal(m.blocked, m.blocked.T)
    assert not comb.diagonal().any()


def test_build_mask_switches():
    b, _, _, _, _ = random_batch(make_rng(5))
    n = b.n_slots
    off = fusion.MaskConfig(use_qsm=False, use_pcm=False, use_ssm=False)
    assert not fusion.build_mask(b, off).blocked.any()
    inf = fusion.MaskConfig(tau=math.inf, use_qsm=False, use_ssm=False)
    assert not fusion.build_mask(b, inf).blocked.any()
    full = fusion.build_mask(b, fusion.MaskConfig()).blocked
    assert full.shape == (n, n) and not full.diagonal().any()


def test_single_open_position_returns_own_value():
    rng = make_rng(6)
    x = rng.normal(size=(5, 8))
    p = fusion.init_eqformer(rng, 8).blocks[0].attn
    out = fusion.masked_mhsa(x, fusion.combine_masks(fusion.AttnMask(np.ones((5, 5), bool))), p)
    want = nx.linear(nx.linear(x, p.wv), p.wo)
    np.testing.assert_allclose(out, want, atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_blocked_key_has_no_influence(seed):
    rng = make_rng(seed)
    x = rng.normal(size=(8, 8))
    blocked = rng.random((8, 8)) < 0.5
    np.fill_diagonal(blocked, False)
    mask = fusion.AttnMask(blocked)
    p = fusion.init_eqformer(rng, 8).blocks[0].attn
    base = fusion.masked_mhsa(x, mask, p)
    for j in range(8):
        xp = x.copy()
        xp[j] += rng.normal(size=8) * 5
        rows = blocked[:, j]
        np.testing.assert_array_equal(fusion.masked_mhsa(xp, mask, p)[rows], base[rows])


def test_eqformer_zero_projections_are_double_layer_norm():
    rng = make_rng(7)
    b, cfg, _, _, _ = random_batch(rng)
    params = fusion.init_eqformer(rng, 8)
    for blk in params.blocks:
        for lin in (blk.attn.wq, blk.attn.wk, blk.attn.wv, blk.attn.wo, blk.ffn1, blk.ffn2):
            lin.weight[...] = 0.0
    outs = fusion.eqformer_forward(b, cfg, params)
    assert len(outs) == 3
    ln = nx.LayerNormParams.identity(8)
    x = b.q_all
    for out in outs:
        x = nx.layer_norm(nx.layer_norm(x, ln)[0], ln)[0]
        assert out.shape == b.q_all.shape
        np.testing.assert_allclose(out, x, atol=1e-12)


def test_eqformer_padding_invariance():
    rng = make_rng(8)
    ego_pose = geo.Pose()
    pls = [_payload(a, pose=geo.Pose.from_xyyaw(3.0 * a, a, 0.2 * a), seed=9) for a in range(3)]
    mln = _mln()
    params = fusion.init_eqformer(rng, 8)
    small = fusion.align_and_concat(pls[0], pls[1:], ego_pose, fusion.MaskConfig(L=3), mln)
    big = fusion.align_and_concat(pls[0], pls[1:], ego_pose, fusion.MaskConfig(L=4), mln)
    a = fusion.eqformer_forward(small, fusion.MaskConfig(L=3), params)
    b = fusion.eqformer_forward(big, fusion.MaskConfig(L=4), params)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y[: small.n_slots])


def test_eqformer_gradients():
    rng = make_rng(10)
    b, cfg, _, _, _ = random_batch(rng)
    params = fusion.init_eqformer(rng, 8, n_blocks=2)
    w = [rng.normal(size=b.q_all.shape) for _ in range(2)]
    add = fusion.to_additive(fusion.build_mask(b, cfg))
    x = b.q_all.copy()

    def f():
        outs = fusion.eqformer_stack(x, add, params)[0]
        return float(sum((o * wi).sum() for o, wi in zip(outs, w)))

    grads = {}
    _, caches = fusion.eqformer_stack(x, add, params)
    dx = fusion.eqformer_backward(w, caches, params, grads)
    rep = nx.finite_diff_check(f, dict(nx.named_arrays(params, "eqformer")) | {"x": x}, grads | {"x": dx})
    assert rep.passed, rep.worst


def test_heads_must_divide_width():
    with pytest.raises(nx.DimensionError):
        fusion.init_eqformer(make_rng(0), 10, heads=4)


def test_checkpoint_round_trip(tmp_path):
    rng = make_rng(11)
    arrays = {"b": rng.normal(size=(3, 2)), "a": rng.normal(size=5), "s": np.array(2.5)}
    path = fusion.save_checkpoint(tmp_path / "m.qfc", arrays, {"note": "x"})
    back, meta = fusion.load_checkpoint(path)
    assert meta == {"note": "x"}
    assert sorted(back) == ["a", "b", "s"]
    for k, v in arrays.items():
        np.testing.assert_array_equal(back[k], v.astype(np.float32).astype(np.float64))
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(ValueError):
        fusion.load_checkpoint(tmp_path / "bad")
