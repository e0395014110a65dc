"""Randomised property suite behind ``queryfuse verify``.

Every check draws its trials from ``make_rng(base_seed + trial)`` so a failure
can be replayed from the reported seed alone.
"""
from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import fusion, geometry as geo, heads, model, sim, wire
from . import numerics as nx


@dataclass
class CheckResult:
    module: str
    prop: str
    passed: bool
    trials: int
    seed: int | None = None  # counterexample seed when failed
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        msg = f"{status} {self.module}: {self.prop} ({self.trials} trials, {self.seconds:.1f}s)"
        if not self.passed:
            msg += f" counterexample seed={self.seed}: {self.detail}"
        return msg


def _run(module: str, prop: str, trials: int, base_seed: int, trial: Callable[[np.random.Generator], str | None]) -> CheckResult:
    t0 = time.perf_counter()
    for t in range(trials):
        seed = base_seed + t
        problem = trial(nx.make_rng(seed))
        if problem:
            return CheckResult(module, prop, False, t + 1, seed, problem, time.perf_counter() - t0)
    return CheckResult(module, prop, True, trials, seconds=time.perf_counter() - t0)


# -- random fixtures ----------------------------------------------------------


def random_slots(rng, n_max=16, dim=8, n_classes=1):
    """Slot arrays for a padded batch: (x, centres, scores, valid)."""
    n = int(rng.integers(1, n_max + 1))
    x = rng.normal(size=(n, dim))
    c = rng.uniform(-20.0, 20.0, (n, 3))
    s = rng.uniform(0.0, 1.0, (n, n_classes))
    valid = rng.random(n) < 0.75
    valid[int(rng.integers(n))] = True
    return x, c, s, valid


def oracle_masks(valid, c, s, tau, theta):
    """Double-loop definitions of QSM, PCM, SSM and their union."""
    n = len(valid)
    qsm = np.zeros((n, n), dtype=bool)
    pcm = np.zeros((n, n), dtype=bool)
    ssm = np.zeros((n, n), dtype=bool)
    comb = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(n):
            qsm[i, j] = not (valid[i] and valid[j])
            d = math.sqrt(sum((float(c[i][a]) - float(c[j][a])) ** 2 for a in range(3)))
            pcm[i, j] = d > tau
            ssm[i, j] = max(s[i]) <= theta or max(s[j]) <= theta
            comb[i, j] = i != j and (qsm[i, j] or pcm[i, j] or ssm[i, j])
    return qsm, pcm, ssm, comb


def random_batch(rng, dim=8, k_max=4, n_classes=1):
    """An AlignedBatch of 1..L agents built from random payloads."""
    k = int(rng.integers(1, k_max + 1))
    n_agents = int(rng.integers(1, 5))
    ego_pose = geo.Pose.from_xyyaw(*rng.uniform(-5, 5, 2), rng.uniform(-math.pi, math.pi))
    pls = []
    for a in range(n_agents):
        pose = ego_pose if a == 0 else geo.Pose.from_xyyaw(*rng.uniform(-15, 15, 2), rng.uniform(-math.pi, math.pi))
        pls.append(
            wire.QueryPayload(
                a, rng.normal(size=(k, dim)), rng.uniform(-10, 10, (k, 3)), rng.uniform(0, 1, (k, n_classes)), pose
            )
        )
    cfg = fusion.MaskConfig(tau=float(rng.uniform(3, 20)), theta=float(rng.uniform(0, 0.5)), L=4)
    mln = fusion.init_mln(rng, dim)
    mln.enc2.weight[...] = rng.normal(0, 0.1, mln.enc2.weight.shape)
    return fusion.align_and_concat(pls[0], pls[1:], ego_pose, cfg, mln), cfg, pls, ego_pose, mln


def _random_stack(rng, dim=8):
    return fusion.init_eqformer(rng, dim, heads=4)


# -- checks -------------------------------------------------------------------


def check_masks(trials=1000, base_seed=0) -> list[CheckResult]:
    out = []
    for name in ("qsm", "pcm", "ssm", "combined"):

        def trial(rng, name=name):
            _, c, s, valid = random_slots(rng)
            tau, theta = float(rng.uniform(1, 30)), float(rng.uniform(0, 1))
            want = dict(zip(("qsm", "pcm", "ssm", "combined"), oracle_masks(valid, c, s, tau, theta)))[name]
            if name == "qsm":
                got = fusion.build_qsm(valid).blocked
            elif name == "pcm":
                got = fusion.build_pcm(c, tau).blocked
            elif name == "ssm":
                got = fusion.build_ssm(s, theta).blocked
            else:
                got = fusion.combine_masks(
                    fusion.build_qsm(valid), fusion.build_pcm(c, tau), fusion.build_ssm(s, theta)
                ).blocked
            if not np.array_equal(got, want):
                i, j = np.argwhere(got != want)[0]
                return f"entry ({i},{j}) is {bool(got[i, j])}, oracle says {bool(want[i, j])}"
            return None

        out.append(_run("fusion", f"{name} mask matches double-loop oracle", trials, base_seed, trial))
    return out


def check_masked_key_influence(trials=200, base_seed=0) -> CheckResult:
    def trial(rng):
        x, _, _, _ = random_slots(rng, n_max=12)
        n = len(x)
        blocked = rng.random((n, n)) < 0.5
        np.fill_diagonal(blocked, False)
        mask = fusion.AttnMask(blocked)
        p = fusion.init_eqformer(rng, x.shape[1]).blocks[0].attn
        base = fusion.masked_mhsa(x, mask, p)
        for j in range(n):
            rows = np.nonzero(blocked[:, j])[0]
            if not len(rows):
                continue
            xp = x.copy()
            xp[j] += rng.normal(0.0, float(rng.uniform(0.1, 10.0)), x.shape[1])
            pert = fusion.masked_mhsa(xp, mask, p)
            moved = rows[np.any(pert[rows] != base[rows], axis=1)]
            if len(moved):
                return f"row {moved[0]} changed after perturbing blocked key {j}"
        return None

    return _run("fusion", "masked-key non-influence", trials, base_seed, trial)


def _stack_out(x, c, s, valid, params, tau=10.0, theta=0.2):
    m = fusion.combine_masks(fusion.build_qsm(valid), fusion.build_pcm(c, tau), fusion.build_ssm(s, theta))
    return fusion.eqformer_stack(x, fusion.to_additive(m), params)[0][-1]


def check_padding_invariance(trials=100, base_seed=0) -> CheckResult:
    def trial(rng):
        x, c, s, _ = random_slots(rng, dim=16)
        n = len(x)
        params = _random_stack(rng, 16)
        base = _stack_out(x, c, s, np.ones(n, bool), params)
        extra = int(rng.integers(1, 12))
        pad = lambda a: np.vstack([a, rng.normal(size=(extra, a.shape[1]))])  # noqa: E731
        out = _stack_out(pad(x), pad(c), pad(s), np.r_[np.ones(n, bool), np.zeros(extra, bool)], params)[:n]
        if not np.array_equal(out, base):
            return f"max deviation {np.abs(out - base).max():.3e} with {extra} padded slots"
        return None

    return _run("fusion", "padding invariance", trials, base_seed, trial)


def check_permutation_equivariance(trials=100, base_seed=0) -> CheckResult:
    def trial(rng):
        batch, cfg, pls, ego_pose, mln = random_batch(rng, dim=16)
        params = _random_stack(rng, 16)
        base = fusion.eqformer_forward(batch, cfg, params)[-1]
        # relabel agent ids so the CAV slot blocks come out in another order
        new_ids = rng.permutation(len(pls) - 1) + 1
        relabelled = [replace_id(pl, int(i)) for pl, i in zip(pls[1:], new_ids)]
        b2 = fusion.align_and_concat(pls[0], relabelled, ego_pose, cfg, mln)
        out = fusion.eqformer_forward(b2, cfg, params)[-1]
        k = batch.k
        for old, new in zip(range(1, len(pls)), new_ids):
            start = int(np.nonzero(b2.slot_agent == new)[0][0])
            if not np.array_equal(out[start : start + k], base[old * k : (old + 1) * k]):
                return f"agent block {old} differs after moving to slot block of id {new}"
        if not np.array_equal(out[:k], base[:k]):
            return "ego block changed"
        return None

    return _run("fusion", "agent-permutation equivariance", trials, base_seed, trial)


def replace_id(pl: wire.QueryPayload, agent_id: int) -> wire.QueryPayload:
    return wire.QueryPayload(agent_id, pl.features, pl.centers, pl.scores, pose_matrix=pl.pose_matrix)


def check_unmasked_degeneration(trials=20, base_seed=0) -> CheckResult:
    def trial(rng):
        dim = 16
        n = int(rng.integers(1, 24))
        x = rng.normal(size=(n, dim))
        params = _random_stack(rng, dim)
        s = rng.uniform(0.01, 1.0, (n, 1))
        c = rng.uniform(-1e3, 1e3, (n, 3))
        m = fusion.combine_masks(fusion.build_qsm(np.ones(n, bool)), fusion.build_ssm(s, 0.0))
        got = fusion.masked_mhsa(x, m, params.blocks[0].attn)
        want = nx.plain_mhsa(x, params.blocks[0].attn)
        cfg = fusion.MaskConfig(tau=math.inf, theta=0.0)
        if fusion.build_mask(_fake_batch(x, c, s), cfg).blocked.any():
            return "tau=inf, theta=0 still blocks a pair"
        err = float(np.abs(got - want).max())
        return None if err <= 1e-12 else f"max deviation {err:.3e}"

    return _run("fusion", "unmasked attention equals plain MHSA", trials, base_seed, trial)


def _fake_batch(x, c, s):
    n = len(x)
    return fusion.AlignedBatch(x, c, s, np.ones(n, bool), np.zeros(n, np.int64), n, x)


def check_hungarian(trials=500, base_seed=0) -> CheckResult:
    def trial(rng):
        n, m = (int(v) for v in rng.integers(1, 8, 2))
        cost = rng.uniform(0, 10, (n, m)) if rng.random() < 0.7 else rng.integers(0, 4, (n, m)).astype(float)
        pairs = heads.linear_assignment(cost)
        got = sum(cost[i, j] for i, j in pairs)
        if len(pairs) != min(n, m) or len({i for i, _ in pairs}) != len(pairs) or len({j for _, j in pairs}) != len(pairs):
            return f"not a maximal one-to-one assignment: {pairs}"
        if n <= m:
            best = min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(m), n))
        else:
            best = min(sum(cost[p[j], j] for j in range(m)) for p in itertools.permutations(range(n), m))
        return None if got == best or abs(got - best) <= 1e-9 * max(1.0, abs(best)) else f"cost {got} vs optimum {best}"

    return _run("heads", "Hungarian optimality vs brute force", trials, base_seed, trial)


def mc_iou(a: geo.BBox3D, b: geo.BBox3D, rng, samples=1_000_000) -> float:
    """Monte-Carlo BEV IoU: sample the union bounding rectangle."""
    pa, pb = a.corners_bev(), b.corners_bev()
    pts = np.vstack([pa, pb])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    u = rng.uniform(lo, hi, (samples, 2))

    def inside(box):
        d = u - box.center[:2]
        cy, sy = math.cos(box.yaw), math.sin(box.yaw)
        lx = d[:, 0] * cy + d[:, 1] * sy
        ly = -d[:, 0] * sy + d[:, 1] * cy
        return (np.abs(lx) <= box.size[0] / 2) & (np.abs(ly) <= box.size[1] / 2)

    ia, ib = inside(a), inside(b)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0


def random_box(rng, spread=3.0) -> geo.BBox3D:
    return geo.BBox3D(
        np.r_[rng.uniform(-spread, spread, 2), 0.0],
        np.r_[rng.uniform(0.5, 5.0, 2), 1.5],
        float(rng.uniform(-math.pi, math.pi)),
    )


def check_iou(trials=200, base_seed=0) -> list[CheckResult]:
    def trial(rng):
        a, b = random_box(rng), random_box(rng)
        got, want = geo.bev_iou(a, b), mc_iou(a, b, rng)
        return None if abs(got - want) <= 1e-2 else f"analytic {got:.4f} vs Monte-Carlo {want:.4f}"

    def analytic(rng):
        a = random_box(rng)
        if geo.bev_iou(a, a) != 1.0:
            return "identical boxes do not give 1"
        far = geo.BBox3D(a.center + np.array([100.0, 0, 0]), a.size, a.yaw)
        if geo.bev_iou(a, far) != 0.0:
            return "disjoint boxes do not give 0"
        u = geo.BBox3D([0, 0, 0], [1, 1, 1], 0.0)
        v = geo.BBox3D([0.5, 0, 0], [1, 1, 1], 0.0)
        if abs(geo.bev_iou(u, v) - 1.0 / 3.0) > 1e-12:
            return f"half-shifted unit squares give {geo.bev_iou(u, v)!r}"
        return None

    return [
        _run("geometry", "BEV IoU vs Monte-Carlo", trials, base_seed, trial),
        _run("geometry", "BEV IoU analytic cases", 20, base_seed, analytic),
    ]


def toy_gradcheck_setup(seed=0, dim=16, k=4):
    """Two agents, k queries each, random-scale parameters, two ground-truth boxes."""
    rng = nx.make_rng(seed)
    cfg = model.ModelConfig(dim=dim)
    params = model.init_model(seed + 1, cfg)
    for _, arr in nx.named_arrays(params):
        arr[...] = rng.normal(0.0, 0.2, arr.shape)
    ego_pose = geo.Pose.from_xyyaw(1.0, 2.0, 0.3)

    def payload(aid, pose):
        return wire.QueryPayload(aid, rng.normal(size=(k, dim)), rng.uniform(-8, 8, (k, 3)), rng.uniform(0, 1, (k, 1)), pose)

    ego = payload(0, ego_pose)
    cav = payload(1, geo.Pose.from_xyyaw(5.0, -3.0, 2.0))
    mc = fusion.MaskConfig(tau=10.0, theta=0.2, L=3)
    batch = fusion.align_and_concat(ego, [cav], ego_pose, mc, params.mln)
    roi = heads.Roi()
    gt = heads.GroundTruth.from_boxes(
        [geo.BBox3D([3, 1, 0], [4, 2, 1.5], 0.2), geo.BBox3D([-5, 2, 0], [4.5, 1.9, 1.6], -1.0)], roi
    )
    return params, batch, gt, mc, roi, heads.LossConfig()


def check_gradients(seed=0, tol=1e-4) -> CheckResult:
    t0 = time.perf_counter()
    params, batch, gt, mc, roi, lc = toy_gradcheck_setup(seed)
    _, grads = model.loss_and_grads(params, batch, gt, mc, roi, lc)
    rep = nx.finite_diff_check(
        lambda: model.loss_only(params, batch, gt, mc, roi, lc), nx.param_dict(params), grads, h=1e-6, tol=tol
    )
    name, err = rep.worst
    detail = f"{name} relative error {err:.3e}"
    return CheckResult("numerics", "finite-difference gradients", rep.passed, sum(rep.n_checked.values()), None if rep.passed else seed, detail, time.perf_counter() - t0)


def random_payload(rng) -> wire.QueryPayload:
    k, d, c = int(rng.integers(0, 20)), int(rng.integers(1, 40)), int(rng.integers(1, 4))
    pose = geo.Pose.from_xyyaw(*rng.uniform(-100, 100, 2), rng.uniform(-math.pi, math.pi))
    return wire.QueryPayload(
        int(rng.integers(0, 2**32)),
        rng.normal(size=(k, d)),
        rng.uniform(-60, 60, (k, 3)),
        rng.uniform(0, 1, (k, c)),
        pose,
    )


def check_wire(trials=1000, base_seed=0) -> list[CheckResult]:
    def roundtrip(rng):
        p = random_payload(rng)
        raw = wire.serialize(p)
        q = wire.deserialize(raw)
        if len(raw) != wire.frame_length(p.k, p.dim, p.n_classes):
            return "frame length disagrees with the layout"
        if wire.serialize(q) != raw or q != p:
            return "payload changed across the round trip"
        return None

    params = model.init_model(0)

    def pipeline(rng):
        scn = sim.gen_scenario(int(rng.integers(0, 2**31)))
        a, ra = sim.run_pipeline(scn, params, sim.PipelineConfig(use_wire=True))
        b, rb = sim.run_pipeline(scn, params, sim.PipelineConfig(use_wire=False))
        same = len(a) == len(b) and all(x.box.same_as(y.box) and x.score == y.score for x, y in zip(a, b))
        same = same and (ra.ap50, ra.ap70, ra.bandwidth_bits) == (rb.ap50, rb.ap70, rb.bandwidth_bits)
        return None if same else "detections differ with the wire inserted"

    return [
        _run("wire", "bit-exact round trip", trials, base_seed, roundtrip),
        _run("sim", "wire-insertion invariance", 10, base_seed, pipeline),
    ]


def check_bandwidth() -> CheckResult:
    t0 = time.perf_counter()
    problems = []
    if wire.bandwidth_bits(50, 256, 1) != 416_000 or wire.format_mb(wire.bandwidth_bits(50, 256, 1)) != "0.416 Mb":
        problems.append("k=50, D=256, C=1 is not 416000 bits / 0.416 Mb")
    if wire.format_mb(wire.bandwidth_bits(120, 256, 1)) != "0.998 Mb":
        problems.append("k=120 is not 0.998 Mb")
    bits = [wire.bandwidth_bits(k, 256, 1) for k in range(20, 121)]
    if len(set(np.diff(bits))) != 1:
        problems.append("bits are not linear in k")
    if wire.bandwidth_bits(0, 256, 1) != 0 or wire.format_mb(0) != "0 Mb":
        problems.append("k=0 is not free")
    scn = sim.gen_scenario(3)
    _, res = sim.run_pipeline(scn, model.init_model(0))
    if res.bandwidth_bits != len(sim.connected_agents(scn)) * wire.bandwidth_bits(8, 32, 1):
        problems.append("pipeline bandwidth is not (#CAVs) * bandwidth_bits")
    return CheckResult("wire", "bandwidth exactness", not problems, 1, None if not problems else 0, "; ".join(problems), time.perf_counter() - t0)


def suite(base_seed: int = 0, quick: bool = False) -> list[tuple[str, Callable[[], list[CheckResult]]]]:
    """(name, thunk) pairs; ``quick`` trims trial counts for smoke runs."""
    f = 10 if quick else 1

    def one(fn, *a):
        return lambda: [fn(*a)]

    return [
        ("masks", lambda: check_masks(1000 // f, base_seed)),
        ("masked-key non-influence", one(check_masked_key_influence, 200 // f, base_seed)),
        ("padding invariance", one(check_padding_invariance, 100 // f, base_seed)),
        ("permutation equivariance", one(check_permutation_equivariance, 100 // f, base_seed)),
        ("unmasked degeneration", one(check_unmasked_degeneration, 20 // f + 1, base_seed)),
        ("hungarian", one(check_hungarian, 500 // f, base_seed)),
        ("iou", lambda: check_iou(200 // f, base_seed)),
        ("gradients", one(check_gradients, base_seed)),
        ("wire", lambda: check_wire(1000 // f, base_seed)),
        ("bandwidth", one(check_bandwidth)),
    ]


def run_all(base_seed: int = 0, quick: bool = False, only: str | None = None) -> list[CheckResult]:
    results = []
    for name, thunk in suite(base_seed, quick):
        if only is None or only.lower() in name:
            results += thunk()
    return results
