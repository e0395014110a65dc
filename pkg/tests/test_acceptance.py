"""Acceptance criteria 1-14; each test records one PASS/FAIL line in the summary."""
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from conftest import EVAL_SEEDS
from queryfuse import sim, verify, wire
from queryfuse.cli import atomic_write, csv_text

PCFG = sim.PipelineConfig()
SCFG = sim.ScenarioConfig()
EMU = sim.EmulatorConfig()


def _summarise(results):
    return "; ".join(f"{r.prop}: {r.trials} trials {'ok' if r.passed else 'seed=' + str(r.seed)}" for r in results)


def _check(c, results, budget=None):
    c.detail = _summarise(results)
    for r in results:
        assert r.passed, r.line()
    if budget is not None:
        spent = sum(r.seconds for r in results)
        c.detail += f"; {spent:.1f}s of {budget:.0f}s"
        assert spent < budget, f"took {spent:.1f}s, budget {budget}s"


def _ap50(params, pcfg, seeds=EVAL_SEEDS):
    return np.array([sim.run_pipeline(sim.gen_scenario(s, SCFG), params, pcfg, EMU)[1].ap50 for s in seeds])


def _late_ap50(params, seeds=EVAL_SEEDS):
    out = []
    for s in seeds:
        scn = sim.gen_scenario(s, SCFG)
        dets, _ = sim.late_fusion_baseline(scn, params, EMU, PCFG.score_threshold, PCFG.nms_iou)
        out.append(sim.eval_ap(dets, scn.gt_boxes(), 0.5))
    return np.array(out)


def test_c01_bandwidth_exactness(criterion):
    with criterion(1, "bandwidth exactness") as c:
        bits = wire.bandwidth_bits(50, 256, 1)
        c.detail = f"{bits} bits = {wire.format_mb(bits)}"
        assert bits == 416_000
        assert wire.format_mb(bits) == "0.416 Mb"


def test_c02_bandwidth_sweep(criterion):
    with criterion(2, "bandwidth sweep k=20..120") as c:
        ks = list(range(20, 121))
        bits = [wire.bandwidth_bits(k, 256, 1) for k in ks]
        steps = {b1 - b0 for b0, b1 in zip(bits, bits[1:])}
        c.detail = f"step {steps} bits per query, k=120 -> {wire.format_mb(bits[-1])}"
        assert steps == {260 * 32}
        assert all(b == k * 260 * 32 for k, b in zip(ks, bits))
        assert bits[-1] == 998_400 and wire.format_mb(bits[-1]) == "0.998 Mb"


def test_c03_mask_oracles(criterion):
    with criterion(3, "mask oracle equivalence") as c:
        _check(c, verify.check_masks(1000), budget=30)


def test_c04_masked_key_non_influence(criterion):
    with criterion(4, "masked-key non-influence") as c:
        _check(c, [verify.check_masked_key_influence(200)], budget=60)


def test_c05_padding_and_permutation(criterion):
    with criterion(5, "padding invariance and permutation equivariance") as c:
        _check(c, [verify.check_padding_invariance(100), verify.check_permutation_equivariance(100)], budget=60)


def test_c06_unmasked_degeneration(criterion):
    with criterion(6, "unmasked degeneration to plain MHSA") as c:
        _check(c, [verify.check_unmasked_degeneration(20)])


def test_c07_gradients(criterion):
    with criterion(7, "finite-difference gradients") as c:
        res = verify.check_gradients()
        _check(c, [res], budget=120)
        c.detail += f"; worst {res.detail}"


def test_c08_hungarian(criterion):
    with criterion(8, "Hungarian vs brute force") as c:
        _check(c, [verify.check_hungarian(500)], budget=30)


def test_c09_iou(criterion):
    with criterion(9, "rotated BEV IoU") as c:
        _check(c, verify.check_iou(200), budget=120)


def test_c10_wire(criterion):
    with criterion(10, "wire integrity") as c:
        _check(c, verify.check_wire(1000))


def test_c11_collaboration_payoff(criterion, trained):
    with criterion(11, "collaboration payoff") as c:
        coop = _ap50(trained.params, PCFG).mean()
        ego = _ap50(trained.params, replace(PCFG, cooperative=False)).mean()
        late = _late_ap50(trained.params).mean()
        c.detail = f"coop {coop:.3f}, ego {ego:.3f}, late {late:.3f}, trained in {trained.seconds:.0f}s"
        assert trained.seconds <= 30 * 60
        assert coop - ego >= 0.15, "coop - ego below 0.15"
        assert coop >= late, "coop below late fusion"


def test_c12_top_k_robustness(criterion, trained):
    with criterion(12, "top-k robustness") as c:
        k_small = math.ceil(0.25 * PCFG.k)
        full = _ap50(trained.params, PCFG).mean()
        small = _ap50(trained.params, replace(PCFG, k=k_small)).mean()
        c.detail = f"k={PCFG.k} {full:.3f}, k={k_small} {small:.3f}, ratio {small / full:.3f}"
        assert small >= 0.95 * full


def test_c13_pcm_ablation(criterion, trained, request):
    with criterion(13, "PCM tau ablation") as c:
        at10 = _ap50(trained.params, PCFG)
        at_inf = _ap50(trained.params, replace(PCFG, mask=replace(PCFG.mask, tau=math.inf)))
        out = Path(request.config.rootpath) / "acceptance_out" / "pcm_tau_seeds.csv"
        rows = [[s, 10.0, a] for s, a in zip(EVAL_SEEDS, at10)] + [[s, math.inf, a] for s, a in zip(EVAL_SEEDS, at_inf)]
        atomic_write(out, csv_text(["seed", "tau", "ap50"], rows))
        c.detail = f"tau=10 {at10.mean():.3f}, tau=inf {at_inf.mean():.3f}, seeds in {out.name}"
        assert at_inf.mean() <= at10.mean()


SDS_SEEDS = range(5)
SDS_TRAIN = sim.TrainConfig(steps=1000, eval_every=0)
SDS_SCENES = range(1000, 1512)


def test_c14_deep_supervision(criterion):
    with criterion(14, "deep supervision ablation") as c:
        wins, pairs = 0, []
        for seed in SDS_SEEDS:
            final = []
            for weights in ((1.0, 1.0, 1.0), (0.0, 0.0, 1.0)):
                hyper = replace(SDS_TRAIN, seed=seed, coop_layer_weights=weights)
                res = sim.train_toy(SDS_SCENES, [], hyper)
                final.append(float(res.smoothed("final_layer", hyper.smooth_window)[-1]))
            pairs.append(final)
            wins += final[0] <= final[1]
        c.detail = f"all-layer wins {wins}/5; " + ", ".join(f"{a:.3f} vs {b:.3f}" for a, b in pairs)
        assert wins >= 4
