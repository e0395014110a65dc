"""Command-line entry point: simulate, train, bandwidth, ablate, verify.

Exit codes: 0 success, 1 verification failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import fusion, model, sim, verify, wire

log = logging.getLogger("queryfuse")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG = 0, 1, 2
TAUS = (5.0, 10.0, 20.0, 30.0, math.inf)
NOMINAL_K = tuple(range(120, 19, -10))  # 120, 110, ..., 20
NOMINAL_K_TRAIN = 120


class ConfigError(Exception):
    pass


# -- configuration ------------------------------------------------------------


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", ser_json_inf_nan="strings", validate_default=True)


class Dims(_Strict):
    D: int = Field(32, ge=4, description="query width")
    N: int = Field(64, ge=1, description="queries per agent before top-k")
    k: int = Field(8, ge=0, description="queries shared per agent")
    L: int = Field(4, ge=1, description="agent capacity of the fused sequence")
    C: int = Field(1, ge=1, description="classes")

    @model_validator(mode="after")
    def _fit(self):
        if self.k > self.N:
            raise ValueError(f"k={self.k} exceeds N={self.N}")
        if self.D % 4:
            raise ValueError(f"D={self.D} is not divisible by the 4 attention heads")
        return self


class Masks(_Strict):
    tau: float = Field(10.0, gt=0, description="proximity gate in metres; \"inf\" disables it")
    theta: float = Field(0.2, ge=0, lt=1, description="score gate")
    qsm: bool = True
    pcm: bool = True
    ssm: bool = True


class Scene(_Strict):
    agents: int = Field(4, ge=1, description="agents per scene, ego included")
    min_objects: int = Field(2, ge=0)
    max_objects: int = Field(4, ge=0, le=12)
    sensing_range: float = Field(30.0, gt=0)
    comm_range: float = Field(70.0, gt=0)
    cav_min_dist: float = Field(10.0, ge=0)
    cav_max_dist: float = Field(30.0, gt=0)
    occlusion_fraction: float = Field(0.5, ge=0, le=1)
    cav_occlusion_prob: float = Field(0.2, ge=0, le=1)
    yaw_noise: float = Field(0.1, ge=0)
    roi_half: float = Field(50.0, gt=3)

    @model_validator(mode="after")
    def _order(self):
        if self.min_objects > self.max_objects:
            raise ValueError("min_objects exceeds max_objects")
        if self.cav_min_dist > self.cav_max_dist:
            raise ValueError("cav_min_dist exceeds cav_max_dist")
        return self


class Emulator(_Strict):
    center_noise: float = Field(0.1, ge=0)
    feature_noise: float = Field(0.1, ge=0)
    size_noise: float = Field(0.05, ge=0)
    score_floor: float = Field(0.35, gt=0, le=1)
    score_jitter: float = Field(0.05, ge=0)
    background_cap: float = Field(0.15, ge=0, le=1)
    embed_seed: int = 7


class Train(_Strict):
    steps: int = Field(4000, ge=0)
    batch_size: int = Field(4, ge=1)
    lr: float = Field(1e-3, ge=0)
    clip_norm: float = Field(10.0, gt=0)
    cosine_decay: bool = True
    seed: int = Field(0, ge=0)
    train_seed_start: int = Field(1000, ge=0)
    n_train: int = Field(2048, ge=1)
    val_seed_start: int = Field(5000, ge=0)
    n_val: int = Field(10, ge=0)
    eval_every: int = Field(1000, ge=0)
    coop_layer_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    w_sin: float = Field(1.0, ge=0)
    w_co: float = Field(1.0, ge=0)
    lambda_reg: float = Field(5.0, ge=0)
    smooth_window: int = Field(50, ge=1)


class Post(_Strict):
    score_threshold: float = Field(0.2, ge=0, lt=1)
    nms_iou: float = Field(0.5, gt=0, le=1)


class RunConfig(_Strict):
    seed: int = Field(9000, ge=0, lt=2**64, description="first evaluation scenario seed")
    n_seeds: int = Field(20, ge=1, description="evaluation scenarios")
    out: str = "runs"
    checkpoint: str | None = None
    dims: Dims = Dims()
    mask: Masks = Masks()
    scene: Scene = Scene()
    emulator: Emulator = Emulator()
    train: Train = Train()
    post: Post = Post()

    @model_validator(mode="after")
    def _capacity(self):
        if self.scene.agents > self.dims.L:
            raise ValueError(f"{self.scene.agents} agents exceed capacity L={self.dims.L}")
        return self

    # conversions to the library's config objects
    def to_scenario(self) -> sim.ScenarioConfig:
        return sim.ScenarioConfig(n_agents=self.scene.agents, **self.scene.model_dump(exclude={"agents"}))

    def to_emulator(self) -> sim.EmulatorConfig:
        return sim.EmulatorConfig(n_queries=self.dims.N, dim=self.dims.D, n_classes=self.dims.C, **self.emulator.model_dump())

    def to_mask(self) -> fusion.MaskConfig:
        m = self.mask
        return fusion.MaskConfig(m.tau, m.theta, self.dims.L, m.qsm, m.pcm, m.ssm)

    def to_pipeline(self) -> sim.PipelineConfig:
        return sim.PipelineConfig(self.dims.k, self.to_mask(), self.post.score_threshold, self.post.nms_iou)

    def to_model(self) -> model.ModelConfig:
        return model.ModelConfig(dim=self.dims.D, n_classes=self.dims.C)

    def to_train(self) -> sim.TrainConfig:
        t = self.train
        return sim.TrainConfig(
            steps=t.steps,
            batch_size=t.batch_size,
            lr=t.lr,
            seed=t.seed,
            clip_norm=t.clip_norm,
            cosine_decay=t.cosine_decay,
            coop_layer_weights=tuple(t.coop_layer_weights),
            w_sin=t.w_sin,
            w_co=t.w_co,
            lambda_reg=t.lambda_reg,
            eval_every=t.eval_every,
            smooth_window=t.smooth_window,
        )

    def eval_seeds(self) -> range:
        return range(self.seed, self.seed + self.n_seeds)


def _field_errors(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{path}: {e['msg']}")
    return "; ".join(lines)


def _set(doc: dict, path: str, value) -> None:
    *parents, leaf = path.split(".")
    node = doc
    for p in parents:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{p}: expected an object")
    node[leaf] = value


def load_config(args: argparse.Namespace) -> RunConfig:
    """Config file, then paper-parity presets, then individual flags."""
    doc: dict = {}
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: not valid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
    if getattr(args, "paper_parity", False):
        for path, val in (("dims.D", 256), ("dims.N", 900), ("dims.k", 50), ("dims.C", 1)):
            _set(doc, path, val)
    for flag, path in (
        ("seed", "seed"),
        ("out", "out"),
        ("checkpoint", "checkpoint"),
        ("D", "dims.D"),
        ("C", "dims.C"),
        ("tau", "mask.tau"),
        ("theta", "mask.theta"),
        ("agents", "scene.agents"),
        ("n_seeds", "n_seeds"),
        ("steps", "train.steps"),
    ):
        val = getattr(args, flag, None)
        if val is not None:
            _set(doc, path, val)
    if getattr(args, "k", None) is not None:
        _set(doc, "dims.k", args.k)
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(_field_errors(exc)) from None


# -- output helpers -----------------------------------------------------------


def atomic_write(path: Path, data: str | bytes) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode, **({} if isinstance(data, bytes) else {"newline": ""})) as fh:
        fh.write(data)
    os.replace(tmp, path)
    return path


def csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


def _cell(v):
    if isinstance(v, float):
        return "inf" if math.isinf(v) else f"{v:.6f}"
    return v


def write_effective_config(out: Path, cfg: RunConfig) -> None:
    atomic_write(out / "config.json", cfg.model_dump_json(indent=2) + "\n")


def _attach_log(out: Path) -> None:
    """Timestamps only ever go to run.log, never into CSV outputs."""
    out.mkdir(parents=True, exist_ok=True)
    h = logging.FileHandler(out / "run.log")
    h.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.addHandler(h)
    root.setLevel(logging.INFO)


def svg_polyline(series: dict[str, tuple[np.ndarray, np.ndarray]], title: str, xlabel: str, ylabel: str, xlim=None, ylim=None) -> str:
    """A bare-bones line chart: one polyline per series, axes box and labels."""
    w, h, m = 480, 360, 50
    xs = np.concatenate([np.asarray(x, float) for x, _ in series.values()] or [np.zeros(1)])
    ys = np.concatenate([np.asarray(y, float) for _, y in series.values()] or [np.zeros(1)])
    x0, x1 = xlim or (float(xs.min()) if len(xs) else 0.0, float(xs.max()) if len(xs) else 1.0)
    y0, y1 = ylim or (float(ys.min()) if len(ys) else 0.0, float(ys.max()) if len(ys) else 1.0)
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0

    def px(x, y):
        return m + (x - x0) / (x1 - x0) * (w - 2 * m), h - m - (y - y0) / (y1 - y0) * (h - 2 * m)

    colours = itertools.cycle(["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"])
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<rect x="{m}" y="{m}" width="{w - 2 * m}" height="{h - 2 * m}" fill="none" stroke="black"/>',
        f'<text x="{w / 2}" y="{m / 2}" text-anchor="middle" font-size="14">{title}</text>',
        f'<text x="{w / 2}" y="{h - 12}" text-anchor="middle" font-size="12">{xlabel}</text>',
        f'<text x="14" y="{h / 2}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {h / 2})">{ylabel}</text>',
        f'<text x="{m}" y="{h - m + 14}" font-size="10">{x0:.3g}</text>',
        f'<text x="{w - m}" y="{h - m + 14}" text-anchor="end" font-size="10">{x1:.3g}</text>',
        f'<text x="{m - 4}" y="{h - m}" text-anchor="end" font-size="10">{y0:.3g}</text>',
        f'<text x="{m - 4}" y="{m + 8}" text-anchor="end" font-size="10">{y1:.3g}</text>',
    ]
    for row, ((name, (x, y)), colour) in enumerate(zip(series.items(), colours)):
        pts = " ".join("%.2f,%.2f" % px(a, b) for a, b in zip(x, y))
        parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{w - m - 4}" y="{m + 16 + 14 * row}" text-anchor="end" font-size="11" fill="{colour}">{name}</text>')
    parts.append("</svg>\n")
    return "\n".join(parts)


def _load_params(cfg: RunConfig, required: bool):
    path = cfg.checkpoint
    if path is None or not Path(path).is_file():
        if required:
            raise ConfigError(f"checkpoint not found: {path if path else '<none given>'} (train one with `queryfuse train`)")
        log.warning("no checkpoint given; using an untrained model")
        return model.init_model(cfg.train.seed, cfg.to_model())
    try:
        params, mcfg, _ = model.load(path)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if (mcfg.dim, mcfg.n_classes) != (cfg.dims.D, cfg.dims.C):
        raise ConfigError(f"checkpoint {path} has D={mcfg.dim}, C={mcfg.n_classes}; config asks for D={cfg.dims.D}, C={cfg.dims.C}")
    return params


# -- commands -----------------------------------------------------------------


def cmd_simulate(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    _attach_log(out)
    params = _load_params(cfg, required=False)
    scfg, emu, pcfg = cfg.to_scenario(), cfg.to_emulator(), cfg.to_pipeline()
    det_rows, metric_rows, scores, flags, n_gt = [], [], [], [], 0
    for seed in cfg.eval_seeds():
        scn = sim.gen_scenario(seed, scfg)
        dets, res = sim.run_pipeline(scn, params, pcfg, emu)
        for d in dets:
            b = d.box
            det_rows.append([seed, *map(float, b.center), *map(float, b.size), float(b.yaw), float(d.score), d.class_id])
        metric_rows.append([seed, res.ap50, res.ap70, res.bandwidth_bits])
        gts = scn.gt_boxes()
        sc, tp = sim.match_flags(dets, gts, 0.5)
        scores.append(sc)
        flags.append(tp)
        n_gt += len(gts)
        log.info("seed %d ap50 %.4f ap70 %.4f bits %d", seed, res.ap50, res.ap70, res.bandwidth_bits)
    metric_rows.append(
        ["mean", float(np.mean([r[1] for r in metric_rows])), float(np.mean([r[2] for r in metric_rows])), float(np.mean([r[3] for r in metric_rows]))]
    )
    atomic_write(out / "detections.csv", csv_text(["seed", "x", "y", "z", "l", "w", "h", "yaw", "score", "class"], det_rows))
    atomic_write(out / "metrics.csv", csv_text(["seed", "ap50", "ap70", "bandwidth_bits"], metric_rows))
    order = np.argsort(-np.concatenate(scores), kind="stable") if scores else np.zeros(0, int)
    tp = np.concatenate(flags)[order] if flags else np.zeros(0)
    if n_gt and len(tp):
        ap, rec, prec = sim.pr_from_flags(tp, n_gt)
    else:
        ap, rec, prec = 0.0, np.zeros(0), np.zeros(0)
    svg = svg_polyline({f"pooled AP50 {ap:.3f}": (rec, prec)}, "precision-recall at IoU 0.5", "recall", "precision", (0, 1), (0, 1))
    atomic_write(out / "pr_curve.svg", svg)
    write_effective_config(out, cfg)
    mean = metric_rows[-1]
    print(f"ap50 {mean[1]:.4f}  ap70 {mean[2]:.4f}  bandwidth {wire.format_mb(int(round(mean[3])))} per scene  -> {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    _attach_log(out)
    t = cfg.train
    train_seeds = range(t.train_seed_start, t.train_seed_start + t.n_train)
    val_seeds = range(t.val_seed_start, t.val_seed_start + t.n_val)
    overlap = set(train_seeds) & (set(val_seeds) | set(cfg.eval_seeds()))
    if overlap:
        raise ConfigError(f"train.train_seed_start: training seeds overlap held-out seeds (e.g. {min(overlap)})")
    mcfg = cfg.to_model()
    try:
        res = sim.train_toy(
            train_seeds, val_seeds, cfg.to_train(), mcfg, cfg.to_pipeline(), cfg.to_scenario(), cfg.to_emulator()
        )
    except sim.TrainingError as exc:
        model.save(out / "last_good.qfc", exc.last_good, mcfg)
        print(f"training diverged: {exc}; last good parameters in {out / 'last_good.qfc'}", file=sys.stderr)
        return EXIT_VERIFY
    model.save(out / "model.qfc", res.params, mcfg, {"train": cfg.train.model_dump()})
    buf = io.StringIO()
    for rec in res.log:
        buf.write(json.dumps(rec, sort_keys=True) + "\n")
    atomic_write(out / "train_log.jsonl", buf.getvalue())
    total = res.smoothed("total", t.smooth_window)
    if len(total):
        steps = np.arange(len(total))
        atomic_write(out / "loss.svg", svg_polyline({"total (smoothed)": (steps, total)}, "training loss", "step", "loss"))
    write_effective_config(out, cfg.model_copy(update={"checkpoint": str(out / "model.qfc")}))
    evals = [r for r in res.log if "eval_step" in r]
    tail = f", val ap50 {evals[-1]['val_ap50']:.4f}" if evals else ""
    final = f"{total[-1]:.4f}" if len(total) else "n/a"
    print(f"trained {t.steps} steps, smoothed loss {final}{tail} -> {out / 'model.qfc'}")
    return EXIT_OK


def parse_k(text: str) -> list[int] | int:
    """``50`` or an inclusive sweep ``start:stop:step``."""
    if ":" not in text:
        return int(text)
    parts = text.split(":")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"sweep must be start:stop:step, got {text!r}")
    a, b, s = (int(p) for p in parts)
    if s <= 0 or a < 0 or b < a:
        raise argparse.ArgumentTypeError(f"bad sweep {text!r}")
    return list(range(a, b + 1, s))


def cmd_bandwidth(cfg: RunConfig, ks: Sequence[int], out: Path | None) -> int:
    d, c = cfg.dims.D, cfg.dims.C
    rows = [(k, d, c, wire.bandwidth_bits(k, d, c), wire.format_mb(wire.bandwidth_bits(k, d, c))) for k in ks]
    print(f"{'k':>5} {'D':>5} {'C':>3} {'bits':>10}  Mb")
    for k, dd, cc, bits, mb in rows:
        print(f"{k:>5} {dd:>5} {cc:>3} {bits:>10}  {mb}")
    if out is not None:
        atomic_write(out / "bandwidth.csv", csv_text(["k", "D", "C", "bits", "mb"], rows))
    return EXIT_OK


def desk_k(nominal: int, k_train: int) -> int:
    """Scale an inference k quoted against 120 training queries to the desk k."""
    return max(1, math.ceil(k_train * nominal / NOMINAL_K_TRAIN))


def ablation_cells(cfg: RunConfig) -> list[dict]:
    base = cfg.mask
    cells = []
    for qsm, pcm, ssm in itertools.product((True, False), repeat=3):
        cells.append({"group": "masks", "qsm": qsm, "pcm": pcm, "ssm": ssm, "tau": base.tau, "k_nominal": "", "k": cfg.dims.k})
    for tau in TAUS:
        cells.append({"group": "tau", "qsm": True, "pcm": True, "ssm": True, "tau": tau, "k_nominal": "", "k": cfg.dims.k})
    for kn in NOMINAL_K:
        cells.append({"group": "k", "qsm": True, "pcm": True, "ssm": True, "tau": base.tau, "k_nominal": kn, "k": desk_k(kn, cfg.dims.k)})
    return cells


def cmd_ablate(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    params = _load_params(cfg, required=True)
    _attach_log(out)
    scfg, emu, pcfg = cfg.to_scenario(), cfg.to_emulator(), cfg.to_pipeline()
    scenes = [sim.gen_scenario(s, scfg) for s in cfg.eval_seeds()]
    header = ["group", "qsm", "pcm", "ssm", "tau", "k_nominal", "k"]
    grid_rows, seed_rows = [], []
    for cell in ablation_cells(cfg):
        mc = replace(pcfg.mask, tau=cell["tau"], use_qsm=cell["qsm"], use_pcm=cell["pcm"], use_ssm=cell["ssm"])
        pc = replace(pcfg, k=cell["k"], mask=mc)
        res = [sim.run_pipeline(scn, params, pc, emu)[1] for scn in scenes]
        key = [cell[h] for h in header]
        for scn, r in zip(scenes, res):
            seed_rows.append([*key, scn.seed, r.ap50, r.ap70, r.bandwidth_bits])
        grid_rows.append(
            [*key, float(np.mean([r.ap50 for r in res])), float(np.mean([r.ap70 for r in res])), float(np.mean([r.bandwidth_bits for r in res])), len(res)]
        )
        log.info("cell %s ap50 %.4f", key, grid_rows[-1][len(header)])
    atomic_write(out / "ablation.csv", csv_text([*header, "ap50", "ap70", "bandwidth_bits", "n_seeds"], grid_rows))
    atomic_write(out / "ablation_seeds.csv", csv_text([*header, "seed", "ap50", "ap70", "bandwidth_bits"], seed_rows))
    write_effective_config(out, cfg)
    for row in grid_rows:
        print(" ".join(str(_cell(v)) for v in row))
    return EXIT_OK


def cmd_verify(seed: int, quick: bool, only: str | None = None) -> int:
    names = [n for n, _ in verify.suite()]
    if only is not None and not any(only.lower() in n for n in names):
        print(f"configuration error: --only {only!r} matches none of: {', '.join(names)}", file=sys.stderr)
        return EXIT_CONFIG
    failed = 0
    for res in verify.run_all(seed, quick=quick, only=only):
        print(res.line(), flush=True)
        failed += not res.passed
    print(f"{failed} propert{'y' if failed == 1 else 'ies'} failed" if failed else "all properties hold")
    return EXIT_VERIFY if failed else EXIT_OK


# -- argument parsing ---------------------------------------------------------


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return v


def _tau(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("tau must be positive")
    return v


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    defaults = RunConfig()
    p = argparse.ArgumentParser(
        prog="queryfuse",
        description="Cooperative 3D detection by sharing top-k object queries (desk-scale simulator).",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="config defaults:\n" + defaults.model_dump_json(indent=1),
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *, k_sweep=False):
        sp.add_argument("--config", metavar="PATH", help="JSON run config; unknown keys are rejected")
        sp.add_argument("--seed", type=_u64, help=f"first scenario seed (default {defaults.seed})")
        sp.add_argument("--out", metavar="DIR", help=f"output directory (default {defaults.out})")
        if k_sweep:
            sp.add_argument("--k", dest="k_values", type=parse_k, help="k or an inclusive sweep start:stop:step")
        else:
            sp.add_argument("--k", type=int, help=f"queries shared per agent (default {defaults.dims.k})")
        sp.add_argument("--D", type=int, help=f"query width (default {defaults.dims.D})")
        sp.add_argument("--C", type=int, help=f"classes (default {defaults.dims.C})")
        sp.add_argument("--tau", type=_tau, help=f"proximity gate in metres, 'inf' allowed (default {defaults.mask.tau})")
        sp.add_argument("--theta", type=float, help=f"score gate (default {defaults.mask.theta})")
        sp.add_argument("--agents", type=int, help=f"agents per scene incl. ego (default {defaults.scene.agents})")
        sp.add_argument("--paper-parity", action="store_true", help="D=256, N=900, k=50 (bandwidth arithmetic; not for training)")

    s = sub.add_parser("simulate", help="run the pipeline over a seed range", formatter_class=fmt)
    common(s)
    s.add_argument("--checkpoint", metavar="PATH", help="trained model (untrained if omitted)")
    s.add_argument("--n-seeds", dest="n_seeds", type=int, help=f"scenarios to run (default {defaults.n_seeds})")

    t = sub.add_parser("train", help="train the cooperative stage", formatter_class=fmt)
    common(t)
    t.add_argument("--steps", type=int, help=f"optimiser steps (default {defaults.train.steps})")

    b = sub.add_parser("bandwidth", help="payload bits per CAV", formatter_class=fmt)
    common(b, k_sweep=True)

    a = sub.add_parser("ablate", help="mask, tau and top-k ablation grid", formatter_class=fmt)
    common(a)
    a.add_argument("--checkpoint", metavar="PATH", help="trained model (required)")
    a.add_argument("--n-seeds", dest="n_seeds", type=int, help=f"scenarios per cell (default {defaults.n_seeds})")

    v = sub.add_parser("verify", help="run the property suite", formatter_class=fmt)
    v.add_argument("--seed", type=_u64, default=0, help="base seed for the randomised trials")
    v.add_argument("--quick", action="store_true", help="a tenth of the trials")
    v.add_argument("--only", metavar="NAME", help="run only suites whose name contains NAME")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    root = logging.getLogger()
    before = list(root.handlers)
    console = logging.StreamHandler()
    console.setLevel(logging.WARNING)
    console.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    root.addHandler(console)
    try:
        return _dispatch(argv)
    finally:
        for h in root.handlers[:]:
            if h not in before:
                root.removeHandler(h)
                h.close()


def _dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with status 2
        return int(exc.code or 0)
    if args.command == "verify":
        return cmd_verify(args.seed, args.quick, args.only)
    try:
        cfg = load_config(args)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "bandwidth":
            kv = args.k_values
            ks = kv if isinstance(kv, list) else [cfg.dims.k if kv is None else kv]
            return cmd_bandwidth(cfg, ks, Path(args.out) if args.out else None)
        return cmd_ablate(cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
