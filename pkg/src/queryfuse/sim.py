"""Synthetic multi-agent scenes, detector emulation, evaluation and training."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import heads, model
from . import numerics as nx
from . import wire
from .fusion import MaskConfig, align_and_concat
from .geometry import BBox3D, Pose, bev_iou, invert, relative_transform
from .heads import Detection, GroundTruth, LossConfig, Roi
from .model import ModelConfig, ModelParams

log = logging.getLogger(__name__)

SCENARIO_FORMAT = "queryfuse-scenario"
SCENARIO_VERSION = 1
ATTR_DIM = 13
TAG_DIM = 4


class GenerationError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, message: str, last_good: ModelParams | None = None):
        super().__init__(message)
        self.last_good = last_good


# -- configuration ------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioConfig:
    n_agents: int = 4
    min_objects: int = 2
    max_objects: int = 4
    sensing_range: float = 30.0
    comm_range: float = 70.0
    cav_min_dist: float = 10.0
    cav_max_dist: float = 30.0
    occlusion_fraction: float = 0.5
    cav_occlusion_prob: float = 0.2
    yaw_noise: float = 0.1
    roi_half: float = 50.0
    max_retries: int = 200

    @property
    def roi(self) -> Roi:
        h = self.roi_half
        return Roi((-h, -h, -3.0), (h, h, 3.0))


@dataclass(frozen=True)
class EmulatorConfig:
    n_queries: int = 64
    dim: int = 32
    n_classes: int = 1
    center_noise: float = 0.1
    feature_noise: float = 0.1
    size_noise: float = 0.05
    score_floor: float = 0.35
    score_jitter: float = 0.05
    background_cap: float = 0.15
    embed_seed: int = 7


@dataclass(frozen=True)
class PipelineConfig:
    k: int = 8
    mask: MaskConfig = field(default_factory=MaskConfig)
    score_threshold: float = 0.20
    nms_iou: float = 0.5
    use_wire: bool = True
    cooperative: bool = True


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 4000
    batch_size: int = 4
    lr: float = 1e-3
    seed: int = 0
    clip_norm: float = 10.0
    cosine_decay: bool = True
    coop_layer_weights: tuple[float, ...] = (1.0, 1.0, 1.0)
    w_sin: float = 1.0
    w_co: float = 1.0
    lambda_reg: float = 5.0
    eval_every: int = 500
    smooth_window: int = 50


# -- scenarios ----------------------------------------------------------------


@dataclass
class Agent:
    agent_id: int
    pose: Pose
    sensing_range: float


@dataclass
class SceneObject:
    box: BBox3D  # world frame
    tag: np.ndarray
    occluded_from: frozenset[int] = frozenset()  # agent indices


@dataclass
class Scenario:
    seed: int
    agents: list[Agent]
    objects: list[SceneObject]
    roi: Roi
    comm_range: float = 70.0

    @property
    def ego(self) -> Agent:
        return self.agents[0]

    def boxes_in(self, agent_idx: int) -> list[BBox3D]:
        to_agent = invert(self.agents[agent_idx].pose.as_transform())
        return [o.box.transformed(to_agent) for o in self.objects]

    def gt_boxes(self) -> list[BBox3D]:
        """Ground truth in the ego frame."""
        return self.boxes_in(0)

    def visible(self, agent_idx: int, obj_idx: int) -> bool:
        a = self.agents[agent_idx]
        o = self.objects[obj_idx]
        if agent_idx in o.occluded_from:
            return False
        return float(np.linalg.norm(o.box.center[:2] - a.pose.translation[:2])) <= a.sensing_range

    def visible_set(self, agent_idx: int) -> list[int]:
        return [j for j in range(len(self.objects)) if self.visible(agent_idx, j)]


def _road_yaw(rng, noise):
    return (math.pi if rng.random() < 0.5 else 0.0) + rng.normal(0.0, noise)


def _disk_point(rng, centre, radius):
    r = radius * math.sqrt(rng.random())
    a = rng.uniform(-math.pi, math.pi)
    return np.array([centre[0] + r * math.cos(a), centre[1] + r * math.sin(a)])


def gen_scenario(seed: int, cfg: ScenarioConfig = ScenarioConfig()) -> Scenario:
    """Place agents and objects in the ego frame, then lift to a random world pose."""
    rng = nx.make_rng(seed)
    roi = cfg.roi
    ego_world = Pose.from_xyyaw(rng.uniform(-500, 500), rng.uniform(-500, 500), rng.uniform(-math.pi, math.pi))
    to_world = ego_world.as_transform()
    inner = cfg.roi_half - 3.0

    footprints: list[BBox3D] = []

    def clear(box):
        return all(_disjoint(box, other) for other in footprints)

    agent_local = [(np.zeros(2), 0.0)]
    footprints.append(BBox3D([0, 0, 0], [4.5, 2.0, 1.5], 0.0))
    for _ in range(cfg.n_agents - 1):
        for _attempt in range(cfg.max_retries):
            d = rng.uniform(cfg.cav_min_dist, cfg.cav_max_dist)
            a = rng.uniform(-math.pi, math.pi)
            xy = np.array([d * math.cos(a), d * math.sin(a)])
            yaw = _road_yaw(rng, cfg.yaw_noise)
            box = BBox3D([xy[0], xy[1], 0.0], [4.5, 2.0, 1.5], yaw)
            if np.all(np.abs(xy) <= inner) and np.linalg.norm(xy) <= cfg.comm_range and clear(box):
                agent_local.append((xy, yaw))
                footprints.append(box)
                break
        else:
            raise GenerationError(f"seed {seed}: could not place agent {len(agent_local)}")

    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    n_occ = int(round(cfg.occlusion_fraction * n_obj))
    local_boxes, hosts = [], []
    for j in range(n_obj):
        # occluded objects sit near a CAV that sees them; with no CAV they stay unseen
        host = int(rng.integers(1, cfg.n_agents)) if j < n_occ and cfg.n_agents > 1 else 0
        for _attempt in range(cfg.max_retries):
            xy = _disk_point(rng, agent_local[host][0], cfg.sensing_range * 0.9)
            if np.linalg.norm(xy) > cfg.sensing_range or np.any(np.abs(xy) > inner):
                continue
            size = [rng.uniform(3.6, 5.0), rng.uniform(1.6, 2.1), rng.uniform(1.4, 1.8)]
            box = BBox3D([xy[0], xy[1], 0.0], size, _road_yaw(rng, cfg.yaw_noise))
            if clear(box):
                local_boxes.append(box)
                hosts.append(host)
                footprints.append(box)
                break
        else:
            raise GenerationError(f"seed {seed}: could not place object {j} without overlap")

    agents = [
        Agent(i, Pose.from_xyyaw(*(to_world.matrix[:3, :3] @ [*xy, 0.0] + to_world.translation)[:2], ego_world.yaw + yaw), cfg.sensing_range)
        for i, (xy, yaw) in enumerate(agent_local)
    ]
    objects = []
    for j, (box, host) in enumerate(zip(local_boxes, hosts)):
        occ = set()
        if j < n_occ:
            occ.add(0)
        for a in range(1, cfg.n_agents):
            if a != host and rng.random() < cfg.cav_occlusion_prob:
                occ.add(a)
        objects.append(SceneObject(box.transformed(to_world), rng.normal(size=TAG_DIM), frozenset(occ)))
    return Scenario(int(seed), agents, objects, roi, cfg.comm_range)


def _disjoint(a: BBox3D, b: BBox3D) -> bool:
    return bev_iou(a, b) == 0.0


def scenario_to_json(scn: Scenario) -> str:
    doc = {
        "format": SCENARIO_FORMAT,
        "version": SCENARIO_VERSION,
        "seed": scn.seed,
        "comm_range": scn.comm_range,
        "roi": {"lo": list(scn.roi.lo), "hi": list(scn.roi.hi)},
        "agents": [
            {
                "agent_id": a.agent_id,
                "rotation": a.pose.rotation.tolist(),
                "translation": a.pose.translation.tolist(),
                "sensing_range": a.sensing_range,
            }
            for a in scn.agents
        ],
        "objects": [
            {
                "center": o.box.center.tolist(),
                "size": o.box.size.tolist(),
                "yaw": o.box.yaw,
                "tag": o.tag.tolist(),
                "occluded_from": sorted(o.occluded_from),
            }
            for o in scn.objects
        ],
    }
    return json.dumps(doc, indent=1, sort_keys=True)


def scenario_from_json(text: str) -> Scenario:
    doc = json.loads(text)
    if doc.get("format") != SCENARIO_FORMAT:
        raise ValueError(f"not a scenario document: format={doc.get('format')!r}")
    if doc.get("version") != SCENARIO_VERSION:
        raise ValueError(f"unsupported scenario version {doc.get('version')}")
    agents = [Agent(a["agent_id"], Pose(a["rotation"], a["translation"]), a["sensing_range"]) for a in doc["agents"]]
    objects = [
        SceneObject(BBox3D(o["center"], o["size"], o["yaw"]), np.array(o["tag"]), frozenset(o["occluded_from"]))
        for o in doc["objects"]
    ]
    roi = Roi(tuple(doc["roi"]["lo"]), tuple(doc["roi"]["hi"]))
    return Scenario(doc["seed"], agents, objects, roi, doc["comm_range"])


def dump_scenario(path, scn: Scenario) -> None:
    Path(path).write_text(scenario_to_json(scn))


def load_scenario(path) -> Scenario:
    return scenario_from_json(Path(path).read_text())


# -- detector emulation -------------------------------------------------------


def embedding(cfg: EmulatorConfig) -> np.ndarray:
    """Fixed random linear map from object attributes to query features."""
    rng = nx.make_rng(cfg.embed_seed)
    return rng.normal(0.0, 1.0 / math.sqrt(ATTR_DIM), size=(cfg.dim, ATTR_DIM))


def _attributes(objectness, centre, size, yaw, tag, scale):
    return np.concatenate([[objectness], centre[:2] / scale, [centre[2]], np.log(size), [math.sin(2 * yaw), math.cos(2 * yaw)], tag])


def agent_rng(scn_seed: int, agent_idx: int, salt: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence([int(scn_seed) & 0xFFFFFFFF, int(agent_idx), int(salt)])
    return np.random.Generator(np.random.PCG64(ss))


def emulate_detector(scn: Scenario, agent_idx: int, cfg: EmulatorConfig, rng: np.random.Generator):
    """Stand-in for a query-based detector: returns (Q, C, S) in the agent frame.

    Each visible object yields one query whose score exceeds every background
    query's score; the rest are background.
    """
    agent = scn.agents[agent_idx]
    emb = embedding(cfg)
    boxes = scn.boxes_in(agent_idx)
    vis = scn.visible_set(agent_idx)
    if len(vis) > cfg.n_queries:
        raise ValueError(f"{len(vis)} visible objects exceed {cfg.n_queries} queries")
    rng_range = agent.sensing_range
    attrs = np.zeros((cfg.n_queries, ATTR_DIM))
    centres = np.zeros((cfg.n_queries, 3))
    scores = np.zeros((cfg.n_queries, cfg.n_classes))
    for row, j in enumerate(vis):
        b = boxes[j]
        frac = min(float(np.linalg.norm(b.center[:2])) / rng_range, 1.0)
        sigma = cfg.center_noise * (1.0 + 2.0 * frac)
        c = b.center + rng.normal(0.0, 1.0, 3) * np.array([sigma, sigma, 0.2 * sigma])
        size = b.size * np.exp(rng.normal(0.0, cfg.size_noise, 3))
        centres[row] = c
        attrs[row] = _attributes(1.0, c, size, b.yaw, scn.objects[j].tag, rng_range)
        s = cfg.score_floor + (1.0 - cfg.score_floor) * (1.0 - frac) + rng.uniform(-cfg.score_jitter, cfg.score_jitter)
        scores[row, :] = rng.uniform(0.0, cfg.background_cap, cfg.n_classes)
        scores[row, 0] = min(max(s, cfg.score_floor), 1.0)
    for row in range(len(vis), cfg.n_queries):
        xy = _disk_point(rng, (0.0, 0.0), rng_range)
        c = np.array([xy[0], xy[1], rng.normal(0.0, 0.5)])
        size = np.exp(rng.uniform(np.log([1.0, 0.5, 0.5]), np.log([6.0, 3.0, 2.5])))
        centres[row] = c
        attrs[row] = _attributes(0.0, c, size, rng.uniform(-math.pi, math.pi), rng.normal(size=TAG_DIM), rng_range)
        scores[row] = rng.uniform(0.0, cfg.background_cap, cfg.n_classes)
    feats = attrs @ emb.T + rng.normal(0.0, cfg.feature_noise, (cfg.n_queries, cfg.dim))
    perm = rng.permutation(cfg.n_queries)
    return feats[perm], centres[perm], scores[perm]


# -- pipeline -----------------------------------------------------------------


@dataclass
class EvalResult:
    ap50: float
    ap70: float
    recall: np.ndarray
    precision: np.ndarray
    bandwidth_bits: int


def connected_agents(scn: Scenario) -> list[int]:
    """CAV indices within communication range (centre to centre) of the ego."""
    ego_xy = scn.ego.pose.translation[:2]
    return [
        i
        for i in range(1, len(scn.agents))
        if np.linalg.norm(scn.agents[i].pose.translation[:2] - ego_xy) <= scn.comm_range
    ]


def agent_payloads(scn: Scenario, k: int, emu: EmulatorConfig, use_wire: bool = True, cooperative: bool = True):
    idx = [0] + (connected_agents(scn) if cooperative else [])
    out = []
    for i in idx:
        q, c, s = emulate_detector(scn, i, emu, agent_rng(scn.seed, i))
        p = wire.top_k_select(q, c, s, k, agent_id=scn.agents[i].agent_id, pose=scn.agents[i].pose)
        if use_wire:
            p = wire.deserialize(wire.serialize(p))
        out.append(p)
    return out[0], out[1:]


def nms(dets: Sequence[Detection], iou_thr: float = 0.5) -> list[Detection]:
    """Greedy score-ordered suppression of boxes overlapping a kept box by >= iou_thr."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept: list[Detection] = []
    for i in order:
        if all(bev_iou(dets[i].box, kd.box) < iou_thr for kd in kept):
            kept.append(dets[i])
    return kept


def build_batch(scn: Scenario, params: ModelParams, pcfg: PipelineConfig, emu: EmulatorConfig):
    ego, cavs = agent_payloads(scn, pcfg.k, emu, pcfg.use_wire, pcfg.cooperative)
    batch = align_and_concat(ego, cavs, ego.pose, pcfg.mask, params.mln)
    return batch, cavs


def run_pipeline(
    scn: Scenario,
    params: ModelParams,
    pcfg: PipelineConfig = PipelineConfig(),
    emu: EmulatorConfig = EmulatorConfig(),
):
    """Emulate, select, (de)serialize, fuse and decode; returns (detections, EvalResult)."""
    batch, cavs = build_batch(scn, params, pcfg, emu)
    fwd = model.forward(params, batch, pcfg.mask, scn.roi, single=False)
    final = fwd.coop[-1]
    rows = np.nonzero(batch.valid)[0]
    dets = heads.decode_detections(final.box, final.logits, scn.roi, rows)
    dets = nms([d for d in dets if d.score > pcfg.score_threshold], pcfg.nms_iou)
    bits = sum(wire.bandwidth_bits(p.k, p.dim, p.n_classes) for p in cavs)
    return dets, evaluate(dets, scn.gt_boxes(), bits)


def evaluate(dets, gts, bits: int) -> EvalResult:
    ap50, rec, prec = eval_ap_curve(dets, gts, 0.5)
    ap70 = eval_ap(dets, gts, 0.7)
    return EvalResult(ap50, ap70, rec, prec, int(bits))


def match_flags(dets: Sequence[Detection], gts: Sequence[BBox3D], iou_thr: float):
    """Greedy score-ordered matching; returns (sorted scores, true-positive flags)."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    taken = [False] * len(gts)
    tp = np.zeros(len(order))
    for r, i in enumerate(order):
        best, best_j = -1.0, -1
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            iou = bev_iou(dets[i].box, g)
            if iou >= iou_thr and iou > best:
                best, best_j = iou, j
        if best_j >= 0:
            taken[best_j] = True
            tp[r] = 1.0
    return np.array([dets[i].score for i in order]), tp


def pr_from_flags(tp: np.ndarray, n_gt: int):
    """All-point interpolated AP plus the raw recall/precision curve."""
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    ap = float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))
    return ap, recall, precision


def eval_ap_curve(dets: Sequence[Detection], gts: Sequence[BBox3D], iou_thr: float):
    if not gts:
        return (1.0 if not dets else 0.0), np.zeros(0), np.zeros(0)
    return pr_from_flags(match_flags(dets, gts, iou_thr)[1], len(gts))


def eval_ap(dets: Sequence[Detection], gts: Sequence[BBox3D], iou_thr: float) -> float:
    return eval_ap_curve(dets, gts, iou_thr)[0]


def single_agent_detections(scn: Scenario, agent_idx: int, params: ModelParams, emu: EmulatorConfig, score_threshold: float = 0.2):
    """Sin-head detections of one agent, in that agent's own frame."""
    q, c, s = emulate_detector(scn, agent_idx, emu, agent_rng(scn.seed, agent_idx))
    refs = heads.normalize_refs(c, scn.roi)
    box, logits, _ = heads.head_raw(q.astype(np.float32).astype(np.float64), refs, params.sin_head)
    return [d for d in heads.decode_detections(box, logits, scn.roi) if d.score > score_threshold]


def late_fusion_baseline(
    scn: Scenario,
    params: ModelParams,
    emu: EmulatorConfig = EmulatorConfig(),
    score_threshold: float = 0.2,
    nms_iou: float = 0.5,
):
    """Share thresholded boxes instead of queries; returns (detections, bandwidth_bits)."""
    ego_pose = scn.ego.pose
    merged, bits = [], 0
    for i in [0] + connected_agents(scn):
        dets = single_agent_detections(scn, i, params, emu, score_threshold)
        if i != 0:
            bits += len(dets) * 8 * 32
            e = relative_transform(scn.agents[i].pose, ego_pose)
            dets = [Detection(d.box.transformed(e), d.score, d.class_id) for d in dets]
        merged.extend(dets)
    return nms(merged, nms_iou), bits


# -- training -----------------------------------------------------------------


@dataclass
class TrainSample:
    batch: object
    gt: GroundTruth
    gt_ego: GroundTruth  # objects the ego itself can see


def make_sample(seed: int, params: ModelParams, pcfg: PipelineConfig, scfg: ScenarioConfig, emu: EmulatorConfig) -> TrainSample:
    scn = gen_scenario(seed, scfg)
    batch, _ = build_batch(scn, params, replace(pcfg, use_wire=False), emu)
    gts = scn.gt_boxes()
    own = [gts[j] for j in scn.visible_set(0)]
    return TrainSample(batch, GroundTruth.from_boxes(gts, scn.roi), GroundTruth.from_boxes(own, scn.roi))


@dataclass
class TrainResult:
    params: ModelParams
    log: list[dict]

    def smoothed(self, key: str = "total", window: int = 50) -> np.ndarray:
        vals = np.array([r[key] for r in self.log if "step" in r and key in r])
        if len(vals) == 0:
            return vals
        c = np.cumsum(np.concatenate([[0.0], vals]))
        out = np.empty(len(vals))
        for i in range(len(vals)):
            lo = max(0, i + 1 - window)
            out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
        return out


def mean_ap(params, seeds, pcfg: PipelineConfig, scfg: ScenarioConfig, emu: EmulatorConfig):
    res = [run_pipeline(gen_scenario(s, scfg), params, pcfg, emu)[1] for s in seeds]
    return float(np.mean([r.ap50 for r in res])), float(np.mean([r.ap70 for r in res]))


def train_toy(
    train_seeds: Sequence[int],
    val_seeds: Sequence[int],
    hyper: TrainConfig = TrainConfig(),
    mcfg: ModelConfig = ModelConfig(),
    pcfg: PipelineConfig = PipelineConfig(),
    scfg: ScenarioConfig = ScenarioConfig(),
    emu: EmulatorConfig = EmulatorConfig(),
    init: ModelParams | None = None,
) -> TrainResult:
    """Adam on MLN + EQFormer + both heads against the deep-supervision loss."""
    if mcfg.dim != emu.dim or mcfg.n_classes != emu.n_classes:
        raise ValueError("model and emulator dimensions disagree")
    params = copy.deepcopy(init) if init is not None else model.init_model(hyper.seed, mcfg)
    flat = nx.param_dict(params)
    samples = [make_sample(s, params, pcfg, scfg, emu) for s in train_seeds]
    loss_cfg = LossConfig(
        w_sin=hyper.w_sin, w_co=hyper.w_co, lambda_reg=hyper.lambda_reg, coop_layer_weights=tuple(hyper.coop_layer_weights)
    )
    opt = nx.Adam(lr=hyper.lr, clip_norm=hyper.clip_norm)
    rng = nx.make_rng(hyper.seed + 0x5EED)
    records: list[dict] = []
    last_good = copy.deepcopy(params)
    for step in range(hyper.steps):
        idx = rng.choice(len(samples), size=min(hyper.batch_size, len(samples)), replace=False)
        grads: dict[str, np.ndarray] = {}
        parts = []
        for i in sorted(idx):
            smp = samples[i]
            bd, g = model.loss_and_grads(params, smp.batch, smp.gt, pcfg.mask, scfg.roi, loss_cfg, smp.gt_ego)
            parts.append(bd)
            for name, val in g.items():
                grads[name] = grads[name] + val if name in grads else val
        total = float(np.mean([b.total for b in parts]))
        if not math.isfinite(total) or not all(np.all(np.isfinite(v)) for v in grads.values()):
            raise TrainingError(f"non-finite loss at step {step}", last_good)
        last_layer = [r for r in parts[0].per_layer if r["stage"] == "coop"][-1]["layer"]
        rec = {
            "step": step,
            "total": total,
            "single_cls": float(np.mean([b.single_cls for b in parts])),
            "single_reg": float(np.mean([b.single_reg for b in parts])),
            "coop_cls": float(np.mean([b.coop_cls for b in parts])),
            "coop_reg": float(np.mean([b.coop_reg for b in parts])),
            "final_layer": float(
                np.mean(
                    [
                        next(r["cls"] + hyper.lambda_reg * r["reg"] for r in b.per_layer if r["stage"] == "coop" and r["layer"] == last_layer)
                        for b in parts
                    ]
                )
            ),
        }
        records.append(rec)
        for name in grads:
            grads[name] /= len(idx)
        if step % 100 == 0:
            last_good = copy.deepcopy(params)
        if hyper.cosine_decay:
            opt.lr = hyper.lr * (0.05 + 0.95 * 0.5 * (1.0 + math.cos(math.pi * step / hyper.steps)))
        opt.step(flat, grads)
        if hyper.eval_every and val_seeds and (step + 1) % hyper.eval_every == 0:
            ap50, ap70 = mean_ap(params, val_seeds, pcfg, scfg, emu)
            records.append({"eval_step": step + 1, "val_ap50": ap50, "val_ap70": ap70})
            log.info("step %d loss %.4f val ap50 %.3f", step + 1, total, ap50)
    return TrainResult(params, records)


def write_log(path, records: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
