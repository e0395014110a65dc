"""Detection heads, bipartite matching and the two-stage supervision loss.

A prediction is carried as an 8-vector per query in normalised units::

    (cx, cy, cz, log l, log w, log h, sin yaw, cos yaw)

where the centre is ``reference point + regressed offset`` in roi-normalised
coordinates. Ground-truth boxes are encoded the same way, with yaw folded into
(-pi/2, pi/2] because a BEV rectangle is unchanged by a half turn.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .geometry import BBox3D
from .numerics import LinearParams


@dataclass(frozen=True)
class Roi:
    lo: tuple[float, float, float] = (-50.0, -50.0, -3.0)
    hi: tuple[float, float, float] = (50.0, 50.0, 3.0)

    def __post_init__(self):
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"degenerate roi {self.lo} .. {self.hi}")

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.hi) - np.asarray(self.lo)

    def contains(self, pt) -> bool:
        p = np.asarray(pt)
        return bool(np.all(p >= self.lo) and np.all(p <= self.hi))


@dataclass
class Detection:
    box: BBox3D
    score: float
    class_id: int = 0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass
class HeadParams:
    reg1: LinearParams
    reg2: LinearParams  # D -> 8
    cls1: LinearParams
    cls2: LinearParams  # D -> C


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]  # (prediction, ground truth)
    cost: float = 0.0


def init_head(rng: np.random.Generator, dim: int, n_classes: int = 1, prior: float = 0.1) -> HeadParams:
    reg2 = nx.init_params(rng, dim, 8)
    reg2.weight *= 0.1
    cls2 = nx.init_params(rng, dim, n_classes)
    cls2.bias[:] = -math.log((1.0 - prior) / prior)
    return HeadParams(nx.init_params(rng, dim, dim), reg2, nx.init_params(rng, dim, dim), cls2)


def normalize_refs(c_all, roi: Roi) -> np.ndarray:
    c = np.asarray(c_all, dtype=np.float64).reshape(-1, 3)
    return np.clip((c - np.asarray(roi.lo)) / roi.extent, 0.0, 1.0)


def fold_yaw(yaw: float) -> float:
    """Map yaw into (-pi/2, pi/2]."""
    y = math.fmod(yaw, math.pi)
    if y <= -math.pi / 2:
        y += math.pi
    elif y > math.pi / 2:
        y -= math.pi
    return y


def encode_box(box: BBox3D, roi: Roi) -> np.ndarray:
    y = fold_yaw(box.yaw)
    centre = (box.center - np.asarray(roi.lo)) / roi.extent
    return np.concatenate([centre, np.log(box.size), [math.sin(y), math.cos(y)]])


def encode_boxes(boxes: Sequence[BBox3D], roi: Roi) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 8))
    return np.stack([encode_box(b, roi) for b in boxes])


def decode_box(vec: np.ndarray, roi: Roi) -> BBox3D:
    centre = np.asarray(roi.lo) + vec[:3] * roi.extent
    size = np.exp(np.clip(vec[3:6], -10.0, 10.0))
    return BBox3D(centre, size, math.atan2(vec[6], vec[7]))


def head_raw(q: np.ndarray, refs: np.ndarray, p: HeadParams):
    """Return (box vectors, class logits, cache)."""
    if q.shape[0] != refs.shape[0]:
        raise nx.DimensionError(f"{q.shape[0]} queries vs {refs.shape[0]} reference points")
    r_pre = nx.linear(q, p.reg1)
    r_hid = nx.relu(r_pre)
    reg = nx.linear(r_hid, p.reg2)
    c_pre = nx.linear(q, p.cls1)
    c_hid = nx.relu(c_pre)
    logits = nx.linear(c_hid, p.cls2)
    box = reg.copy()
    box[:, :3] += refs
    return box, logits, (q, r_pre, r_hid, c_pre, c_hid)


def head_backward(d_box, d_logits, cache, p: HeadParams, grads, prefix):
    q, r_pre, r_hid, c_pre, c_hid = cache
    dq = np.zeros_like(q)
    if d_box is not None:
        dh = nx.linear_backward(d_box, r_hid, p.reg2, grads, prefix + ".reg2")
        dq += nx.linear_backward(dh * (r_pre > 0), q, p.reg1, grads, prefix + ".reg1")
    if d_logits is not None:
        dh = nx.linear_backward(d_logits, c_hid, p.cls2, grads, prefix + ".cls2")
        dq += nx.linear_backward(dh * (c_pre > 0), q, p.cls1, grads, prefix + ".cls1")
    return dq


def decode_detections(box: np.ndarray, logits: np.ndarray, roi: Roi, rows=None) -> list[Detection]:
    probs = nx.sigmoid(logits)
    rows = range(len(box)) if rows is None else rows
    return [
        Detection(decode_box(box[i], roi), float(probs[i].max()), int(probs[i].argmax()))
        for i in rows
    ]


def head_forward(q: np.ndarray, refs: np.ndarray, p: HeadParams, roi: Roi) -> list[Detection]:
    box, logits, _ = head_raw(np.asarray(q, dtype=np.float64), refs, p)
    return decode_detections(box, logits, roi)


# -- matching -----------------------------------------------------------------


def linear_assignment(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost one-to-one assignment (Hungarian method with potentials).

    Handles rectangular matrices; returns min(n, m) (row, col) pairs sorted by row.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a matrix")
    n, m = cost.shape
    if n == 0 or m == 0:
        return []
    transposed = n > m
    if transposed:
        cost = cost.T
        n, m = m, n
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # column -> row (1-based, 0 = free)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            idx = np.nonzero(used)[0]
            u[owner[idx]] += delta
            v[idx] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    pairs = [(int(owner[j]) - 1, j - 1) for j in range(1, m + 1) if owner[j]]
    if transposed:
        pairs = [(c, r) for r, c in pairs]
    return sorted(pairs)


def match_cost(box, probs, gt_vecs, gt_classes, w_cls=1.0, w_box=1.0) -> np.ndarray:
    """Pair cost: w_cls * (1 - p[gt class]) + w_box * L1 over the 8 box parameters."""
    cls_term = 1.0 - probs[:, np.asarray(gt_classes, dtype=np.int64)]
    box_term = np.abs(box[:, None, :] - gt_vecs[None, :, :]).sum(axis=-1)
    return w_cls * cls_term + w_box * box_term


def hungarian_match(box, probs, gt_vecs, gt_classes, w_cls=1.0, w_box=1.0) -> Assignment:
    if len(gt_vecs) == 0 or len(box) == 0:
        return Assignment([], 0.0)
    cost = match_cost(box, probs, gt_vecs, gt_classes, w_cls, w_box)
    pairs = linear_assignment(cost)
    return Assignment(pairs, float(sum(cost[i, j] for i, j in pairs)))


# -- loss ---------------------------------------------------------------------


@dataclass
class GroundTruth:
    vecs: np.ndarray  # (m, 8) encoded boxes
    classes: np.ndarray  # (m,) int

    @classmethod
    def from_boxes(cls, boxes: Sequence[BBox3D], roi: Roi, classes=None) -> "GroundTruth":
        cl = np.zeros(len(boxes), dtype=np.int64) if classes is None else np.asarray(classes, dtype=np.int64)
        return cls(encode_boxes(boxes, roi), cl)


@dataclass
class LayerPred:
    box: np.ndarray  # (n, 8)
    logits: np.ndarray  # (n, C)
    valid: np.ndarray  # (n,) bool; only valid rows are matched and supervised


@dataclass
class LayerLoss:
    cls: float
    reg: float
    d_box: np.ndarray
    d_logits: np.ndarray
    assignment: Assignment


@dataclass
class LossConfig:
    w_sin: float = 1.0
    w_co: float = 1.0
    lambda_reg: float = 5.0
    w_cls_match: float = 1.0
    w_box_match: float = 1.0
    coop_layer_weights: tuple[float, ...] = (1.0, 1.0, 1.0)


@dataclass
class LossBreakdown:
    total: float
    single_cls: float
    single_reg: float
    coop_cls: float
    coop_reg: float
    per_layer: list[dict] = field(default_factory=list)

    def as_record(self) -> dict:
        return {
            "total": self.total,
            "single_cls": self.single_cls,
            "single_reg": self.single_reg,
            "coop_cls": self.coop_cls,
            "coop_reg": self.coop_reg,
            "per_layer": self.per_layer,
        }


def bce_with_logits(x, t):
    return np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))


def layer_loss(pred: LayerPred, gt: GroundTruth, cfg: LossConfig) -> LayerLoss:
    """Binary cross-entropy over valid queries plus L1 on matched box vectors.

    Matching is recomputed for this layer and treated as a constant.
    """
    rows = np.nonzero(pred.valid)[0]
    n_cls = pred.logits.shape[1]
    d_box = np.zeros_like(pred.box)
    d_logits = np.zeros_like(pred.logits)
    if len(rows) == 0:
        return LayerLoss(0.0, 0.0, d_box, d_logits, Assignment([]))
    box, logits = pred.box[rows], pred.logits[rows]
    asg = hungarian_match(box, nx.sigmoid(logits), gt.vecs, gt.classes, cfg.w_cls_match, cfg.w_box_match)
    target = np.zeros_like(logits)
    for i, j in asg.pairs:
        target[i, gt.classes[j]] = 1.0
    denom = logits.size
    cls = float(bce_with_logits(logits, target).sum() / denom)
    d_logits[rows] = (nx.sigmoid(logits) - target) / denom
    reg = 0.0
    if asg.pairs:
        pi = np.array([i for i, _ in asg.pairs])
        gj = np.array([j for _, j in asg.pairs])
        diff = box[pi] - gt.vecs[gj]
        reg = float(np.abs(diff).sum() / len(pi))
        d_box[rows[pi]] = np.sign(diff) / len(pi)
    mapped = Assignment([(int(rows[i]), j) for i, j in asg.pairs], asg.cost)
    return LayerLoss(cls, reg, d_box, d_logits, mapped)


def supervised_loss(
    single_layers: Sequence[LayerPred],
    coop_layers: Sequence[LayerPred],
    gt: GroundTruth,
    cfg: LossConfig = LossConfig(),
    gt_single: GroundTruth | None = None,
):
    """Weighted two-stage deep-supervision loss.

    ``gt_single`` (default ``gt``) is the label set of the single-agent stage.

    Returns ``(breakdown, single_grads, coop_grads)`` where each grads list holds a
    ``(d_box, d_logits)`` pair per layer, already scaled by the stage and layer
    weights and by ``lambda_reg`` for the box part.
    """
    lam = cfg.lambda_reg
    records = []
    sin_cls = sin_reg = co_cls = co_reg = 0.0
    single_grads, coop_grads = [], []
    for i, pred in enumerate(single_layers):
        ll = layer_loss(pred, gt if gt_single is None else gt_single, cfg)
        sin_cls += ll.cls
        sin_reg += ll.reg
        single_grads.append((cfg.w_sin * lam * ll.d_box, cfg.w_sin * ll.d_logits))
        records.append({"stage": "single", "layer": i, "cls": ll.cls, "reg": ll.reg, "weight": 1.0})
    weights = list(cfg.coop_layer_weights)
    if len(weights) < len(coop_layers):
        weights = [1.0] * (len(coop_layers) - len(weights)) + weights
    weights = weights[-len(coop_layers):] if coop_layers else []
    for i, (pred, w) in enumerate(zip(coop_layers, weights)):
        if w == 0.0:
            coop_grads.append((None, None))
            records.append({"stage": "coop", "layer": i, "cls": None, "reg": None, "weight": 0.0})
            continue
        ll = layer_loss(pred, gt, cfg)
        co_cls += w * ll.cls
        co_reg += w * ll.reg
        coop_grads.append((cfg.w_co * w * lam * ll.d_box, cfg.w_co * w * ll.d_logits))
        records.append({"stage": "coop", "layer": i, "cls": ll.cls, "reg": ll.reg, "weight": w})
    total = cfg.w_sin * (sin_cls + lam * sin_reg) + cfg.w_co * (co_cls + lam * co_reg)
    return LossBreakdown(total, sin_cls, sin_reg, co_cls, co_reg, records), single_grads, coop_grads
