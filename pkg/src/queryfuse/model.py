"""End-to-end trainable cooperative stage: MLN + EQFormer + task heads."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import fusion, heads
from . import numerics as nx
from .fusion import AlignedBatch, EqFormerParams, MaskConfig, MlnParams
from .heads import GroundTruth, HeadParams, LayerPred, LossConfig, Roi


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 32
    heads: int = 4
    ffn_width: int = 0  # 0 -> 2 * dim
    mln_hidden: int = 0  # 0 -> dim
    n_classes: int = 1
    n_blocks: int = 3


POS_FREQS = (1.0, 2.0, 4.0, 8.0, 16.0, 32.0)


def pos_code(refs: np.ndarray) -> np.ndarray:
    """Multi-frequency sin/cos code of roi-normalised reference points."""
    ang = 2.0 * np.pi * refs[:, :, None] * np.asarray(POS_FREQS)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=2).reshape(len(refs), -1)


@dataclass
class ModelParams:
    mln: MlnParams
    eqformer: EqFormerParams
    co_head: HeadParams
    sin_head: HeadParams
    pos: nx.LinearParams  # sinusoidal reference-point code -> D, added to valid slots


def init_model(seed: int, cfg: ModelConfig = ModelConfig()) -> ModelParams:
    rng = nx.make_rng(seed)
    return ModelParams(
        fusion.init_mln(rng, cfg.dim, cfg.mln_hidden or cfg.dim),
        fusion.init_eqformer(rng, cfg.dim, cfg.heads, cfg.ffn_width or 2 * cfg.dim, cfg.n_blocks),
        heads.init_head(rng, cfg.dim, cfg.n_classes),
        heads.init_head(rng, cfg.dim, cfg.n_classes),
        nx.init_params(rng, 6 * len(POS_FREQS), cfg.dim),
    )


@dataclass
class Forward:
    coop: list[LayerPred]
    single: list[LayerPred]
    caches: tuple


def forward(params: ModelParams, batch: AlignedBatch, mask_cfg: MaskConfig, roi: Roi, single: bool = True) -> Forward:
    x = batch.q_raw.astype(np.float64, copy=True)
    mln_caches = []
    for g in batch.groups:
        if g.transform is None:
            continue
        sl = slice(g.start, g.start + batch.k)
        x[sl], c = fusion.mln_forward(batch.q_raw[sl], g.transform, params.mln)
        mln_caches.append((sl, c))
    refs = heads.normalize_refs(batch.c_all, roi)
    code = pos_code(refs)
    x += nx.linear(code, params.pos) * batch.valid[:, None]
    add_mask = fusion.to_additive(fusion.build_mask(batch, mask_cfg))
    outs, eq_caches = fusion.eqformer_stack(x, add_mask, params.eqformer)
    coop, co_caches = [], []
    for out in outs:
        box, logits, c = heads.head_raw(out, refs, params.co_head)
        coop.append(LayerPred(box, logits, batch.valid))
        co_caches.append(c)
    sing, sin_caches = [], []
    if single:
        k = batch.k
        box, logits, c = heads.head_raw(batch.q_raw[:k].astype(np.float64), refs[:k], params.sin_head)
        sing.append(LayerPred(box, logits, np.ones(k, dtype=bool)))
        sin_caches.append(c)
    return Forward(coop, sing, (mln_caches, eq_caches, co_caches, sin_caches, (code, batch.valid)))


def backward(params: ModelParams, fwd: Forward, coop_grads, single_grads) -> dict[str, np.ndarray]:
    mln_caches, eq_caches, co_caches, sin_caches, (code, valid) = fwd.caches
    grads: dict[str, np.ndarray] = {}
    for (d_box, d_logits), c in zip(single_grads, sin_caches):
        heads.head_backward(d_box, d_logits, c, params.sin_head, grads, "sin_head")
    d_outs = []
    for (d_box, d_logits), c in zip(coop_grads, co_caches):
        if d_box is None and d_logits is None:
            d_outs.append(None)
        else:
            d_outs.append(heads.head_backward(d_box, d_logits, c, params.co_head, grads, "co_head"))
    dx = fusion.eqformer_backward(d_outs, eq_caches, params.eqformer, grads)
    if dx is not None:
        nx.linear_backward(dx * valid[:, None], code, params.pos, grads, "pos")
        for sl, c in mln_caches:
            fusion.mln_backward(dx[sl], c, params.mln, grads)
    return grads


def loss_and_grads(params, batch: AlignedBatch, gt: GroundTruth, mask_cfg: MaskConfig, roi: Roi, loss_cfg: LossConfig, gt_single=None):
    fwd = forward(params, batch, mask_cfg, roi, single=loss_cfg.w_sin != 0.0)
    bd, sg, cg = heads.supervised_loss(fwd.single, fwd.coop, gt, loss_cfg, gt_single)
    return bd, backward(params, fwd, cg, sg)


def loss_only(params, batch, gt, mask_cfg, roi, loss_cfg, gt_single=None) -> float:
    fwd = forward(params, batch, mask_cfg, roi, single=loss_cfg.w_sin != 0.0)
    return heads.supervised_loss(fwd.single, fwd.coop, gt, loss_cfg, gt_single)[0].total


# -- checkpoint glue ----------------------------------------------------------


def save(path, params: ModelParams, cfg: ModelConfig, extra: dict | None = None):
    meta = {"model": asdict(cfg), **(extra or {})}
    return fusion.save_checkpoint(path, nx.param_dict(params), meta)


def load(path) -> tuple[ModelParams, ModelConfig, dict]:
    arrays, meta = fusion.load_checkpoint(path)
    cfg = ModelConfig(**meta["model"])
    params = init_model(0, cfg)
    target = nx.param_dict(params)
    missing = set(target) ^ set(arrays)
    if missing:
        raise ValueError(f"checkpoint {path} does not match the model layout: {sorted(missing)[:5]}")
    for name, arr in target.items():
        arr[...] = arrays[name]
    return params, cfg, meta
