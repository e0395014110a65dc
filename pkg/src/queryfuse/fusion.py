"""Query alignment, interaction masks and the masked self-attention stack."""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .geometry import Pose, Transform, relative_transform, transform_points
from .numerics import AttentionParams, LayerNormParams, LinearParams
from .wire import QueryPayload


class CapacityError(ValueError):
    pass


@dataclass(frozen=True)
class MaskConfig:
    tau: float = 10.0
    theta: float = 0.20
    L: int = 4
    use_qsm: bool = True
    use_pcm: bool = True
    use_ssm: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.theta < 1.0:
            raise ValueError("theta must lie in [0, 1)")
        if self.L < 1:
            raise ValueError("L must be at least 1")


@dataclass
class MlnParams:
    enc1: LinearParams  # 16 -> H
    enc2: LinearParams  # H -> 2D, split into (gamma, beta)
    norm: LayerNormParams


@dataclass
class BlockParams:
    attn: AttentionParams
    norm1: LayerNormParams
    ffn1: LinearParams
    ffn2: LinearParams
    norm2: LayerNormParams


@dataclass
class EqFormerParams:
    blocks: list[BlockParams]


def init_mln(rng: np.random.Generator, dim: int, hidden: int | None = None) -> MlnParams:
    """Encoder starts as the identity modulation: gamma = 1, beta = 0."""
    hidden = hidden or dim
    enc1 = nx.init_params(rng, 16, hidden)
    enc2 = nx.init_params(rng, hidden, 2 * dim, scheme="zeros")
    enc2.bias[:dim] = 1.0
    return MlnParams(enc1, enc2, LayerNormParams.identity(dim))


def init_eqformer(rng: np.random.Generator, dim: int, heads: int = 4, ffn_width: int | None = None, n_blocks: int = 3) -> EqFormerParams:
    if dim % heads:
        raise nx.DimensionError(f"{heads} heads do not divide width {dim}")
    width = ffn_width or 2 * dim
    blocks = []
    for _ in range(n_blocks):
        attn = AttentionParams(*(nx.init_params(rng, dim, dim) for _ in range(4)), heads=heads)
        blocks.append(
            BlockParams(
                attn,
                LayerNormParams.identity(dim),
                nx.init_params(rng, dim, width),
                nx.init_params(rng, width, dim),
                LayerNormParams.identity(dim),
            )
        )
    return EqFormerParams(blocks)


# -- spatial alignment --------------------------------------------------------


def encode_transform(e: Transform) -> np.ndarray:
    return e.matrix.reshape(1, 16).astype(np.float64)


def mln_forward(q: np.ndarray, e: Transform, p: MlnParams):
    t = encode_transform(e)
    pre = nx.linear(t, p.enc1)
    hid = nx.relu(pre)
    gb = nx.linear(hid, p.enc2)[0]
    d = q.shape[1]
    gamma, beta = gb[:d], gb[d:]
    normed, ln_cache = nx.layer_norm(q, p.norm)
    return gamma * normed + beta, (t, pre, hid, gamma, normed, ln_cache)


def mln_backward(dout, cache, p: MlnParams, grads, prefix="mln"):
    t, pre, hid, gamma, normed, ln_cache = cache
    dgb = np.concatenate([(dout * normed).sum(axis=0), dout.sum(axis=0)])[None, :]
    dhid = nx.linear_backward(dgb, hid, p.enc2, grads, prefix + ".enc2")
    nx.linear_backward(dhid * (pre > 0), t, p.enc1, grads, prefix + ".enc1")
    return nx.layer_norm_backward(dout * gamma, ln_cache, p.norm, grads, prefix + ".norm")


def mln_align(q_cav: np.ndarray, e: Transform, p: MlnParams) -> np.ndarray:
    """Modulate layer-normalised CAV queries by the encoded CAV->ego transform."""
    return mln_forward(np.asarray(q_cav, dtype=np.float64), e, p)[0]


@dataclass
class AgentGroup:
    agent_id: int
    start: int
    transform: Transform | None  # None for the ego


@dataclass
class AlignedBatch:
    q_all: np.ndarray  # (L*k, D), CAV rows already MLN-aligned
    c_all: np.ndarray  # (L*k, 3), ego frame
    s_all: np.ndarray  # (L*k, C)
    valid: np.ndarray  # (L*k,) bool
    slot_agent: np.ndarray  # (L*k,) int, -1 on padding
    k: int
    q_raw: np.ndarray = field(repr=False, default=None)  # pre-MLN features
    groups: list[AgentGroup] = field(default_factory=list)

    @property
    def n_slots(self) -> int:
        return self.q_all.shape[0]


def align_and_concat(
    ego: QueryPayload,
    cavs: Sequence[QueryPayload],
    ego_pose: Pose,
    cfg: MaskConfig,
    p: MlnParams,
) -> AlignedBatch:
    if 1 + len(cavs) > cfg.L:
        raise CapacityError(f"{1 + len(cavs)} agents exceed capacity L={cfg.L}")
    k, d, c = ego.k, ego.dim, ego.n_classes
    for cav in cavs:
        if (cav.k, cav.dim, cav.n_classes) != (k, d, c):
            raise ValueError(
                f"agent {cav.agent_id} payload is k={cav.k}, D={cav.dim}, C={cav.n_classes}; ego has k={k}, D={d}, C={c}"
            )
    n = cfg.L * k
    q_raw = np.zeros((n, d))
    c_all = np.zeros((n, 3))
    s_all = np.zeros((n, c))
    valid = np.zeros(n, dtype=bool)
    slot_agent = np.full(n, -1, dtype=np.int64)

    q_raw[:k] = ego.features
    c_all[:k] = ego.centers
    s_all[:k] = ego.scores
    valid[:k] = True
    slot_agent[:k] = ego.agent_id
    groups = [AgentGroup(ego.agent_id, 0, None)]
    q_all = q_raw.copy()
    for i, cav in enumerate(sorted(cavs, key=lambda pl: pl.agent_id), start=1):
        sl = slice(i * k, (i + 1) * k)
        e = relative_transform(cav.pose, ego_pose)
        q_raw[sl] = cav.features
        q_all[sl] = mln_align(q_raw[sl], e, p)
        c_all[sl] = transform_points(e, cav.centers.astype(np.float64))
        s_all[sl] = cav.scores
        valid[sl] = True
        slot_agent[sl] = cav.agent_id
        groups.append(AgentGroup(cav.agent_id, i * k, e))
    return AlignedBatch(q_all, c_all, s_all, valid, slot_agent, k, q_raw, groups)


# -- masks --------------------------------------------------------------------


@dataclass
class AttnMask:
    blocked: np.ndarray  # (n, n) bool, True = no interaction

    @property
    def shape(self):
        return self.blocked.shape


def build_qsm(valid) -> AttnMask:
    v = np.asarray(valid, dtype=bool)
    return AttnMask(~(v[:, None] & v[None, :]))


def build_pcm(c_all, tau: float) -> AttnMask:
    if not tau > 0:
        raise ValueError("tau must be positive")
    c = np.asarray(c_all, dtype=np.float64)
    diff = c[:, None, :] - c[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    return AttnMask(dist > tau)


def build_ssm(s_all, theta: float) -> AttnMask:
    s = np.asarray(s_all, dtype=np.float64)
    low = s.max(axis=1) <= theta
    return AttnMask(low[:, None] | low[None, :])


def combine_masks(*masks: AttnMask) -> AttnMask:
    """Union of blocking, then every slot may always attend to itself."""
    shapes = {m.shape for m in masks}
    if len(shapes) != 1:
        raise ValueError(f"mask shapes differ: {shapes}")
    blocked = np.zeros(masks[0].shape, dtype=bool)
    for m in masks:
        blocked |= m.blocked
    np.fill_diagonal(blocked, False)
    return AttnMask(blocked)


def to_additive(m: AttnMask) -> np.ndarray:
    return np.where(m.blocked, nx.NEG_BLOCK, 0.0)


def build_mask(batch: AlignedBatch, cfg: MaskConfig) -> AttnMask:
    n = batch.n_slots
    parts = [AttnMask(np.zeros((n, n), dtype=bool))]
    if cfg.use_qsm:
        parts.append(build_qsm(batch.valid))
    if cfg.use_pcm and math.isfinite(cfg.tau):
        parts.append(build_pcm(batch.c_all, cfg.tau))
    if cfg.use_ssm:
        parts.append(build_ssm(batch.s_all, cfg.theta))
    return combine_masks(*parts)


# -- EQFormer -----------------------------------------------------------------


def masked_mhsa(x: np.ndarray, mask: AttnMask, params: AttentionParams) -> np.ndarray:
    return nx.mhsa(np.asarray(x, dtype=np.float64), to_additive(mask), params)[0]


def block_forward(x, add_mask, p: BlockParams):
    a, attn_c = nx.mhsa(x, add_mask, p.attn)
    x1, ln1_c = nx.layer_norm(x + a, p.norm1)
    f, ffn_c = nx.ffn(x1, p.ffn1, p.ffn2)
    x2, ln2_c = nx.layer_norm(x1 + f, p.norm2)
    return x2, (attn_c, ln1_c, ffn_c, ln2_c)


def block_backward(dout, cache, p: BlockParams, grads, prefix):
    attn_c, ln1_c, ffn_c, ln2_c = cache
    dz = nx.layer_norm_backward(dout, ln2_c, p.norm2, grads, prefix + ".norm2")
    dx1 = dz + nx.ffn_backward(dz, ffn_c, p.ffn1, p.ffn2, grads, prefix)
    dy = nx.layer_norm_backward(dx1, ln1_c, p.norm1, grads, prefix + ".norm1")
    return dy + nx.mhsa_backward(dy, attn_c, p.attn, grads, prefix + ".attn")


def eqformer_stack(x: np.ndarray, add_mask: np.ndarray, params: EqFormerParams):
    outs, caches = [], []
    for blk in params.blocks:
        x, c = block_forward(x, add_mask, blk)
        outs.append(x)
        caches.append(c)
    return outs, caches


def eqformer_backward(d_outs: Sequence[np.ndarray | None], caches, params: EqFormerParams, grads, prefix="eqformer"):
    """Backpropagate per-layer output gradients; returns the input gradient."""
    g = None
    for b in reversed(range(len(params.blocks))):
        if d_outs[b] is not None:
            g = d_outs[b] if g is None else g + d_outs[b]
        if g is None:
            continue
        g = block_backward(g, caches[b], params.blocks[b], grads, f"{prefix}.blocks.{b}")
    return g


def eqformer_forward(batch: AlignedBatch, cfg: MaskConfig, params: EqFormerParams) -> list[np.ndarray]:
    """Outputs of every block; the last one is the fused query sequence."""
    add_mask = to_additive(build_mask(batch, cfg))
    return eqformer_stack(batch.q_all, add_mask, params)[0]


# -- checkpoints --------------------------------------------------------------

CKPT_MAGIC = b"QFCK"


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write named float32 arrays: magic, u32 manifest length, JSON manifest, blob.

    Entries are ordered by name; offsets are byte offsets into the blob.
    """
    path = Path(path)
    entries, chunks, off = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape), "offset": off})
        chunks.append(a.tobytes())
        off += a.nbytes
    manifest = json.dumps({"version": 1, "meta": meta or {}, "entries": entries}, sort_keys=True).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<I", len(manifest)) + manifest)
        for ch in chunks:
            fh.write(ch)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (mlen,) = struct.unpack_from("<I", raw, 4)
    manifest = json.loads(raw[8 : 8 + mlen])
    blob = raw[8 + mlen :]
    out = {}
    for ent in manifest["entries"]:
        count = int(np.prod(ent["shape"])) if ent["shape"] else 1
        a = np.frombuffer(blob, dtype="<f4", count=count, offset=ent["offset"])
        out[ent["name"]] = a.reshape(ent["shape"]).astype(np.float64)
    return out, manifest["meta"]
