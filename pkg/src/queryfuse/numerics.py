"""Dense building blocks with hand-written backward passes.

Every forward function returns its output together with a cache; the matching
``*_backward`` function consumes that cache. Gradients are accumulated into a
flat ``dict`` keyed by the dotted parameter names produced by
:func:`named_arrays`, so shared modules sum their contributions naturally.

Attention reductions over the key axis run sequentially (``cumsum``) in a
content-determined key order. Blocked keys then contribute an exact ``+0.0``
wherever they sit, and reordering the slots reorders nothing inside a sum,
which is what makes padding invariance and permutation equivariance hold
bit-for-bit rather than to rounding.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

NEG_BLOCK = -1e9


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class GradCheckError(ArithmeticError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 stream; identical seeds give identical draws on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed) & ((1 << 64) - 1)))


@dataclass
class LinearParams:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(f"linear shapes {self.weight.shape} / {self.bias.shape}")


@dataclass
class LayerNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("layer norm epsilon must be positive")

    @classmethod
    def identity(cls, dim: int) -> "LayerNormParams":
        return cls(np.ones(dim), np.zeros(dim))


@dataclass
class AttentionParams:
    wq: LinearParams
    wk: LinearParams
    wv: LinearParams
    wo: LinearParams
    heads: int = 4


def named_arrays(obj, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
    """Yield ``(dotted_name, array)`` for every array leaf of a params tree."""
    if isinstance(obj, np.ndarray):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            name = f"{prefix}.{f.name}" if prefix else f.name
            yield from named_arrays(getattr(obj, f.name), name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_arrays(item, f"{prefix}.{i}" if prefix else str(i))


def param_dict(obj) -> dict[str, np.ndarray]:
    return dict(named_arrays(obj))


def _acc(grads: dict | None, name: str, value: np.ndarray) -> None:
    if grads is None:
        return
    if name in grads:
        grads[name] = grads[name] + value
    else:
        grads[name] = np.array(value, dtype=np.float64)


def init_params(rng: np.random.Generator, fan_in: int, fan_out: int, scheme: str = "glorot_uniform") -> LinearParams:
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError("dimensions must be positive")
    if scheme == "glorot_uniform":
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
    elif scheme == "zeros":
        w = np.zeros((fan_out, fan_in))
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return LinearParams(w, np.zeros(fan_out))


# -- primitives ---------------------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def linear(x: np.ndarray, p: LinearParams) -> np.ndarray:
    if x.shape[-1] != p.weight.shape[1]:
        raise DimensionError(f"linear expects last dim {p.weight.shape[1]}, got {x.shape}")
    # einsum's own loop reduces each row independently of how many rows there
    # are; BLAS kernels do not, which would make padding leak into valid rows.
    return np.einsum("...i,oi->...o", x, p.weight) + p.bias


def linear_backward(dout, x, p: LinearParams, grads=None, prefix="") -> np.ndarray:
    _acc(grads, prefix + ".weight", dout.T @ x)
    _acc(grads, prefix + ".bias", dout.sum(axis=0))
    return dout @ p.weight


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def layer_norm(x: np.ndarray, p: LayerNormParams):
    if x.shape[-1] != p.gamma.shape[0]:
        raise DimensionError(f"layer norm over {p.gamma.shape[0]}, got {x.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + p.eps)
    xhat = xc * inv
    return p.gamma * xhat + p.beta, (xhat, inv)


def layer_norm_backward(dout, cache, p: LayerNormParams, grads=None, prefix=""):
    xhat, inv = cache
    _acc(grads, prefix + ".gamma", (dout * xhat).sum(axis=0))
    _acc(grads, prefix + ".beta", dout.sum(axis=0))
    dxhat = dout * p.gamma
    d = xhat.shape[-1]
    return inv / d * (d * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))


def _seq_sum_last(a: np.ndarray) -> np.ndarray:
    """Left-to-right sum over the last axis (no pairwise regrouping)."""
    return np.cumsum(a, axis=-1)[..., -1]


def softmax_masked(logits: np.ndarray, additive_mask: np.ndarray) -> np.ndarray:
    """Row softmax of ``logits + additive_mask`` (mask entries 0 or NEG_BLOCK)."""
    if logits.shape != additive_mask.shape:
        raise DimensionError(f"logits {logits.shape} vs mask {additive_mask.shape}")
    if np.any(np.all(additive_mask <= NEG_BLOCK, axis=-1)):
        raise ContractError("softmax row is fully blocked")
    z = logits + additive_mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / _seq_sum_last(e)[..., None]


def softmax_backward(dprobs, probs):
    return probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))


def canonical_order(x: np.ndarray) -> np.ndarray:
    """Slot order determined by row content only (lexicographic)."""
    return np.lexsort(x.T[::-1])


def mhsa(x: np.ndarray, additive_mask: np.ndarray, p: AttentionParams):
    """Masked multi-head self-attention; returns (out, cache)."""
    n, d = x.shape
    h = p.heads
    if d % h:
        raise DimensionError(f"{h} heads do not divide width {d}")
    dh = d // h
    q = linear(x, p.wq)
    k = linear(x, p.wk)
    v = linear(x, p.wv)
    order = canonical_order(x)
    qh = q.reshape(n, h, dh).transpose(1, 0, 2)  # (h, n, dh)
    kh = k[order].reshape(n, h, dh).transpose(1, 0, 2)
    vh = v[order].reshape(n, h, dh).transpose(1, 0, 2)
    scale = 1.0 / math.sqrt(dh)
    logits = _seq_sum_last(qh[:, :, None, :] * kh[:, None, :, :]) * scale  # (h, n, n)
    probs = softmax_masked(logits, np.broadcast_to(additive_mask[:, order], logits.shape))
    # (h, n, n, dh) summed left to right over keys
    oh = np.cumsum(probs[..., None] * vh[:, None, :, :], axis=2)[:, :, -1, :]
    concat = oh.transpose(1, 0, 2).reshape(n, d)
    out = linear(concat, p.wo)
    inv_order = np.empty_like(order)
    inv_order[order] = np.arange(n)
    probs_orig = probs[:, :, inv_order]
    return out, (x, q, k, v, probs_orig, concat)


def mhsa_backward(dout, cache, p: AttentionParams, grads=None, prefix=""):
    x, q, k, v, probs, concat = cache
    n, d = x.shape
    h = p.heads
    dh = d // h
    scale = 1.0 / math.sqrt(dh)
    dconcat = linear_backward(dout, concat, p.wo, grads, prefix + ".wo")
    doh = dconcat.reshape(n, h, dh).transpose(1, 0, 2)
    qh = q.reshape(n, h, dh).transpose(1, 0, 2)
    kh = k.reshape(n, h, dh).transpose(1, 0, 2)
    vh = v.reshape(n, h, dh).transpose(1, 0, 2)
    dprobs = doh @ vh.transpose(0, 2, 1)
    dvh = probs.transpose(0, 2, 1) @ doh
    dlogits = softmax_backward(dprobs, probs) * scale
    dqh = dlogits @ kh
    dkh = dlogits.transpose(0, 2, 1) @ qh
    dq = dqh.transpose(1, 0, 2).reshape(n, d)
    dk = dkh.transpose(1, 0, 2).reshape(n, d)
    dv = dvh.transpose(1, 0, 2).reshape(n, d)
    dx = linear_backward(dq, x, p.wq, grads, prefix + ".wq")
    dx = dx + linear_backward(dk, x, p.wk, grads, prefix + ".wk")
    dx = dx + linear_backward(dv, x, p.wv, grads, prefix + ".wv")
    return dx


def plain_mhsa(x: np.ndarray, p: AttentionParams) -> np.ndarray:
    """Textbook unmasked MHSA with BLAS matmuls (reference path)."""
    n, d = x.shape
    dh = d // p.heads
    q = (x @ p.wq.weight.T + p.wq.bias).reshape(n, p.heads, dh).transpose(1, 0, 2)
    k = (x @ p.wk.weight.T + p.wk.bias).reshape(n, p.heads, dh).transpose(1, 0, 2)
    v = (x @ p.wv.weight.T + p.wv.bias).reshape(n, p.heads, dh).transpose(1, 0, 2)
    s = q @ k.transpose(0, 2, 1) / math.sqrt(dh)
    s = np.exp(s - s.max(-1, keepdims=True))
    s /= s.sum(-1, keepdims=True)
    o = (s @ v).transpose(1, 0, 2).reshape(n, d)
    return o @ p.wo.weight.T + p.wo.bias


def ffn(x, p1: LinearParams, p2: LinearParams):
    pre = linear(x, p1)
    hid = relu(pre)
    return linear(hid, p2), (x, pre, hid)


def ffn_backward(dout, cache, p1, p2, grads=None, prefix=""):
    x, pre, hid = cache
    dhid = linear_backward(dout, hid, p2, grads, prefix + ".ffn2")
    dpre = dhid * (pre > 0)
    return linear_backward(dpre, x, p1, grads, prefix + ".ffn1")


# -- verification and optimisation -------------------------------------------


@dataclass
class GradReport:
    tol: float
    max_rel_err: dict[str, float]
    n_checked: dict[str, int]
    floor: float = 0.0

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.max_rel_err.values())

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.max_rel_err, key=self.max_rel_err.get)
        return name, self.max_rel_err[name]


def finite_diff_check(
    f: Callable[[], float],
    params: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    h: float = 1e-6,
    tol: float = 1e-4,
    floor: float | None = None,
    max_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradReport:
    """Compare analytic gradients to central differences, entry by entry.

    ``f`` must read the arrays in ``params`` in place. The relative error of an
    entry is ``|a - n| / max(|a|, |n|, floor)``. Unless given, ``floor`` is set
    so that central-difference rounding noise (about ``eps * |f| / h``) alone
    stays a decade below ``tol``; smaller entries are effectively compared in
    absolute terms.
    """
    f0 = f()
    if not math.isfinite(f0):
        raise GradCheckError("objective is not finite")
    if floor is None:
        noise = np.finfo(np.float64).eps * max(abs(f0), 1.0) / h
        floor = max(1e-6, 10.0 * noise / tol)
    errs, counts = {}, {}
    for name, arr in params.items():
        if arr.dtype != np.float64:
            raise GradCheckError(f"{name}: finite differences need float64")
        g = analytic.get(name, np.zeros_like(arr))
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = (rng or make_rng(0)).choice(flat.size, max_per_param, replace=False)
        worst = 0.0
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise GradCheckError(f"{name}[{i}]: objective is not finite")
            num = (fp - fm) / (2.0 * h)
            a = float(g.reshape(-1)[i])
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
        errs[name] = worst
        counts[name] = len(idx)
    return GradReport(tol, errs, counts, floor)


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm: float | None = None):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        scale = 1.0
        if self.clip_norm is not None:
            total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if total > self.clip_norm:
                scale = self.clip_norm / total
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for name in sorted(params):
            if name not in grads:
                continue
            g = grads[name] * scale
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
