"""Attention variants behind a single scaled dot-product kernel.

Every variant reduces to the same per-head computation,
``softmax(q k^T / sqrt(d_k)) v``; the variants only differ in which per-token
tensors get projected (and cached) from the kv-side input and how each head's
``k`` and ``v`` are rebuilt from them:

=================  ===============================  ==========================
variant            cached per token                 head i uses
=================  ===============================  ==========================
QKV                K_i, V_i for every head          K_i, V_i
QV                 V_i for every head               V_i, V_i
MQA / GQA          K_j, V_j per kv group            K_g(i), V_g(i)
QVVV               V_j per kv group                 V_g(i), V_g(i)
VSHARED_UNIQUE_K   K_i per head, V_j per group      K_i, V_g(i)
MLA_LITE           latent c = x W_dkv               c W_i^uk, c W_i^uv
QV_KA              V_i per head, context G = x W_ctx  [G; V_i] W_i^K, V_i
=================  ===============================  ==========================

with ``g(i) = floor(i * g / h)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import GROUPED, ConfigError, ModelConfig, PosKind, VariantKind
from .positional import agf_pos_coeff, apply_positions, sinusoidal_pe
from .tensor import (
    Tensor,
    add,
    as_tensor,
    concat_last,
    matmul,
    mul_elementwise,
    no_grad,
    scale,
    softmax_rows,
    transpose,
)


@dataclass
class LayerWeights:
    """Projection matrices for one attention layer.

    ``wv`` and (for GQA/MQA) ``wk`` hold one matrix per kv group rather than
    per head, so heads of a group share the identical object.
    """

    wq: list[Tensor]
    wo: Tensor
    wk: list[Tensor] = field(default_factory=list)
    wv: list[Tensor] = field(default_factory=list)
    w_ctx: Tensor | None = None
    w_dkv: Tensor | None = None
    w_uk: list[Tensor] = field(default_factory=list)
    w_uv: list[Tensor] = field(default_factory=list)

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name in ("wq", "wk", "wv", "w_uk", "w_uv"):
            for i, t in enumerate(getattr(self, name)):
                out[f"{name}.{i}"] = t
        for name in ("w_ctx", "w_dkv", "wo"):
            t = getattr(self, name)
            if t is not None:
                out[name] = t
        return out

    def head_wv(self, head: int, cfg: ModelConfig) -> Tensor:
        return self.wv[cfg.group_of(head)]


@dataclass
class AttentionOutput:
    out: Tensor
    weights: list[Tensor]
    cacheables: dict[str, list[Tensor]]


def _uniform(rng: np.random.Generator, rows: int, cols: int, requires_grad: bool) -> Tensor:
    bound = 1.0 / math.sqrt(rows)
    return Tensor(rng.uniform(-bound, bound, size=(rows, cols)), requires_grad=requires_grad)


def init_layer_weights(cfg: ModelConfig, rng: np.random.Generator,
                       requires_grad: bool = True) -> LayerWeights:
    """Allocate exactly the matrices ``cfg.variant`` uses, uniform(+-1/sqrt(fan_in))."""
    kind = cfg.variant.kind
    dm, h, dk, dv, g = cfg.d_model, cfg.heads, cfg.d_k, cfg.d_v, cfg.n_groups

    def mats(n, rows, cols):
        return [_uniform(rng, rows, cols, requires_grad) for _ in range(n)]

    w = LayerWeights(wq=mats(h, dm, dk), wo=_uniform(rng, h * dv, dm, requires_grad))
    if kind is VariantKind.QKV:
        w.wk, w.wv = mats(h, dm, dk), mats(h, dm, dv)
    elif kind is VariantKind.QV:
        w.wv = mats(h, dm, dv)
    elif kind in (VariantKind.MQA, VariantKind.GQA):
        w.wk, w.wv = mats(g, dm, dk), mats(g, dm, dv)
    elif kind is VariantKind.QVVV:
        w.wv = mats(g, dm, dv)
    elif kind is VariantKind.VSHARED_UNIQUE_K:
        w.wk, w.wv = mats(h, dm, dk), mats(g, dm, dv)
    elif kind is VariantKind.MLA_LITE:
        dl = cfg.variant.d_latent
        w.w_dkv = _uniform(rng, dm, dl, requires_grad)
        w.w_uk, w.w_uv = mats(h, dl, dk), mats(h, dl, dv)
    elif kind is VariantKind.QV_KA:
        dc = cfg.variant.d_ctx
        w.wv = mats(h, dm, dv)
        w.w_ctx = _uniform(rng, dm, dc, requires_grad)
        w.wk = mats(h, dc + dv, dk)
    return w


def attention_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count of one attention layer (output projection included)."""
    kind = cfg.variant.kind
    dm, h, dk, dv, g = cfg.d_model, cfg.heads, cfg.d_k, cfg.d_v, cfg.n_groups
    n = h * dm * dk + h * dv * dm
    if kind is VariantKind.QKV:
        n += h * dm * (dk + dv)
    elif kind is VariantKind.QV:
        n += h * dm * dv
    elif kind in (VariantKind.MQA, VariantKind.GQA):
        n += g * dm * (dk + dv)
    elif kind is VariantKind.QVVV:
        n += g * dm * dv
    elif kind is VariantKind.VSHARED_UNIQUE_K:
        n += h * dm * dk + g * dm * dv
    elif kind is VariantKind.MLA_LITE:
        dl = cfg.variant.d_latent
        n += dm * dl + h * dl * (dk + dv)
    elif kind is VariantKind.QV_KA:
        dc = cfg.variant.d_ctx
        n += h * dm * dv + dm * dc + h * (dc + dv) * dk
    return n


# ---------------------------------------------------------------------------


def causal_mask(tq: int, tkv: int) -> np.ndarray:
    """Query m (the last ``tq`` of ``tkv`` positions) may see keys n <= m."""
    offset = tkv - tq
    return np.arange(tkv)[None, :] <= np.arange(tq)[:, None] + offset


def core_attention(q: Tensor, k: Tensor, v: Tensor, causal: bool = False,
                   pos_coeff: np.ndarray | None = None, pcm_v: bool = False):
    """Scaled dot-product attention for one head.

    ``pos_coeff`` multiplies the scaled logits before the softmax; with
    ``pcm_v`` it also weights each value term of the output sum.
    Returns ``(output, weights)``.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    tq, tkv = q.shape[-2], k.shape[-2]
    if pos_coeff is not None and pos_coeff.shape != (tq, tkv):
        raise ValueError(f"pos_coeff shape {pos_coeff.shape} != {(tq, tkv)}")
    if pcm_v and pos_coeff is None:
        raise ValueError("pcm_v needs a pos_coeff matrix")

    logits = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    if pos_coeff is not None:
        logits = mul_elementwise(logits, pos_coeff)
    mask = causal_mask(tq, tkv) if causal else None
    weights = softmax_rows(logits, mask)
    mixed = mul_elementwise(weights, pos_coeff) if pcm_v else weights
    return matmul(mixed, v), weights


def cacheables(x_kv: Tensor, w: LayerWeights, cfg: ModelConfig) -> dict[str, list[Tensor]]:
    """Per-token tensors a decoder retains for this variant, projected from ``x_kv``."""
    kind = cfg.variant.kind
    if kind in (VariantKind.QKV, VariantKind.MQA, VariantKind.GQA, VariantKind.VSHARED_UNIQUE_K):
        return {"K": [matmul(x_kv, m) for m in w.wk], "V": [matmul(x_kv, m) for m in w.wv]}
    if kind in (VariantKind.QV, VariantKind.QVVV):
        return {"V": [matmul(x_kv, m) for m in w.wv]}
    if kind is VariantKind.MLA_LITE:
        return {"latent": [matmul(x_kv, w.w_dkv)]}
    if kind is VariantKind.QV_KA:
        return {"V": [matmul(x_kv, m) for m in w.wv], "ctx": [matmul(x_kv, w.w_ctx)]}
    raise ConfigError(f"unhandled variant {kind}")


def keys_values(cache: dict[str, list[Tensor]], w: LayerWeights,
                cfg: ModelConfig) -> list[tuple[Tensor, Tensor]]:
    """Rebuild each head's (k, v) from cached tensors."""
    kind = cfg.variant.kind
    grp = cfg.group_of
    heads = range(cfg.heads)
    if kind is VariantKind.QKV:
        return [(cache["K"][i], cache["V"][i]) for i in heads]
    if kind is VariantKind.QV:
        return [(cache["V"][i], cache["V"][i]) for i in heads]
    if kind in (VariantKind.MQA, VariantKind.GQA):
        return [(cache["K"][grp(i)], cache["V"][grp(i)]) for i in heads]
    if kind is VariantKind.QVVV:
        return [(cache["V"][grp(i)], cache["V"][grp(i)]) for i in heads]
    if kind is VariantKind.VSHARED_UNIQUE_K:
        return [(cache["K"][i], cache["V"][grp(i)]) for i in heads]
    if kind is VariantKind.MLA_LITE:
        c = cache["latent"][0]
        return [(matmul(c, w.w_uk[i]), matmul(c, w.w_uv[i])) for i in heads]
    if kind is VariantKind.QV_KA:
        g_ctx = cache["ctx"][0]
        out = []
        for i in heads:
            v_i = cache["V"][i]
            out.append((matmul(concat_last(g_ctx, v_i), w.wk[i]), v_i))
        return out
    raise ConfigError(f"unhandled variant {kind}")


def _multihead(x_q, x_kv, w, cfg, add_pe) -> AttentionOutput:
    x_q, x_kv = as_tensor(x_q), as_tensor(x_kv)
    if x_q.shape[-1] != cfg.d_model or x_kv.shape[-1] != cfg.d_model:
        raise ValueError(f"inputs must have width d_model={cfg.d_model}")
    x_q, x_kv, pc = apply_positions(x_q, x_kv, cfg.pos, add_pe=add_pe)
    cache = cacheables(x_kv, w, cfg)
    kv = keys_values(cache, w, cfg)
    outs, weights = [], []
    for i, (k_i, v_i) in enumerate(kv):
        q_i = matmul(x_q, w.wq[i])
        o, a = core_attention(q_i, k_i, v_i, cfg.causal, pc, cfg.pos.pcm_v)
        outs.append(o)
        weights.append(a)
    heads = concat_last(*outs) if len(outs) > 1 else outs[0]
    return AttentionOutput(matmul(heads, w.wo), weights, cache)


def _require(cfg: ModelConfig, *kinds: VariantKind) -> None:
    if cfg.variant.kind not in kinds:
        raise ConfigError(
            f"variant {cfg.variant.kind.value} not handled here; expected {[k.value for k in kinds]}"
        )


def forward_qkv(x_q, x_kv, w: LayerWeights, cfg: ModelConfig, add_pe: bool = True) -> AttentionOutput:
    _require(cfg, VariantKind.QKV)
    return _multihead(x_q, x_kv, w, cfg, add_pe)


def forward_qv(x_q, x_kv, w: LayerWeights, cfg: ModelConfig, add_pe: bool = True) -> AttentionOutput:
    """The projected V of each head doubles as its key."""
    _require(cfg, VariantKind.QV)
    return _multihead(x_q, x_kv, w, cfg, add_pe)


def forward_grouped(x_q, x_kv, w: LayerWeights, cfg: ModelConfig, add_pe: bool = True) -> AttentionOutput:
    _require(cfg, *GROUPED)
    if cfg.variant.kind is VariantKind.QVVV and cfg.pos.kind is PosKind.SINUSOIDAL:
        raise ConfigError("QVVV has no K to carry an additive encoding; use AGF or NONE")
    return _multihead(x_q, x_kv, w, cfg, add_pe)


def forward_mla_lite(x_q, x_kv, w: LayerWeights, cfg: ModelConfig, add_pe: bool = True) -> AttentionOutput:
    _require(cfg, VariantKind.MLA_LITE)
    return _multihead(x_q, x_kv, w, cfg, add_pe)


def forward_qv_ka(x_q, x_kv, w: LayerWeights, cfg: ModelConfig, add_pe: bool = True) -> AttentionOutput:
    """Keys synthesized from a shared context projection and each head's own V."""
    _require(cfg, VariantKind.QV_KA)
    return _multihead(x_q, x_kv, w, cfg, add_pe)


_DISPATCH = {
    VariantKind.QKV: forward_qkv,
    VariantKind.QV: forward_qv,
    VariantKind.MQA: forward_grouped,
    VariantKind.GQA: forward_grouped,
    VariantKind.QVVV: forward_grouped,
    VariantKind.VSHARED_UNIQUE_K: forward_grouped,
    VariantKind.MLA_LITE: forward_mla_lite,
    VariantKind.QV_KA: forward_qv_ka,
}


def forward(x_q, x_kv, w: LayerWeights, cfg: ModelConfig, add_pe: bool = True) -> AttentionOutput:
    return _DISPATCH[cfg.variant.kind](x_q, x_kv, w, cfg, add_pe=add_pe)


def self_attention(x, w: LayerWeights, cfg: ModelConfig, add_pe: bool = True) -> AttentionOutput:
    return forward(x, x, w, cfg, add_pe=add_pe)


# ---------------------------------------------------------------------------
# incremental decoding


class DecodeCache:
    """Growing per-layer store of the tensors :func:`cacheables` declares."""

    def __init__(self):
        self.store: dict[str, list[np.ndarray]] = {}
        self.length = 0

    def append(self, new: dict[str, list[Tensor]]) -> int:
        added = 0
        for name, items in new.items():
            slot = self.store.setdefault(name, [None] * len(items))
            for j, t in enumerate(items):
                row = t.data
                slot[j] = row if slot[j] is None else np.concatenate([slot[j], row], axis=-2)
                added += row.size
        self.length += 1
        return added

    def tensors(self) -> dict[str, list[Tensor]]:
        return {name: [Tensor(a) for a in items] for name, items in self.store.items()}

    def elements_per_token(self) -> int:
        if not self.length:
            return 0
        return sum(a.size for items in self.store.values() for a in items) // self.length


def decode_step(x_t, pos: int, cache: DecodeCache, w: LayerWeights, cfg: ModelConfig,
                add_pe: bool = True) -> tuple[np.ndarray, int]:
    """Process the token at position ``pos`` using only cached state.

    Returns the output row and the number of elements appended to the cache.
    """
    if pos != cache.length:
        raise ValueError(f"decode position {pos} but cache holds {cache.length} tokens")
    with no_grad():
        x = Tensor(np.asarray(x_t, dtype=np.float64).reshape(1, cfg.d_model))
        if cfg.pos.kind is PosKind.SINUSOIDAL and add_pe:
            x = add(x, sinusoidal_pe(1, cfg.d_model, offset=pos))
        added = cache.append(cacheables(x, w, cfg))
        kv = keys_values(cache.tensors(), w, cfg)
        pc = None
        if cfg.pos.kind is PosKind.AGF:
            pc = agf_pos_coeff(1, cfg.pos, pos + 1, q_offset=pos)
        outs = []
        for i, (k_i, v_i) in enumerate(kv):
            o, _ = core_attention(matmul(x, w.wq[i]), k_i, v_i, False, pc, cfg.pos.pcm_v)
            outs.append(o)
        out = matmul(concat_last(*outs), w.wo)
    return out.data[0], added
