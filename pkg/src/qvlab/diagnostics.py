"""Finite-difference gradient checks and attention-diffusion probes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import attention as attn
from .config import SUPPORTED_POSITIONS, ModelConfig, PosKind, PosScheme, Variant, VariantKind
from .tensor import Tensor, backward, mul_elementwise, no_grad, sum_all


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    eps: float
    threshold: float
    coords_checked: int

    @property
    def max_rel_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def worst(self) -> str | None:
        if not self.errors:
            return None
        return max(self.errors, key=self.errors.get)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.threshold


def rel_error(a, n) -> np.ndarray:
    a, n = np.asarray(a), np.asarray(n)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def _coords(size: int, cap: int, rng: np.random.Generator) -> np.ndarray:
    if size <= cap:
        return np.arange(size)
    return np.sort(rng.choice(size, size=cap, replace=False))


def gradcheck(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], eps: float = 1e-5,
              threshold: float = 1e-4, max_coords: int = 512, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn`` against central differences.

    ``loss_fn`` must rebuild the scalar loss from the current values of
    ``params``. Each parameter is probed on every coordinate, or on a seeded
    sample of ``max_coords`` coordinates when it is larger.
    """
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("loss is not finite")
    backward(loss)

    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    checked = 0
    with no_grad():
        for name, p in params.items():
            analytic = p.grad.reshape(-1).copy()
            flat = p.data.reshape(-1)
            idx = _coords(flat.size, max_coords, rng)
            numeric = np.empty(idx.size)
            for j, c in enumerate(idx):
                orig = flat[c]
                flat[c] = orig + eps
                up = loss_fn().item()
                flat[c] = orig - eps
                down = loss_fn().item()
                flat[c] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise FloatingPointError(f"loss is not finite while probing {name}[{c}]")
                numeric[j] = (up - down) / (2 * eps)
            errors[name] = float(rel_error(analytic[idx], numeric).max())
            checked += idx.size
    return GradCheckReport(errors, eps, threshold, checked)


# ---------------------------------------------------------------------------


def attention_entropy(weights, causal: bool = False) -> tuple[float, float]:
    """Mean Shannon entropy (nats) and mean max weight over attention rows.

    Accepts ``[..., Tq, Tkv]``; leading axes are pooled. Entries masked by the
    causal pattern must already be zero and contribute nothing.
    """
    a = weights.data if isinstance(weights, Tensor) else np.asarray(weights, dtype=np.float64)
    sums = a.sum(axis=-1)
    if np.abs(sums - 1.0).max() > 1e-6:
        raise ValueError("attention rows must sum to 1")
    if causal:
        tq, tkv = a.shape[-2:]
        visible = np.arange(tkv)[None, :] <= np.arange(tq)[:, None] + (tkv - tq)
        if np.abs(a[..., ~visible]).max(initial=0.0) > 1e-12:
            raise ValueError("causal rows carry weight on future positions")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(a > 0, a * np.log(a), 0.0)
    ent = -terms.sum(axis=-1)
    return float(ent.mean()), float(a.max(axis=-1).mean())


@dataclass
class DiffusionReport:
    label: str
    step: int
    seq_len: int
    # (mean entropy in nats, mean max-weight mass) per head, layer-major
    per_head: list[tuple[float, float]] = field(default_factory=list)

    @property
    def mean_entropy(self) -> float:
        return float(np.mean([e for e, _ in self.per_head]))

    @property
    def mean_max_mass(self) -> float:
        return float(np.mean([m for _, m in self.per_head]))

    def rows(self) -> list[tuple]:
        return [(self.label, i, e, m, self.step) for i, (e, m) in enumerate(self.per_head)]


DIFFUSION_HEADER = ("variant", "head", "mean_entropy_nats", "mean_max_mass", "checkpoint_step")


def diffusion_report(label: str, step: int, weights_by_head: list, causal: bool) -> DiffusionReport:
    per_head = [attention_entropy(w, causal) for w in weights_by_head]
    seq_len = int(np.asarray(weights_by_head[0].data if isinstance(weights_by_head[0], Tensor)
                             else weights_by_head[0]).shape[-1])
    return DiffusionReport(label, step, seq_len, per_head)


def dodm_compare(run_a, run_b) -> tuple[DiffusionReport, DiffusionReport]:
    """Side-by-side diffusion reports for two finished runs on the same task and seed.

    No verdict is drawn; which variant diffuses more is left as data.
    """
    from .harness import probe_attention

    if run_a.config.task != run_b.config.task or run_a.config.seed != run_b.config.seed:
        raise ValueError("runs must share task and seed")
    return probe_attention(run_a), probe_attention(run_b)


# ---------------------------------------------------------------------------
# gradient checks over the variant x positional-scheme support matrix


def supported_matrix(d_model: int = 16, heads: int = 2, groups: int | None = None,
                     d_latent: int | None = None, causal: bool = True) -> list[ModelConfig]:
    """Every (variant, positional scheme) pairing the attention layer accepts.

    GQA is built with ``groups`` (default 2, or 1 when ``heads`` is odd); the
    other grouped variants use a single kv group so they differ from GQA.
    """
    d_head = d_model // heads
    g = groups or (2 if heads % 2 == 0 else 1)
    variants = [
        Variant(VariantKind.QKV),
        Variant(VariantKind.QV),
        Variant(VariantKind.MQA),
        Variant(VariantKind.GQA, kv_groups=g),
        Variant(VariantKind.QVVV, kv_groups=1),
        Variant(VariantKind.MLA_LITE, d_latent=d_latent or d_head),
        Variant(VariantKind.VSHARED_UNIQUE_K, kv_groups=1),
        Variant(VariantKind.QV_KA, d_ctx=d_head),
    ]
    schemes = {
        PosKind.NONE: [PosScheme(PosKind.NONE)],
        PosKind.SINUSOIDAL: [PosScheme(PosKind.SINUSOIDAL)],
        PosKind.AGF: [PosScheme(PosKind.AGF), PosScheme(PosKind.AGF, pcm_v=True)],
    }
    out = []
    for v in variants:
        for kind in SUPPORTED_POSITIONS[v.kind]:
            for pos in schemes[kind]:
                out.append(ModelConfig(d_model=d_model, heads=heads, variant=v, pos=pos,
                                       causal=causal, n_layers=1, d_ff=2 * d_model, vocab=8))
    return out


def scheme_label(cfg: ModelConfig) -> str:
    p = cfg.pos
    if p.kind is PosKind.AGF:
        return "AGF+PCM-V" if p.pcm_v else "AGF"
    return p.kind.value


def layer_gradcheck(cfg: ModelConfig, seq_len: int = 5, seed: int = 0, eps: float = 1e-5,
                    threshold: float = 1e-4) -> GradCheckReport:
    """Gradcheck one attention layer of ``cfg`` on random inputs.

    The loss is a fixed random projection of the layer output, so every
    gradient is generically nonzero. The input sequence is checked too.
    """
    rng = np.random.default_rng(seed)
    w = attn.init_layer_weights(cfg, rng)
    x = Tensor(rng.normal(size=(seq_len, cfg.d_model)), requires_grad=True)
    probe = rng.normal(size=(seq_len, cfg.d_model))
    params = dict(w.named_parameters())
    params["x"] = x

    def loss_fn():
        return sum_all(mul_elementwise(attn.self_attention(x, w, cfg).out, probe))

    return gradcheck(loss_fn, params, eps=eps, threshold=threshold, seed=seed)
