"""Configuration dataclasses shared by every module.

All configs validate in ``__post_init__`` and raise :class:`ConfigError`
naming the violated invariant.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from enum import Enum


class ConfigError(ValueError):
    pass


class PosKind(str, Enum):
    NONE = "NONE"
    SINUSOIDAL = "SINUSOIDAL"
    AGF = "AGF"


class VariantKind(str, Enum):
    QKV = "QKV"
    QV = "QV"
    MQA = "MQA"
    GQA = "GQA"
    QVVV = "QVVV"
    MLA_LITE = "MLA_LITE"
    VSHARED_UNIQUE_K = "VSHARED_UNIQUE_K"
    QV_KA = "QV_KA"


GROUPED = (VariantKind.MQA, VariantKind.GQA, VariantKind.QVVV, VariantKind.VSHARED_UNIQUE_K)
KEY_FREE = (VariantKind.QV, VariantKind.QVVV)

# Positional schemes each variant accepts. Variants without a K projection have
# nothing to carry an additive encoding, and the MLA latent path skips the
# decoupled-RoPE machinery, so both take relative (AGF) positions only.
SUPPORTED_POSITIONS = {
    kind: (PosKind.NONE, PosKind.AGF)
    if kind in (VariantKind.QVVV, VariantKind.MLA_LITE)
    else (PosKind.NONE, PosKind.SINUSOIDAL, PosKind.AGF)
    for kind in VariantKind
}

_ALIASES = {
    "qkv": VariantKind.QKV,
    "qv": VariantKind.QV,
    "mqa": VariantKind.MQA,
    "gqa": VariantKind.GQA,
    "qvvv": VariantKind.QVVV,
    "mla": VariantKind.MLA_LITE,
    "mla_lite": VariantKind.MLA_LITE,
    "vshared_unique_k": VariantKind.VSHARED_UNIQUE_K,
    "vshared": VariantKind.VSHARED_UNIQUE_K,
    "qv_ka": VariantKind.QV_KA,
    "qvka": VariantKind.QV_KA,
    "qv-ka": VariantKind.QV_KA,
}


def parse_variant_kind(name: str) -> VariantKind:
    try:
        return _ALIASES[name.strip().lower()]
    except KeyError:
        raise ConfigError(
            f"unknown variant {name!r}; expected one of {sorted(_ALIASES)}"
        ) from None


def _enum(cls, value):
    if isinstance(value, cls):
        return value
    try:
        return cls(str(value).upper())
    except ValueError:
        raise ConfigError(f"unknown {cls.__name__} {value!r}") from None


def _check_keys(cls, d: dict, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    allowed = {f.name for f in fields(cls)}
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


@dataclass(frozen=True)
class PosScheme:
    kind: PosKind = PosKind.NONE
    agf_alpha: float = 1.0
    pcm_v: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", _enum(PosKind, self.kind))
        if not self.agf_alpha > 0:
            raise ConfigError(f"agf_alpha must be > 0, got {self.agf_alpha}")
        if self.pcm_v and self.kind is not PosKind.AGF:
            raise ConfigError("pcm_v requires kind=AGF")

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "agf_alpha": self.agf_alpha, "pcm_v": self.pcm_v}

    @classmethod
    def from_dict(cls, d: dict) -> "PosScheme":
        _check_keys(cls, d, "pos")
        return cls(**d)


@dataclass(frozen=True)
class Variant:
    kind: VariantKind = VariantKind.QKV
    kv_groups: int | None = None
    d_latent: int | None = None
    d_ctx: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", _enum(VariantKind, self.kind))
        if self.kind is VariantKind.MQA:
            if self.kv_groups not in (None, 1):
                raise ConfigError("MQA has exactly one kv group")
            object.__setattr__(self, "kv_groups", 1)
        needs = {
            VariantKind.GQA: "kv_groups",
            VariantKind.QVVV: "kv_groups",
            VariantKind.VSHARED_UNIQUE_K: "kv_groups",
            VariantKind.MLA_LITE: "d_latent",
            VariantKind.QV_KA: "d_ctx",
        }.get(self.kind)
        if needs is not None and getattr(self, needs) is None:
            raise ConfigError(f"{self.kind.value} requires {needs}")
        for name in ("kv_groups", "d_latent", "d_ctx"):
            v = getattr(self, name)
            if v is not None and (not isinstance(v, int) or v <= 0):
                raise ConfigError(f"{name} must be a positive int, got {v!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "kv_groups": self.kv_groups,
                "d_latent": self.d_latent, "d_ctx": self.d_ctx}

    @classmethod
    def from_dict(cls, d: dict) -> "Variant":
        _check_keys(cls, d, "variant")
        return cls(**d)


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    heads: int = 4
    d_k: int | None = None
    d_v: int | None = None
    n_layers: int = 2
    variant: Variant = field(default_factory=Variant)
    pos: PosScheme = field(default_factory=PosScheme)
    causal: bool = True
    d_ff: int = 256
    vocab: int = 16

    def __post_init__(self):
        if self.d_model <= 0 or self.heads <= 0:
            raise ConfigError("d_model and heads must be positive")
        if self.d_k is None or self.d_v is None:
            if self.d_model % self.heads:
                raise ConfigError("d_k/d_v default to d_model / heads, which needs heads | d_model")
            if self.d_k is None:
                object.__setattr__(self, "d_k", self.d_model // self.heads)
            if self.d_v is None:
                object.__setattr__(self, "d_v", self.d_model // self.heads)
        if isinstance(self.variant, dict):
            object.__setattr__(self, "variant", Variant.from_dict(self.variant))
        if isinstance(self.pos, dict):
            object.__setattr__(self, "pos", PosScheme.from_dict(self.pos))
        for name in ("d_k", "d_v", "n_layers", "d_ff", "vocab"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

        v, h = self.variant, self.heads
        if v.kind in GROUPED:
            g = v.kv_groups
            if not 1 <= g <= h or h % g:
                raise ConfigError(f"kv_groups g={g} must divide heads h={h} with 1 <= g <= h")
        if v.kind in KEY_FREE and self.d_k != self.d_v:
            raise ConfigError(f"{v.kind.value} scores are Q.V^T and require d_k == d_v")
        if v.kind is VariantKind.MLA_LITE and v.d_latent >= h * (self.d_k + self.d_v):
            raise ConfigError(
                f"MLA_LITE must compress: d_latent={v.d_latent} >= h*(d_k+d_v)={h * (self.d_k + self.d_v)}"
            )
        if self.pos.kind not in SUPPORTED_POSITIONS[v.kind]:
            raise ConfigError(f"{v.kind.value} does not support {self.pos.kind.value} positions")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads

    @property
    def n_groups(self) -> int:
        """Number of distinct value projections per layer."""
        if self.variant.kind in GROUPED:
            return self.variant.kv_groups
        return self.heads

    def group_of(self, head: int) -> int:
        return head * self.n_groups // self.heads

    def replace(self, **changes) -> "ModelConfig":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(changes)
        return ModelConfig(**d)

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model, "heads": self.heads, "d_k": self.d_k, "d_v": self.d_v,
            "n_layers": self.n_layers, "variant": self.variant.to_dict(),
            "pos": self.pos.to_dict(), "causal": self.causal, "d_ff": self.d_ff,
            "vocab": self.vocab,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        _check_keys(cls, d, "model")
        d = dict(d)
        if "variant" in d:
            d["variant"] = Variant.from_dict(d["variant"])
        if "pos" in d:
            d["pos"] = PosScheme.from_dict(d["pos"])
        return cls(**d)
