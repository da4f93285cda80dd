"""Desk-scale decoder-only training harness.

Sequences are ``[content][SEP][target]``; the model is trained by next-token
cross-entropy on the target positions only.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, fields
from enum import Enum

import numpy as np

from . import attention as attn
from .config import ConfigError, ModelConfig, PosKind, VariantKind, _check_keys, _enum
from .diagnostics import DiffusionReport, attention_entropy, diffusion_report
from .positional import sinusoidal_pe
from .tensor import (
    Tensor,
    add,
    backward,
    cross_entropy,
    embedding,
    layer_norm,
    matmul,
    no_grad,
    relu,
)

PAD, SEP = 0, 1
N_SPECIAL = 2


class TaskKind(str, Enum):
    COPY = "COPY"
    REVERSE = "REVERSE"
    SORT = "SORT"


@dataclass(frozen=True)
class TaskSpec:
    kind: TaskKind = TaskKind.COPY
    vocab: int = 16
    content_len: int = 8
    seed: int = 0
    n_train: int = 20000
    n_valid: int = 512

    def __post_init__(self):
        object.__setattr__(self, "kind", _enum(TaskKind, self.kind))
        if self.content_len < 1:
            raise ConfigError("content_len must be >= 1")
        if self.vocab <= N_SPECIAL + 1:
            raise ConfigError(f"vocab must exceed the {N_SPECIAL} special tokens plus one symbol")
        if self.n_train < 1 or self.n_valid < 1:
            raise ConfigError("n_train and n_valid must be positive")
        alphabet = self.vocab - N_SPECIAL
        if alphabet ** self.content_len < self.n_train + self.n_valid:
            raise ConfigError("not enough distinct sequences for disjoint train/valid splits")

    @property
    def seq_len(self) -> int:
        return 2 * self.content_len + 1

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "vocab": self.vocab, "content_len": self.content_len,
                "seed": self.seed, "n_train": self.n_train, "n_valid": self.n_valid}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        _check_keys(cls, d, "task")
        return cls(**d)


def task_target(kind: TaskKind, content) -> list[int]:
    content = list(content)
    if kind is TaskKind.COPY:
        return content
    if kind is TaskKind.REVERSE:
        return content[::-1]
    return sorted(content)


def make_task(spec: TaskSpec) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint train/valid arrays of full sequences, shape ``[n, 2L+1]``."""
    rng = np.random.default_rng(spec.seed)
    need = spec.n_train + spec.n_valid
    seen: set[bytes] = set()
    rows = []
    while len(rows) < need:
        batch = rng.integers(N_SPECIAL, spec.vocab, size=(need, spec.content_len))
        for c in batch:
            key = c.tobytes()
            if key in seen:
                continue
            seen.add(key)
            rows.append(c)
            if len(rows) == need:
                break
    content = np.stack(rows)
    target = np.stack([task_target(spec.kind, c) for c in content])
    sep = np.full((need, 1), SEP)
    seqs = np.concatenate([content, sep, target], axis=1).astype(np.int64)
    return seqs[: spec.n_train], seqs[spec.n_train:]


def split_io(seqs: np.ndarray, content_len: int):
    """Inputs, next-token targets and the loss mask selecting target positions."""
    inputs, targets = seqs[:, :-1], seqs[:, 1:]
    mask = np.zeros(targets.shape)
    mask[:, content_len:] = 1.0
    return inputs, targets, mask


# ---------------------------------------------------------------------------
# model


@dataclass
class Block:
    ln1_g: Tensor
    ln1_b: Tensor
    attn: attn.LayerWeights
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named_parameters(self) -> dict[str, Tensor]:
        out = {n: getattr(self, n) for n in ("ln1_g", "ln1_b", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")}
        out.update({f"attn.{k}": v for k, v in self.attn.named_parameters().items()})
        return out


@dataclass
class Model:
    cfg: ModelConfig
    embed: Tensor
    blocks: list[Block]
    lnf_g: Tensor
    lnf_b: Tensor
    unembed: Tensor

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"embed": self.embed}
        for i, b in enumerate(self.blocks):
            out.update({f"blocks.{i}.{k}": v for k, v in b.named_parameters().items()})
        out.update({"lnf_g": self.lnf_g, "lnf_b": self.lnf_b, "unembed": self.unembed})
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(params) != set(state):
            raise KeyError("state does not match model parameters")
        for k, p in params.items():
            p.data = state[k]


def _uniform(rng, rows, cols):
    bound = 1.0 / math.sqrt(rows)
    return Tensor(rng.uniform(-bound, bound, size=(rows, cols)), requires_grad=True)


def init_block(cfg: ModelConfig, rng: np.random.Generator) -> Block:
    dm = cfg.d_model
    return Block(
        ln1_g=Tensor(np.ones(dm), requires_grad=True),
        ln1_b=Tensor(np.zeros(dm), requires_grad=True),
        attn=attn.init_layer_weights(cfg, rng),
        ln2_g=Tensor(np.ones(dm), requires_grad=True),
        ln2_b=Tensor(np.zeros(dm), requires_grad=True),
        w1=_uniform(rng, dm, cfg.d_ff),
        b1=Tensor(np.zeros(cfg.d_ff), requires_grad=True),
        w2=_uniform(rng, cfg.d_ff, dm),
        b2=Tensor(np.zeros(dm), requires_grad=True),
    )


def init_model(cfg: ModelConfig, seed: int) -> Model:
    rng = np.random.default_rng(seed)
    # one-hot lookup: fan_in is 1
    embed = Tensor(rng.uniform(-1.0, 1.0, size=(cfg.vocab, cfg.d_model)), requires_grad=True)
    blocks = [init_block(cfg, rng) for _ in range(cfg.n_layers)]
    return Model(
        cfg=cfg,
        embed=embed,
        blocks=blocks,
        lnf_g=Tensor(np.ones(cfg.d_model), requires_grad=True),
        lnf_b=Tensor(np.zeros(cfg.d_model), requires_grad=True),
        unembed=_uniform(rng, cfg.d_model, cfg.vocab),
    )


def block_forward(x: Tensor, block: Block, cfg: ModelConfig):
    """Pre-norm block; returns the new residual stream and per-head attention weights."""
    a = attn.self_attention(layer_norm(x, block.ln1_g, block.ln1_b), block.attn, cfg, add_pe=False)
    x = add(x, a.out)
    hdn = relu(add(matmul(layer_norm(x, block.ln2_g, block.ln2_b), block.w1), block.b1))
    x = add(x, add(matmul(hdn, block.w2), block.b2))
    return x, a.weights


def model_forward(model: Model, ids: np.ndarray):
    """Logits ``[B, T, vocab]`` and attention weights, one list per layer."""
    cfg = model.cfg
    ids = np.atleast_2d(ids)
    x = embedding(model.embed, ids)
    if cfg.pos.kind is PosKind.SINUSOIDAL:
        x = add(x, sinusoidal_pe(ids.shape[-1], cfg.d_model))
    weights = []
    for block in model.blocks:
        x, w = block_forward(x, block, cfg)
        weights.append(w)
    x = layer_norm(x, model.lnf_g, model.lnf_b)
    return matmul(x, model.unembed), weights


# ---------------------------------------------------------------------------
# training


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class TrainConfig:
    name: str = "run"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    steps: int = 2000
    batch: int = 32
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    eval_every: int = 100

    def __post_init__(self):
        if self.model.vocab != self.task.vocab:
            raise ConfigError(f"model vocab {self.model.vocab} != task vocab {self.task.vocab}")
        if not self.model.causal:
            raise ConfigError("the training harness is decoder-only and needs causal=true")
        if self.steps < 0 or self.batch < 1 or self.eval_every < 1:
            raise ConfigError("steps >= 0, batch >= 1 and eval_every >= 1 required")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")

    _TRAIN_KEYS = ("steps", "batch", "lr", "beta1", "beta2", "adam_eps", "eval_every")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "model": self.model.to_dict(),
            "task": self.task.to_dict(),
            "train": {k: getattr(self, k) for k in self._TRAIN_KEYS},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = set(d) - {"name", "seed", "model", "task", "train"}
        if unknown:
            raise ConfigError(f"run config: unknown keys {sorted(unknown)}")
        train = d.get("train", {})
        if not isinstance(train, dict):
            raise ConfigError("train: expected an object")
        unknown = set(train) - set(cls._TRAIN_KEYS)
        if unknown:
            raise ConfigError(f"train: unknown keys {sorted(unknown)}")
        kw = dict(train)
        for k in ("name", "seed"):
            if k in d:
                kw[k] = d[k]
        if "model" in d:
            kw["model"] = ModelConfig.from_dict(d["model"])
        if "task" in d:
            kw["task"] = TaskSpec.from_dict(d["task"])
        return cls(**kw)


@dataclass
class MetricRow:
    step: int
    train_loss: float
    valid_loss: float
    valid_acc: float
    mean_attn_entropy: float


METRIC_HEADER = ("step", "train_loss", "valid_loss", "valid_acc", "mean_attn_entropy")


@dataclass
class TrainResult:
    config: TrainConfig
    rows: list[MetricRow]
    model: Model

    @property
    def final(self) -> MetricRow:
        return self.rows[-1]


class Adam:
    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.98), eps: float = 1e-9):
        self.params = params
        self.lr, self.eps = lr, eps
        self.b1, self.b2 = betas
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def evaluate(model: Model, seqs: np.ndarray, content_len: int, chunk: int = 256):
    """Teacher-forced loss, accuracy and mean attention entropy on ``seqs``."""
    inputs, targets, mask = split_io(seqs, content_len)
    loss_sum = correct = ent_sum = 0.0
    ent_n = 0
    with no_grad():
        for s in range(0, len(seqs), chunk):
            logits, weights = model_forward(model, inputs[s:s + chunk])
            m = mask[s:s + chunk]
            t = targets[s:s + chunk]
            loss_sum += cross_entropy(logits, t, m).item() * m.sum()
            pred = logits.data.argmax(axis=-1)
            correct += ((pred == t) * m).sum()
            for layer in weights:
                for w in layer:
                    ent_sum += attention_entropy(w, causal=True)[0]
                    ent_n += 1
    total = mask.sum()
    return float(loss_sum / total), float(correct / total), ent_sum / max(ent_n, 1)


def train(cfg: TrainConfig, log=None) -> TrainResult:
    """Train with Adam at a fixed learning rate; deterministic per ``cfg.seed``."""
    train_set, valid_set = make_task(cfg.task)
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    model = init_model(cfg.model, int(seeds[0].generate_state(1)[0]))
    batch_rng = np.random.default_rng(seeds[1])
    params = list(model.named_parameters().values())
    opt = Adam(params, cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps)
    L = cfg.task.content_len

    rows: list[MetricRow] = []

    def record(step, train_loss):
        vl, va, ent = evaluate(model, valid_set, L)
        rows.append(MetricRow(step, train_loss, vl, va, ent))
        if log is not None:
            log(rows[-1])

    with no_grad():
        inputs, targets, mask = split_io(train_set[:cfg.batch], L)
        first_loss = cross_entropy(model_forward(model, inputs)[0], targets, mask).item()
    record(0, first_loss)

    running = []
    for step in range(1, cfg.steps + 1):
        idx = batch_rng.integers(0, len(train_set), size=cfg.batch)
        inputs, targets, mask = split_io(train_set[idx], L)
        opt.zero_grad()
        logits, _ = model_forward(model, inputs)
        loss = cross_entropy(logits, targets, mask)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(step, value)
        backward(loss)
        opt.step()
        running.append(value)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            record(step, float(np.mean(running)))
            running = []
    return TrainResult(cfg, rows, model)


def metrics_csv(rows: list[MetricRow], seed: int) -> str:
    buf = io.StringIO()
    buf.write(f"# seed={seed}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_HEADER)
    for r in rows:
        w.writerow([r.step, repr(r.train_loss), repr(r.valid_loss), repr(float(r.valid_acc)),
                    repr(r.mean_attn_entropy)])
    return buf.getvalue()


def probe_attention(result: TrainResult, n: int = 128, label: str | None = None) -> DiffusionReport:
    """Per-head diffusion statistics of a trained model on validation inputs."""
    cfg = result.config
    _, valid_set = make_task(cfg.task)
    inputs, _, _ = split_io(valid_set[:n], cfg.task.content_len)
    with no_grad():
        _, weights = model_forward(result.model, inputs)
    flat = [w for layer in weights for w in layer]
    return diffusion_report(label or mode_label(cfg.model), result.rows[-1].step, flat, causal=True)


# ---------------------------------------------------------------------------
# comparison tables


def mode_label(cfg: ModelConfig) -> str:
    v = cfg.variant
    if v.kind is VariantKind.QV_KA:
        if v.d_ctx == cfg.d_k:
            return "QV-Ka (d_ctx = d_head)"
        if v.d_ctx % cfg.d_k == 0:
            return f"QV-Ka (d_ctx = {v.d_ctx // cfg.d_k} d_head)"
        return f"QV-Ka (d_ctx = {v.d_ctx})"
    if v.kind in (VariantKind.GQA, VariantKind.QVVV, VariantKind.VSHARED_UNIQUE_K):
        return f"{v.kind.value} (g = {v.kv_groups})"
    if v.kind is VariantKind.MLA_LITE:
        return f"MLA_LITE (d_latent = {v.d_latent})"
    return v.kind.value


def crafts_label(cfg: ModelConfig) -> str:
    p = cfg.pos
    if p.kind is PosKind.SINUSOIDAL:
        return "Default (Sinusoidal PE)"
    if p.kind is PosKind.AGF:
        return "AGF + PCM-V" if p.pcm_v else "AGF"
    return "No PE"


SUMMARY_HEADER = ("mode", "crafts", "final_valid_acc")


def summary_rows(results: list[TrainResult]) -> list[tuple[str, str, float]]:
    return [(mode_label(r.config.model), crafts_label(r.config.model), float(r.final.valid_acc))
            for r in results]


def _train_quiet(cfg: TrainConfig) -> TrainResult:
    return train(cfg)


def compare(configs: list[TrainConfig], jobs: int = 1) -> list[TrainResult]:
    """Train each config; results keep input order whatever the completion order."""
    if not configs:
        raise ValueError("compare needs at least one config")
    base = configs[0]
    for c in configs[1:]:
        if c.task != base.task or c.seed != base.seed or c.steps != base.steps:
            raise ValueError(f"config {c.name!r} differs from {base.name!r} in task, seed or steps")
    if jobs <= 1:
        return [train(c) for c in configs]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(_train_quiet, configs))
