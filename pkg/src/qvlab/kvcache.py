"""Closed-form KV-cache footprint per attention variant."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from .config import ModelConfig, VariantKind


@dataclass(frozen=True)
class CacheReport:
    variant: VariantKind
    breakdown: tuple[tuple[str, int], ...]
    bytes_per_elem: int = 2

    @property
    def elements_per_token_layer(self) -> int:
        return sum(n for _, n in self.breakdown)

    @property
    def per_token_per_layer_bytes(self) -> int:
        return self.bytes_per_elem * self.elements_per_token_layer

    def total_bytes(self, seq_len: int, layers: int, batch: int = 1) -> int:
        return seq_len * layers * batch * self.per_token_per_layer_bytes


def cache_report(cfg: ModelConfig, bytes_per_elem: int = 2) -> CacheReport:
    """Elements a decoder stores per token per layer, split by component."""
    if bytes_per_elem <= 0:
        raise ValueError("bytes_per_elem must be positive")
    kind = cfg.variant.kind
    h, dk, dv, g = cfg.heads, cfg.d_k, cfg.d_v, cfg.n_groups
    parts = {
        VariantKind.QKV: (("K", h * dk), ("V", h * dv)),
        VariantKind.MQA: (("K", dk), ("V", dv)),
        VariantKind.GQA: (("K", g * dk), ("V", g * dv)),
        VariantKind.QV: (("V", h * dv),),
        VariantKind.QVVV: (("V", g * dv),),
        VariantKind.VSHARED_UNIQUE_K: (("K", h * dk), ("V", g * dv)),
        VariantKind.MLA_LITE: (("latent", cfg.variant.d_latent or 0),),
        VariantKind.QV_KA: (("V", h * dv), ("ctx", cfg.variant.d_ctx or 0)),
    }[kind]
    return CacheReport(kind, parts, bytes_per_elem)


CSV_HEADER = ("variant", "component", "elements", "bytes_per_token_layer", "total_bytes")


def report_rows(report: CacheReport, seq_len: int, layers: int, batch: int = 1) -> list[tuple]:
    """One row per component plus a ``total`` row."""
    p = report.bytes_per_elem
    scale = seq_len * layers * batch
    rows = [(report.variant.value, name, n, n * p, n * p * scale) for name, n in report.breakdown]
    rows.append((report.variant.value, "total", report.elements_per_token_layer,
                 report.per_token_per_layer_bytes, report.total_bytes(seq_len, layers, batch)))
    return rows


def render_csv(rows: list[tuple], header_comment: str | None = None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    writer.writerows(rows)
    return buf.getvalue()


def render_table(rows: list[tuple], header=CSV_HEADER) -> str:
    cells = [[str(c) for c in header]] + [[_fmt(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) if j else c.ljust(w) for j, (c, w) in enumerate(zip(r, widths)))
             for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.6g}"
    return str(x)


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    name: str
    queries_per_v: int
    cached_v_per_layer: int
    layers: int
    heads_per_layer: int

    @property
    def pairings_covered(self) -> int:
        return self.layers * self.heads_per_layer

    @property
    def cached_v_total(self) -> int:
        return self.cached_v_per_layer * self.layers


def minimal_model_table(directions: int = 6, layers: int = 6) -> list[Scenario]:
    """Head organizations for a toy model with ``directions`` expression directions.

    All ``directions**2`` modifier pairings are spread over ``layers`` layers,
    so each layer carries ``directions**2 / layers`` heads. The scenarios
    differ only in how many value vectors those heads share.
    """
    pairings = directions * directions
    if pairings % layers:
        raise ValueError("pairings must split evenly across layers")
    heads = pairings // layers
    return [
        Scenario("unshared", 1, heads, layers, heads),
        Scenario("scenario 1: one V shared by all queries", heads, 1, layers, heads),
        Scenario("scenario 2: two Vs, half the queries each", heads // 2, 2, layers, heads),
    ]
