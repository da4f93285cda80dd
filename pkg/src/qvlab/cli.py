"""Command-line entry point: ``qvlab {cache-report,gradcheck,train,compare,entropy}``.

Exit codes: 0 success, 1 check failure, 2 usage or config error, 3 training
divergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import harness, kvcache
from .config import ConfigError, ModelConfig, PosScheme, Variant, parse_variant_kind
from .diagnostics import (
    DIFFUSION_HEADER,
    layer_gradcheck,
    scheme_label,
    supported_matrix,
)
from .tensor import inject_fault

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


def load_run_config(path: str | Path) -> harness.TrainConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e.strerror}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: invalid JSON: {e}") from None
    try:
        return harness.TrainConfig.from_dict(d)
    except (ConfigError, TypeError) as e:
        raise UsageError(f"{path}: {e}") from None


def dump_run_config(cfg: harness.TrainConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


def _csv(header, rows, seed) -> str:
    buf = io.StringIO()
    buf.write(f"# seed={seed}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(c) if isinstance(c, float) else c for c in r])
    return buf.getvalue()


# ---------------------------------------------------------------------------


def cmd_cache_report(args) -> int:
    if args.config:
        run = load_run_config(args.config)
        model, seed = run.model, run.seed
    else:
        if not (args.variant and args.d_model and args.heads):
            raise UsageError("give --config or all of --variant, --d-model, --heads")
        kind = parse_variant_kind(args.variant)
        variant = Variant(kind, kv_groups=args.groups, d_latent=args.d_latent, d_ctx=args.d_ctx)
        model = ModelConfig(d_model=args.d_model, heads=args.heads, d_k=args.d_k, d_v=args.d_v,
                            n_layers=args.layers or 1, variant=variant,
                            pos=PosScheme("NONE"), d_ff=1, vocab=1)
        seed = args.seed
    report = kvcache.cache_report(model, args.precision_bytes)
    rows = kvcache.report_rows(report, args.seq_len, args.layers or model.n_layers, args.batch)
    if args.format == "csv":
        sys.stdout.write(kvcache.render_csv(rows, f"seed={seed}"))
    else:
        sys.stdout.write(f"# seed={seed}\n" + kvcache.render_table(rows))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.config:
        m = load_run_config(args.config).model
        base = dict(d_model=m.d_model, heads=m.heads)
    else:
        m, base = None, {}
    if args.all_variants or m is None:
        configs = supported_matrix(**base)
    else:
        configs = [m.replace(n_layers=1)]

    rows, ok = [], True
    for cfg in configs:
        if args.inject_fault:
            with inject_fault("softmax"):
                rep = layer_gradcheck(cfg, seq_len=args.seq_len, seed=args.seed)
        else:
            rep = layer_gradcheck(cfg, seq_len=args.seq_len, seed=args.seed)
        ok &= rep.passed
        rows.append((harness.mode_label(cfg), scheme_label(cfg), rep.max_rel_error,
                     rep.worst, "pass" if rep.passed else "FAIL"))
    header = ("variant", "positions", "max_rel_error", "worst_param", "status")
    if args.format == "csv":
        sys.stdout.write(_csv(header, rows, args.seed))
    else:
        sys.stdout.write(f"# seed={args.seed}\n" + kvcache.render_table(rows, header))
    return EXIT_OK if ok else EXIT_CHECK


def _write_run(result: harness.TrainResult, out: Path, svg: bool = False) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    (out / "config.json").write_text(dump_run_config(cfg))
    (out / "metrics.csv").write_text(harness.metrics_csv(result.rows, cfg.seed))
    np.savez(out / "weights.npz", **result.model.state_dict())
    final = result.final
    summary = {
        "name": cfg.name,
        "seed": cfg.seed,
        "mode": harness.mode_label(cfg.model),
        "crafts": harness.crafts_label(cfg.model),
        "final_step": final.step,
        "final_valid_acc": final.valid_acc,
        "final_valid_loss": final.valid_loss,
        "mean_attn_entropy": final.mean_attn_entropy,
        "kv_cache_elements_per_token_layer":
            kvcache.cache_report(cfg.model).elements_per_token_layer,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if svg:
        (out / "metrics.svg").write_text(metrics_svg(result.rows, cfg.name))


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    log = None
    if args.verbose:
        def log(r):
            print(f"step {r.step:6d}  train {r.train_loss:.6g}  valid {r.valid_loss:.6g}  "
                  f"acc {r.valid_acc:.6g}", file=sys.stderr)
    try:
        result = harness.train(cfg, log=log)
    except harness.TrainingDiverged as e:
        print(f"error: training diverged at step {e.step} (loss {e.loss})", file=sys.stderr)
        return EXIT_DIVERGED
    out = Path(args.out)
    _write_run(result, out, svg=args.svg)
    f = result.final
    print(f"# seed={cfg.seed}")
    print(f"{cfg.name}: step {f.step}  valid_acc {f.valid_acc:.6g}  valid_loss {f.valid_loss:.6g}")
    return EXIT_OK


def cmd_compare(args) -> int:
    configs = [load_run_config(p) for p in args.configs]
    names = [c.name for c in configs]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise UsageError(f"duplicate config names: {dupes}")
    try:
        results = harness.compare(configs, jobs=args.jobs)
    except ValueError as e:
        raise UsageError(str(e)) from None
    except harness.TrainingDiverged as e:
        print(f"error: training diverged at step {e.step} (loss {e.loss})", file=sys.stderr)
        return EXIT_DIVERGED
    seed = configs[0].seed
    rows = harness.summary_rows(results)
    summary = _csv(harness.SUMMARY_HEADER, rows, seed)
    if args.out:
        out = Path(args.out)
        for r in results:
            _write_run(r, out / r.config.name)
        (out / "summary.csv").write_text(summary)
        if args.dodm:
            # the same mode can appear under several position schemes
            diff_rows = [row for r in results for row in harness.probe_attention(
                r, label=f"{harness.mode_label(r.config.model)} / "
                         f"{harness.crafts_label(r.config.model)}").rows()]
            (out / "diffusion.csv").write_text(_csv(DIFFUSION_HEADER, diff_rows, seed))
    if args.format == "csv":
        sys.stdout.write(summary)
    else:
        sys.stdout.write(f"# seed={seed}\n" + kvcache.render_table(rows, ("Mode", "Crafts", "Valid Accuracy")))
    return EXIT_OK


def load_run(run_dir: str | Path) -> harness.TrainResult:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise UsageError(f"run directory {run_dir} does not exist")
    for name in ("config.json", "weights.npz", "metrics.csv"):
        if not (run_dir / name).exists():
            raise UsageError(f"{run_dir} is missing {name}")
    cfg = load_run_config(run_dir / "config.json")
    model = harness.init_model(cfg.model, 0)
    with np.load(run_dir / "weights.npz") as z:
        model.load_state_dict({k: z[k] for k in z.files})
    lines = [l for l in (run_dir / "metrics.csv").read_text().splitlines() if not l.startswith("#")]
    rows = [harness.MetricRow(int(r["step"]), float(r["train_loss"]), float(r["valid_loss"]),
                              float(r["valid_acc"]), float(r["mean_attn_entropy"]))
            for r in csv.DictReader(lines)]
    return harness.TrainResult(cfg, rows, model)


def cmd_entropy(args) -> int:
    result = load_run(args.run)
    report = harness.probe_attention(result, n=args.samples)
    text = _csv(DIFFUSION_HEADER, report.rows(), result.config.seed)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------


def metrics_svg(rows: list[harness.MetricRow], title: str, width: int = 480, height: int = 240) -> str:
    """Valid accuracy and normalized train loss against step as a bare SVG."""
    pad = 30
    steps = [r.step for r in rows]
    span = max(max(steps), 1)
    loss_max = max(max(r.train_loss for r in rows), 1e-12)

    def pts(values):
        return " ".join(
            f"{pad + (s / span) * (width - 2 * pad):.2f},{height - pad - v * (height - 2 * pad):.2f}"
            for s, v in zip(steps, values)
        )

    acc = pts([r.valid_acc for r in rows])
    loss = pts([r.train_loss / loss_max for r in rows])
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">\n'
        f'<text x="{pad}" y="18" font-size="12">{title}: valid_acc (blue), train_loss/max (red)</text>\n'
        f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" '
        f'fill="none" stroke="#999"/>\n'
        f'<polyline fill="none" stroke="blue" points="{acc}"/>\n'
        f'<polyline fill="none" stroke="red" points="{loss}"/>\n'
        "</svg>\n"
    )


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qvlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("cache-report", help="KV-cache footprint per token, layer and total")
    c.add_argument("--config")
    c.add_argument("--variant")
    c.add_argument("--d-model", type=int)
    c.add_argument("--heads", type=int)
    c.add_argument("--d-k", type=int)
    c.add_argument("--d-v", type=int)
    c.add_argument("--groups", type=int)
    c.add_argument("--d-latent", type=int)
    c.add_argument("--d-ctx", type=int)
    c.add_argument("--precision-bytes", type=int, default=2)
    c.add_argument("--seq-len", type=int, default=1)
    c.add_argument("--layers", type=int, default=None)
    c.add_argument("--batch", type=int, default=1)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--format", choices=("table", "csv"), default="table")
    c.set_defaults(func=cmd_cache_report)

    g = sub.add_parser("gradcheck", help="finite-difference gradient check of attention layers")
    g.add_argument("--config")
    g.add_argument("--all-variants", action="store_true")
    g.add_argument("--seq-len", type=int, default=5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--format", choices=("table", "csv"), default="table")
    g.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--svg", action="store_true")
    t.add_argument("-v", "--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("compare", help="train several configurations and tabulate accuracy")
    m.add_argument("--configs", nargs="+", required=True)
    m.add_argument("--out")
    m.add_argument("--jobs", type=int, default=1)
    m.add_argument("--dodm", action="store_true", help="also write per-head diffusion CSV")
    m.add_argument("--format", choices=("table", "csv"), default="table")
    m.set_defaults(func=cmd_compare)

    e = sub.add_parser("entropy", help="attention diffusion report for a finished run")
    e.add_argument("--run", required=True)
    e.add_argument("--samples", type=int, default=128)
    e.add_argument("--out")
    e.set_defaults(func=cmd_entropy)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
