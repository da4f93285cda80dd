"""Print KV-cache bytes per token and layer for every variant at a given size."""

import argparse

from qvlab.config import ModelConfig, Variant, VariantKind
from qvlab.kvcache import cache_report, minimal_model_table


def run(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--d-model", type=int, default=1024)
    ap.add_argument("--heads", type=int, default=16)
    ap.add_argument("--groups", type=int, default=4)
    ap.add_argument("--precision-bytes", type=int, default=2)
    args = ap.parse_args(argv)

    d_head = args.d_model // args.heads
    extra = {
        VariantKind.GQA: {"kv_groups": args.groups},
        VariantKind.QVVV: {"kv_groups": args.groups},
        VariantKind.VSHARED_UNIQUE_K: {"kv_groups": args.groups},
        VariantKind.MLA_LITE: {"d_latent": 2 * d_head},
        VariantKind.QV_KA: {"d_ctx": 2 * d_head},
    }
    for kind in VariantKind:
        cfg = ModelConfig(d_model=args.d_model, heads=args.heads,
                          variant=Variant(kind, **extra.get(kind, {})))
        r = cache_report(cfg, args.precision_bytes)
        parts = " + ".join(f"{n}:{e}" for n, e in r.breakdown)
        print(f"{kind.value:<18} {r.per_token_per_layer_bytes:>7d} B   ({parts})")
    print()
    for s in minimal_model_table():
        print(f"{s.name:<42} cached V per layer {s.cached_v_per_layer}  "
              f"total {s.cached_v_total}  pairings {s.pairings_covered}")


if __name__ == "__main__":
    run()
