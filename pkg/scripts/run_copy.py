"""Train QKV and QV on the COPY task and report final accuracy and attention entropy."""

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from qvlab import harness
from qvlab.cli import load_run_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def run(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int)
    ap.add_argument("--seed", type=int)
    args = ap.parse_args(argv)

    for name in ("copy_qkv.json", "copy_qv.json"):
        cfg = load_run_config(CONFIGS / name)
        if args.steps is not None:
            cfg = replace(cfg, steps=args.steps)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed, task=replace(cfg.task, seed=args.seed))
        res = harness.train(cfg, log=lambda r: print(
            f"  step {r.step:5d} train {r.train_loss:.4f} valid_acc {r.valid_acc:.4f}",
            file=sys.stderr))
        diff = harness.probe_attention(res)
        print(f"{cfg.name}: valid_acc {res.final.valid_acc:.4f}  "
              f"mean entropy {diff.mean_entropy:.4f} nats  max mass {diff.mean_max_mass:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(run())
