"""Train the six-row QV / QKV / QV-Ka grid and print the accuracy table.

    python scripts/run_grid.py --out runs/grid [--steps N] [--jobs J]

Writes per-run directories, summary.csv and diffusion.csv under ``--out``.
"""

import argparse
import json
import sys
import tempfile
from pathlib import Path

from qvlab.cli import main

CONFIGS = Path(__file__).resolve().parents[1] / "configs" / "grid"


def with_steps(paths, steps, tmp):
    out = []
    for p in paths:
        d = json.loads(p.read_text())
        d["train"]["steps"] = steps
        q = Path(tmp) / p.name
        q.write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
        out.append(q)
    return out


def run(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/grid")
    ap.add_argument("--steps", type=int, help="override the 2000-step budget")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args(argv)

    paths = sorted(CONFIGS.glob("*.json"))
    with tempfile.TemporaryDirectory() as tmp:
        if args.steps is not None:
            paths = with_steps(paths, args.steps, tmp)
        return main(["compare", "--configs", *map(str, paths), "--out", args.out,
                     "--jobs", str(args.jobs), "--dodm"])


if __name__ == "__main__":
    sys.exit(run())
