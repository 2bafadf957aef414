#!/usr/bin/env python3
"""Train the default KOG-Transformer on synthetic poses and dump its per-order fusion weights.

The matrices written by ``kogt inspect`` (signed distances, relative indices,
order masks, fusion weights) land in ``<out>/inspect``.

    python3 scripts/fusion_weights.py --steps 500
"""
import argparse
import sys
from pathlib import Path

from kogt.cli import main as kogt


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", default="runs/fusion")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    out = Path(args.out)
    steps = [
        ["synth", "--skeleton", "h36m16", "--seed", str(args.seed), "--out", str(out / "data")],
        ["train", "--skeleton", "h36m16", "--seed", str(args.seed), "--steps", str(args.steps),
         "--train-data", str(out / "data" / "train.jsonl"), "--eval-data", str(out / "data" / "eval.jsonl"),
         "--out", str(out / "run"), "-v"],
        ["inspect", "--checkpoint", str(out / "run" / "best.kogt"), "--out", str(out / "inspect")],
    ]
    for argv in steps:
        code = kogt(argv)
        if code:
            sys.exit(code)
    print((out / "inspect" / "fusion_weights.csv").read_text(), end="")


if __name__ == "__main__":
    main()
