#!/usr/bin/env python3
"""Synthesise a pose set, run the clamp-distance and neighbour-order sweeps, print the CSV.

    python3 scripts/ablation.py --out runs/ablation --steps 300
"""
import argparse
import json
import sys
from pathlib import Path

from kogt.cli import main as kogt


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--train-count", type=int, default=512)
    p.add_argument("--eval-count", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mini", action="store_true", help="sweep around the small preset")
    args = p.parse_args()

    out = Path(args.out)
    data = out / "data"
    code = kogt(["synth", "--skeleton", "h36m16", "--seed", str(args.seed), "--train-count", str(args.train_count),
                 "--eval-count", str(args.eval_count), "--out", str(data)])
    if code:
        sys.exit(code)
    argv = ["ablate", "--skeleton", "h36m16", "--seed", str(args.seed), "--steps", str(args.steps),
            "--train-data", str(data / "train.jsonl"), "--eval-data", str(data / "eval.jsonl"),
            "--out", str(out), "-v"]
    if args.mini:
        cfg = out / "mini.json"
        cfg.write_text(json.dumps({"model": {"dim": 64, "order": 5}}))
        argv += ["--config", str(cfg)]
    code = kogt(argv)
    if code:
        sys.exit(code)
    print((out / "ablation.csv").read_text(), end="")


if __name__ == "__main__":
    main()
