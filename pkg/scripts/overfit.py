#!/usr/bin/env python3
"""Memorise a small synthetic set and report how fast the training error drops below 1 mm.

    python3 scripts/overfit.py kog            # mini KOG-Transformer, 64 poses
    python3 scripts/overfit.py gase           # 32-wide GASE-Net, 16 hands, 96 vertices
"""
import argparse
import json
import time

from kogt.data import compute_stats, generate_synthetic, generate_synthetic_mesh, stack_samples
from kogt.graph import load_skeleton
from kogt.models import GaseNet, GaseNetConfig, KogTransformer, KogTransformerConfig
from kogt.train import TrainConfig, train


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("model", choices=("kog", "gase"))
    p.add_argument("--steps", type=int, help="step budget (default 5000 kog, 10000 gase)")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--eval-every", type=int, default=50)
    p.add_argument("--target-mm", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    if args.model == "kog":
        skel = load_skeleton("h36m16")
        x, y = stack_samples(generate_synthetic(skel, 64, args.seed))
        model = KogTransformer(KogTransformerConfig.mini(dropout=args.dropout, seed=args.seed), skel)
        steps, batch, key = args.steps or 5000, 64, "mpjpe_mm"
    else:
        skel = load_skeleton("hand21")
        x, y = stack_samples(generate_synthetic_mesh(skel, 16, args.seed, 96))
        cfg = GaseNetConfig(dim=32, dropout=args.dropout, schedule=(21, 32, 48, 64, 80, 96), seed=args.seed)
        model = GaseNet(cfg, skel)
        steps, batch, key = args.steps or 10000, 16, "mpve_mm"

    t0 = time.perf_counter()

    def report(row):
        err = row["eval"][key]
        print(json.dumps({"step": row["step"] + 1, "loss": row["loss"], key: err,
                          "seconds": round(time.perf_counter() - t0, 1)}), flush=True)
        return err < args.target_mm

    cfg = TrainConfig(steps=steps, lr=args.lr, batch_size=batch, eval_every=args.eval_every, log_every=0,
                      seed=args.seed)
    train(model, x, y, compute_stats(x, y), cfg, eval_data=(x, y), callback=report)


if __name__ == "__main__":
    main()
