"""Sweeps over the relative-distance clamp and the neighbour order.

Every run trains a fresh KOG-Transformer on the same data with the same seed
and differs from the base config in one field only, so rows are comparable.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import NormalizationStats
from .graph import SkeletonGraph
from .models import KogTransformer, KogTransformerConfig
from .train import TrainConfig, evaluate, train

DIRECTED_DELTAS = (1, 2, 3, 4)
UNDIRECTED_DELTAS = (2, 4, 6, 8)
ORDERS = (2, 3, 4, 5)

CSV_FIELDS = ("axis", "order", "delta", "directed", "position_rows", "parameters", "steps",
              "final_loss", "mpjpe_mm", "pck_percent", "auc")


@dataclass(frozen=True)
class AblationPoint:
    axis: str            # "delta" or "order"
    order: int
    delta: int
    directed: bool

    def apply(self, base: KogTransformerConfig) -> KogTransformerConfig:
        return replace(base, order=self.order, delta=self.delta, directed=self.directed)


def delta_sweep(base: KogTransformerConfig) -> list[AblationPoint]:
    pts = [AblationPoint("delta", base.order, d, True) for d in DIRECTED_DELTAS]
    return pts + [AblationPoint("delta", base.order, d, False) for d in UNDIRECTED_DELTAS]


def order_sweep(base: KogTransformerConfig) -> list[AblationPoint]:
    return [AblationPoint("order", k, base.delta, base.directed) for k in ORDERS]


def run_point(point: AblationPoint, base: KogTransformerConfig, skeleton: SkeletonGraph,
              train_data: tuple[np.ndarray, np.ndarray], eval_data: tuple[np.ndarray, np.ndarray],
              stats: NormalizationStats, train_cfg: TrainConfig) -> dict:
    cfg = point.apply(base)
    model = KogTransformer(cfg, skeleton)
    rows = train(model, train_data[0], train_data[1], stats, train_cfg)
    rep = evaluate(model, eval_data[0], eval_data[1], stats)
    return {
        "axis": point.axis, "order": cfg.order, "delta": cfg.delta, "directed": int(cfg.directed),
        "position_rows": model.layers[0].gr.pos_k.shape[0], "parameters": model.num_parameters(),
        "steps": train_cfg.steps, "final_loss": rows[-1]["loss"] if rows else float("nan"),
        "mpjpe_mm": rep.mpjpe_mm, "pck_percent": rep.pck_percent, "auc": rep.auc}


def run_ablation(base: KogTransformerConfig, skeleton: SkeletonGraph,
                 train_data: tuple[np.ndarray, np.ndarray], eval_data: tuple[np.ndarray, np.ndarray],
                 stats: NormalizationStats, train_cfg: TrainConfig,
                 axes: tuple[str, ...] = ("delta", "order"), progress=None) -> list[dict]:
    points: list[AblationPoint] = []
    if "delta" in axes:
        points += delta_sweep(base)
    if "order" in axes:
        points += order_sweep(base)
    out = []
    for p in points:
        row = run_point(p, base, skeleton, train_data, eval_data, stats, train_cfg)
        out.append(row)
        if progress:
            progress(row)
    return out


def write_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


_INT_FIELDS = ("order", "delta", "directed", "position_rows", "parameters", "steps")


def read_csv(path: str | Path) -> list[dict]:
    """Parse a file written by ``write_csv`` back into typed rows."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in CSV_FIELDS[1:]:
            r[k] = int(r[k]) if k in _INT_FIELDS else float(r[k])
    return rows
