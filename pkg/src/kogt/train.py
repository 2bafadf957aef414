"""Mini-batch training and evaluation loops."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import NormalizationStats, denormalize_target, normalize, save_checkpoint
from .errors import ConfigError
from .metrics import MetricReport, mesh_report, pose_report
from .models import GaseNet, KogTransformer, config_to_dict
from .nn import Adam, LrSchedule

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 64
    lr: float = 1e-3
    lr_factor: float = 0.9
    lr_interval: int = 50000
    lr_kind: str = "step"
    eval_every: int = 500
    checkpoint_every: int = 0
    log_every: int = 100
    seed: int = 0

    @classmethod
    def kog_defaults(cls, **kw) -> "TrainConfig":
        return cls(**kw)

    @classmethod
    def gase_defaults(cls, **kw) -> "TrainConfig":
        # ObMan variant of the schedule: x0.96 every 30 epochs
        return cls(**{"lr": 1e-5, "lr_factor": 0.96, "lr_interval": 30, "lr_kind": "epoch", **kw})

    @classmethod
    def from_dict(cls, d: dict, base: "TrainConfig | None" = None) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown training fields: {unknown}")
        cur = asdict(base or cls())
        for k, v in d.items():
            ref = cur[k]
            if isinstance(ref, str):
                ok = isinstance(v, str)
            elif isinstance(ref, int):
                ok = isinstance(v, int) and not isinstance(v, bool)
            else:
                ok = isinstance(v, (int, float)) and not isinstance(v, bool)
            if not ok:
                raise ConfigError(f"training field {k} has wrong type: {v!r}")
            cur[k] = v
        return cls(**cur)

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.lr, self.lr_factor, self.lr_interval, self.lr_kind)


def predict(model, inputs_norm: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Evaluation-mode forward pass over a normalised input array."""
    outs = []
    for i in range(0, len(inputs_norm), batch_size):
        outs.append(model(inputs_norm[i:i + batch_size], train=False).data)
    return np.concatenate(outs).astype(np.float64)


def evaluate(model, inputs: np.ndarray, targets: np.ndarray, stats: NormalizationStats) -> MetricReport:
    """Metrics in millimetres on raw (un-normalised) arrays."""
    x, _ = normalize(inputs, targets, stats)
    pred = denormalize_target(predict(model, x.astype(model.dtype)), stats)
    _, gt = normalize(inputs, targets, stats)
    gt = denormalize_target(gt, stats)
    if isinstance(model, GaseNet):
        return mesh_report(pred, gt)
    return pose_report(pred, gt, stats.root_index)


def _headline(report: MetricReport) -> float:
    return report.mpve_mm if report.mpve_mm is not None else report.mpjpe_mm


def train(model: KogTransformer | GaseNet, inputs: np.ndarray, targets: np.ndarray,
          stats: NormalizationStats, cfg: TrainConfig, eval_data=None, out_dir=None,
          callback=None) -> list[dict]:
    """Adam + MSE training; returns the log rows (also written to ``out_dir/metrics.json``).

    ``eval_data`` is an optional (inputs, targets) pair of raw arrays. With
    ``out_dir`` set, ``last.kogt`` is written at the end, ``best.kogt`` at every
    eval improvement, and ``step_<n>.kogt`` every ``checkpoint_every`` steps.
    ``callback`` receives every log row; a truthy return value stops training
    after that step.
    """
    dtype = model.dtype
    xs, ys = normalize(inputs, targets, stats)
    xs, ys = xs.astype(dtype), ys.astype(dtype)
    n = len(xs)
    bs = min(cfg.batch_size, n)
    rng = T.seeded_rng([cfg.seed, 2])
    drop_rng = T.seeded_rng([cfg.seed, 3])
    opt = Adam(list(model.named_parameters()), lr=cfg.lr)
    sched = cfg.schedule()
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    best = float("inf")
    order = rng.permutation(n)
    cursor = 0

    def write(name):
        save_checkpoint(out / name, config_to_dict(model.config), model.state_dict(), stats,
                        model.config.seed, {"skeleton": model.skeleton.to_dict(), "step": step + 1})

    for step in range(cfg.steps):
        if cursor + bs > n:
            order, cursor = rng.permutation(n), 0
        batch = order[cursor:cursor + bs]
        cursor += bs
        epoch = (step * bs) // n
        lr = sched(step if sched.kind == "step" else epoch)

        pred = model(xs[batch], train=True, rng=drop_rng)
        loss = T.squared_error(pred, ys[batch])
        opt.zero_grad()
        loss.backward()
        opt.step(lr)

        row = None
        last = step == cfg.steps - 1
        if cfg.log_every and (step % cfg.log_every == 0 or last):
            row = {"step": step, "epoch": epoch, "lr": lr, "loss": float(loss.data)}
        if eval_data is not None and cfg.eval_every and ((step + 1) % cfg.eval_every == 0 or last):
            rep = evaluate(model, eval_data[0], eval_data[1], stats)
            row = row or {"step": step, "epoch": epoch, "lr": lr, "loss": float(loss.data)}
            row["eval"] = json.loads(rep.to_json())
            score = _headline(rep)
            if score < best:
                best = score
                if out:
                    write("best.kogt")
        stop = False
        if row is not None:
            rows.append(row)
            log.info("step %d lr %.3g loss %.6g%s", step, lr, row["loss"],
                     f" eval {_headline(rep):.3f} mm" if "eval" in row else "")
            if callback:
                stop = bool(callback(row))
        if out and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            write(f"step_{step + 1}.kogt")
        if stop:
            break

    if out:
        write("last.kogt")
        (out / "metrics.json").write_text(json.dumps(rows, indent=1) + "\n", encoding="utf-8")
    return rows
