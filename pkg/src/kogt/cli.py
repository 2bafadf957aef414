"""Command-line entry point: ``kogt {synth,train,eval,gradcheck,inspect,ablate}``.

Exit codes: 0 success, 1 invalid input or configuration, 2 a verification
(gradient check) failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import ablation, gradcheck
from .data import (compute_stats, generate_synthetic, generate_synthetic_mesh, load_checkpoint,
                   load_dataset, save_dataset, stack_samples)
from .errors import ConfigError, KogError
from .graph import SkeletonGraph, build_relative_index_map, build_signed_distance, load_skeleton
from .models import (GaseNetConfig, KogTransformer, KogTransformerConfig, build_model,
                     config_from_dict, config_to_dict)
from .train import TrainConfig, evaluate, train

EXIT_OK, EXIT_INVALID, EXIT_VERIFY = 0, 1, 2

log = logging.getLogger("kogt")


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; 2 is reserved for verification failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# argument resolution


def _require_file(path, flag: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{flag}: no such file {path}")
    return p


def _skeleton(arg) -> SkeletonGraph:
    if arg is None:
        raise ConfigError("--skeleton is required")
    return load_skeleton(arg)


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        d = json.loads(_require_file(path, "--config").read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--config: invalid JSON ({exc})") from exc
    if not isinstance(d, dict):
        raise ConfigError("--config must hold a JSON object")
    unknown = sorted(set(d) - {"model", "train"})
    if unknown:
        raise ConfigError(f"--config: unknown sections {unknown} (expected 'model', 'train')")
    return d


def _resolve(args, skeleton: SkeletonGraph | None = None):
    """Model and training configs from --config plus --seed / --precision overrides."""
    raw = _read_config(args.config)
    model_d = dict(raw.get("model", {}))
    if not isinstance(model_d, dict):
        raise ConfigError("--config: 'model' must be an object")
    model_d.setdefault("kind", "kog")
    if args.seed is not None:
        model_d["seed"] = args.seed
    if args.precision is not None:
        model_d["precision"] = args.precision
    if skeleton is not None:
        model_d.setdefault("num_joints", skeleton.num_nodes)
    cfg = config_from_dict(model_d)
    base = TrainConfig.gase_defaults() if isinstance(cfg, GaseNetConfig) else TrainConfig.kog_defaults()
    train_d = dict(raw.get("train", {}))
    if args.seed is not None:
        train_d["seed"] = args.seed
    tcfg = TrainConfig.from_dict(train_d, base)
    if skeleton is not None and cfg.num_joints != skeleton.num_nodes:
        raise ConfigError(f"config has {cfg.num_joints} joints, skeleton has {skeleton.num_nodes}")
    return cfg, tcfg


def _target_nodes(cfg) -> int | None:
    return cfg.num_vertices if isinstance(cfg, GaseNetConfig) else None


def _load_arrays(path, skeleton, cfg, flag):
    arrays = stack_samples(list(load_dataset(_require_file(path, flag), skeleton, _target_nodes(cfg))))
    want_in = 3 if isinstance(cfg, GaseNetConfig) else cfg.in_dim
    if arrays[0].shape[-1] != want_in:
        raise ConfigError(f"{flag}: inputs have {arrays[0].shape[-1]} coordinates, "
                          f"the {cfg.kind} model expects {want_in}")
    return arrays


def _out_dir(args) -> Path:
    if args.out is None:
        raise ConfigError("--out is required")
    p = Path(args.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _model_from_checkpoint(path, skeleton_arg, precision):
    ckpt = load_checkpoint(_require_file(path, "--checkpoint"))
    if skeleton_arg is not None:
        skeleton = load_skeleton(skeleton_arg)
    elif "skeleton" in ckpt.extra:
        skeleton = SkeletonGraph.from_dict(ckpt.extra["skeleton"])
    else:
        raise ConfigError("checkpoint carries no skeleton; pass --skeleton")
    model_d = dict(ckpt.config)
    if precision is not None:
        model_d["precision"] = precision
    cfg = config_from_dict(model_d)
    model = build_model(cfg, skeleton)
    model.load_state_dict(ckpt.params)
    return model, ckpt, skeleton


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _write_matrix(path: Path, m: np.ndarray, fmt=str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node"] + list(range(m.shape[1])))
        for i, row in enumerate(m):
            w.writerow([i] + [fmt(v) for v in row])


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    skeleton = _skeleton(args.skeleton)
    out = _out_dir(args)
    seed = 0 if args.seed is None else args.seed
    for name, count, stream in (("train", args.train_count, 0), ("eval", args.eval_count, 1)):
        if args.kind == "mesh":
            samples = generate_synthetic_mesh(skeleton, count, [seed, stream], args.vertices)
        else:
            samples = generate_synthetic(skeleton, count, [seed, stream])
        n = save_dataset(samples, out / f"{name}.jsonl")
        log.info("wrote %d %s samples to %s", n, name, out / f"{name}.jsonl")
    return EXIT_OK


def cmd_train(args) -> int:
    skeleton = _skeleton(args.skeleton)
    cfg, tcfg = _resolve(args, skeleton)
    if args.train_data is None:
        raise ConfigError("--train-data is required")
    _require_file(args.train_data, "--train-data")
    if args.eval_data is not None:
        _require_file(args.eval_data, "--eval-data")
    if args.steps is not None:
        tcfg = replace(tcfg, steps=args.steps)
    out = _out_dir(args)
    x, y = _load_arrays(args.train_data, skeleton, cfg, "--train-data")
    eval_data = _load_arrays(args.eval_data, skeleton, cfg, "--eval-data") if args.eval_data else None
    stats = compute_stats(x, y, skeleton.root)
    model = build_model(cfg, skeleton)
    _write_json(out / "config.json", {"model": config_to_dict(cfg), "train": tcfg.__dict__})
    train(model, x, y, stats, tcfg, eval_data=eval_data, out_dir=out)
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.checkpoint is None:
        raise ConfigError("--checkpoint is required")
    if args.eval_data is None:
        raise ConfigError("--eval-data is required")
    _require_file(args.eval_data, "--eval-data")
    model, ckpt, skeleton = _model_from_checkpoint(args.checkpoint, args.skeleton, args.precision)
    if ckpt.stats is None:
        raise ConfigError("checkpoint carries no normalisation statistics")
    x, y = _load_arrays(args.eval_data, skeleton, model.config, "--eval-data")
    report = evaluate(model, x, y, ckpt.stats)
    text = report.to_json()
    if args.out is not None:
        out = _out_dir(args)
        (out / "report.json").write_text(text + "\n", encoding="utf-8")
        (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    report = gradcheck.run_suite(instances=args.instances, seed=seed)
    summary = report.summary()
    for name, s in summary.items():
        print(f"{'PASS' if s['passed'] else 'FAIL'} {name:24s} n={s['instances']:3d} "
              f"max_rel_err={s['max_rel_error']:.3e}")
    log.info("gradcheck finished in %.1f s", report.seconds)
    if args.out is not None:
        _write_json(_out_dir(args) / "gradcheck.json",
                    {"passed": report.passed, "tolerance": gradcheck.RTOL, "cases": summary})
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_inspect(args) -> int:
    if args.checkpoint is not None:
        model, _, skeleton = _model_from_checkpoint(args.checkpoint, args.skeleton, args.precision)
        cfg = model.config
    else:
        skeleton = _skeleton(args.skeleton)
        cfg, _ = _resolve(args, skeleton)
        model = build_model(cfg, skeleton)
    if not isinstance(model, KogTransformer):
        raise ConfigError("inspect needs a KOG-Transformer model")
    out = _out_dir(args)
    H = build_signed_distance(skeleton)
    _write_matrix(out / "H.csv", H.entries)
    idx = build_relative_index_map(H, cfg.delta, cfg.directed)
    _write_matrix(out / "relative_index.csv", idx.indices)
    additive = model._masks.additive(np.float64)
    for i in range(cfg.order + 1):
        _write_matrix(out / f"mask_order_{i}.csv", additive[i],
                      fmt=lambda v: "0" if v == 0 else "-inf")
    with open(out / "fusion_weights.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["module"] + [f"c_{i}" for i in range(cfg.order + 1)])
        for label, c in model.fusion_weights():
            w.writerow([label] + [repr(float(v)) for v in c])
    return EXIT_OK


def cmd_ablate(args) -> int:
    skeleton = _skeleton(args.skeleton)
    cfg, tcfg = _resolve(args, skeleton)
    if not isinstance(cfg, KogTransformerConfig):
        raise ConfigError("ablate sweeps KOG-Transformer configs only")
    for flag, val in (("--train-data", args.train_data), ("--eval-data", args.eval_data)):
        if val is None:
            raise ConfigError(f"{flag} is required")
        _require_file(val, flag)
    if args.steps is not None:
        tcfg = replace(tcfg, steps=args.steps)
    tcfg = replace(tcfg, eval_every=0)
    out = _out_dir(args)
    train_data = _load_arrays(args.train_data, skeleton, cfg, "--train-data")
    eval_data = _load_arrays(args.eval_data, skeleton, cfg, "--eval-data")
    stats = compute_stats(*train_data, skeleton.root)
    axes = tuple(args.axes.split(","))
    bad = sorted(set(axes) - {"delta", "order"})
    if bad:
        raise ConfigError(f"--axes: unknown axes {bad}")
    rows = ablation.run_ablation(cfg, skeleton, train_data, eval_data, stats, tcfg, axes,
                                 progress=lambda r: log.info("%s", r))
    ablation.write_csv(rows, out / "ablation.csv")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--skeleton", help="skeleton JSON path or bundled name (h36m16, hand21)")
    common.add_argument("--config", help="JSON file with optional 'model' and 'train' objects")
    common.add_argument("--seed", type=int)
    common.add_argument("--precision", choices=("f32", "f64"))
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="kogt", description="Train, evaluate, verify and inspect pose-lifting models.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic train/eval dataset pair")
    s.add_argument("--kind", choices=("pose", "mesh"), default="pose")
    s.add_argument("--train-count", type=int, default=1024)
    s.add_argument("--eval-count", type=int, default=256)
    s.add_argument("--vertices", type=int, default=778)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train a model")
    s.add_argument("--train-data")
    s.add_argument("--eval-data")
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    s.add_argument("--checkpoint")
    s.add_argument("--eval-data")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    s.add_argument("--instances", type=int, default=20)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("inspect", parents=[common], help="dump distances, masks and fusion weights")
    s.add_argument("--checkpoint")
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("ablate", parents=[common], help="delta and order sweeps")
    s.add_argument("--train-data")
    s.add_argument("--eval-data")
    s.add_argument("--steps", type=int, default=200)
    s.add_argument("--axes", default="delta,order", help="comma list from {delta, order}")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (KogError, OSError) as exc:
        print(f"kogt {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
