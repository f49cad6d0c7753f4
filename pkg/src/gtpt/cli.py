"""Command-line entry point: synth | train | eval | flops | dump.

Exit codes: 0 success, 1 usage error, 2 invalid config, 3 data/checkpoint
I/O failure. Diagnostics go to stderr; structured output goes to stdout.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .complexity import count_flops
from .evaluation import evaluate_model
from .model import PoseModel
from .schema import ConfigError, ModelConfig, load_config
from .synthdata import DataError, generate_dataset, load_dataset, save_dataset
from .training import TrainingError, curriculum_transfer, train_loop


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="gtpt", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic dataset file")
    sp.add_argument("--config", required=True)
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, required=True)

    tp = sub.add_parser("train", help="train one curriculum stage")
    tp.add_argument("--config", required=True)
    tp.add_argument("--data", required=True)
    tp.add_argument("--stage", required=True, choices=("body", "wholebody"))
    tp.add_argument("--init", default=None)
    tp.add_argument("--out", required=True)
    tp.add_argument("--steps", type=int, default=None)

    ep = sub.add_parser("eval", help="PCK evaluation of a checkpoint")
    ep.add_argument("--config", required=True)
    ep.add_argument("--data", required=True)
    ep.add_argument("--ckpt", required=True)
    ep.add_argument("--no-prune", action="store_true")

    fp = sub.add_parser("flops", help="analytic parameter/FLOPs report")
    fp.add_argument("--config", required=True)
    fp.add_argument("--no-prune", action="store_true")
    fp.add_argument("--introduction", default=None,
                    choices=("dense", "sparse-dense", "human-sparse-dense"))

    dp = sub.add_parser("dump", help="write attention maps and prune masks as PGM images")
    dp.add_argument("--config", required=True)
    dp.add_argument("--ckpt", required=True)
    dp.add_argument("--data", required=True)
    dp.add_argument("--index", type=int, required=True)
    dp.add_argument("--out", required=True)
    return p


def _load_samples(path: str, cfg: ModelConfig):
    samples = load_dataset(path)
    schema = cfg.build_schema()
    if samples and samples[0].coords.shape[0] != schema.n_total:
        raise DataError(
            f"{path}: dataset has {samples[0].coords.shape[0]} keypoints, "
            f"config mode {cfg.mode!r} expects {schema.n_total}")
    return samples


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    schema = cfg.build_schema()
    samples = generate_dataset(args.seed, args.count, schema,
                               cfg.image_height, cfg.image_width)
    save_dataset(args.out, samples)
    print(json.dumps({"written": args.out, "count": len(samples),
                      "keypoints": schema.n_total}))
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config).replace(mode=args.stage)
    samples = _load_samples(args.data, cfg)
    if not samples:
        raise DataError(f"{args.data}: empty dataset")
    model = PoseModel(cfg)
    if args.init:
        state = load_checkpoint(args.init)
        if cfg.mode == "wholebody" and "dense_embed" not in state:
            store, new_names = curriculum_transfer(state, cfg)
            model = PoseModel(cfg, params=store)
            print(json.dumps({"curriculum_new_params": new_names}), file=sys.stderr)
        else:
            model.params.load_state(state)

    def log_fn(rec):
        print(json.dumps(rec))

    def ckpt_fn(step):
        save_checkpoint(args.out, model.params)

    train_loop(model, samples, steps=args.steps, log_fn=log_fn, ckpt_fn=ckpt_fn)
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    samples = _load_samples(args.data, cfg)
    model = PoseModel(cfg)
    model.params.load_state(load_checkpoint(args.ckpt))
    result = evaluate_model(model, samples, model.schema,
                            prune=not args.no_prune)
    result["pruned"] = not args.no_prune
    print(json.dumps(result))
    return 0


def cmd_flops(args) -> int:
    cfg = load_config(args.config)
    if args.introduction:
        cfg = cfg.replace(introduction_mode=args.introduction)
    report = count_flops(cfg, pruned=not args.no_prune)
    print(json.dumps(report.to_dict()))
    print(report.table())
    return 0


def _write_pgm(path: str, values: np.ndarray) -> tuple[float, float]:
    lo, hi = float(values.min()), float(values.max())
    scaled = np.zeros_like(values, dtype=np.float64) if hi == lo \
        else (values.astype(np.float64) - lo) / (hi - lo)
    data = (scaled * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{values.shape[1]} {values.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())
    return lo, hi


def cmd_dump(args) -> int:
    cfg = load_config(args.config)
    samples = _load_samples(args.data, cfg)
    if not 0 <= args.index < len(samples):
        raise DataError(f"--index {args.index} outside dataset of {len(samples)} samples")
    model = PoseModel(cfg)
    model.params.load_state(load_checkpoint(args.ckpt))
    res = model.forward(samples[args.index].image)
    os.makedirs(args.out, exist_ok=True)
    rows, cols = res.visual.grid
    sidecar = {}

    def grid_image(values: np.ndarray, grid_idx: np.ndarray) -> np.ndarray:
        img = np.zeros(rows * cols)
        img[grid_idx] = values
        return img.reshape(rows, cols)

    for rec in res.coarse.records + res.groups.records:
        v_cols = rec.visual_key_columns()
        kp_rows = rec.keypoint_query_rows()
        if not v_cols.size or not kp_rows.size:
            continue
        pooled = rec.weights[:, kp_rows][:, :, v_cols].mean(axis=(0, 1))
        suffix = f"coarse_l{rec.layer:02d}" if rec.group is None \
            else f"fine_l{rec.layer:02d}_g{rec.group}"
        name = f"attn_{suffix}.pgm"
        lo, hi = _write_pgm(os.path.join(args.out, name), grid_image(pooled, rec.visual_grid))
        sidecar[name] = {"min": lo, "max": hi, "layer": rec.layer, "group": rec.group}
    for dec in res.decisions:
        mask = grid_image(np.ones(dec.grid_indices.size), dec.grid_indices)
        tag = f"s{dec.stage}" if dec.group is None else f"s{dec.stage}_g{dec.group}"
        name = f"prune_{tag}.pgm"
        lo, hi = _write_pgm(os.path.join(args.out, name), mask)
        sidecar[name] = {"min": lo, "max": hi, **dec.to_dict()}
    with open(os.path.join(args.out, "index.json"), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2)
    print(json.dumps({"written": args.out, "images": len(sidecar)}))
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "flops": cmd_flops,
    "dump": cmd_dump,
}


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DataError, CheckpointError, TrainingError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
