"""Command line harness: synth, train, eval, ablate, analyze.

Exit codes are a stable contract: 0 success, 2 configuration error,
3 data error, 4 numerical failure.  STAINLAB_THREADS caps the worker
threads the ablation sweep may use (default 1).
"""

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import attention, metrics, stains, synth
from .config import from_dict, load_config, to_raw
from .engine.checkpoint import load_checkpoint
from .errors import (
    ConfigInvalid,
    DataMissing,
    DegenerateBatch,
    DegenerateStain,
    EmptySet,
    InsufficientTissue,
    NonFiniteValue,
    ShapeMismatch,
    StainlabError,
)
from .model import build_model
from .train import train_model

SPLIT_TRAIN = "train"
SPLIT_VAL = "val"
SPLIT_TEST_SHIFTED = "test_shifted"
SPLIT_VAL_SHIFTED = "val_shifted"


def _say(msg):
    print(msg, flush=True)


def _max_workers():
    try:
        return max(1, int(os.environ.get("STAINLAB_THREADS", "1")))
    except ValueError:
        raise ConfigInvalid(f"STAINLAB_THREADS must be an integer, got {os.environ['STAINLAB_THREADS']!r}")


def _parse_seeds(text):
    try:
        return [int(s) for s in text.split(",") if s.strip() != ""]
    except ValueError:
        raise ConfigInvalid(f"--seeds must be a comma list of integers, got {text!r}")


def _load_splits(data_dir, names):
    splits = {}
    for name in names:
        path = os.path.join(data_dir, name)
        if os.path.isdir(path):
            samples, _ = synth.load_split(path)
            splits[name] = samples
    if SPLIT_TRAIN in names and SPLIT_TRAIN not in splits:
        raise DataMissing(f"no train split under {data_dir}")
    if SPLIT_VAL in names and SPLIT_VAL not in splits:
        raise DataMissing(f"no val split under {data_dir}")
    return splits


def cmd_synth(args):
    cfg = load_config(args.config)
    data = cfg.data
    shift = synth.make_shift_matrix(
        data.synth.stain_matrix, data.shift_rotate_deg, data.shift_elementwise
    )
    counts = {
        SPLIT_TRAIN: (0, data.train_count, None),
        SPLIT_VAL: (data.train_count, data.val_count, None),
        SPLIT_TEST_SHIFTED: (data.train_count + data.val_count, data.test_count, shift),
        # shifted twin of val, index-paired for divergence analysis
        SPLIT_VAL_SHIFTED: (data.train_count, data.val_count, shift),
    }
    for name, (start, count, matrix) in counts.items():
        samples = [synth.generate_indexed(data.synth, start + i, base_matrix=matrix) for i in range(count)]
        extra = {"split": name, "shift_matrix": stains.stain_to_list(shift) if matrix is not None else None}
        synth.save_split(os.path.join(args.out, name), samples, data.synth, extra)
        _say(f"wrote {count} samples to {os.path.join(args.out, name)}")
    return 0


def _train_single(cfg, data_dir, out_dir, seed, quiet=False):
    raw = to_raw(cfg)
    raw["train"]["seed"] = seed
    cfg = from_dict(raw)
    splits = _load_splits(data_dir, (SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST_SHIFTED, SPLIT_VAL_SHIFTED))
    log = None if quiet else _say
    return train_model(cfg, splits, out_dir=out_dir, log=log)


def cmd_train(args):
    cfg = load_config(args.config)
    if args.variant:
        raw = to_raw(cfg)
        raw["model"]["variant"] = args.variant
        cfg = from_dict(raw)
    seeds = _parse_seeds(args.seeds) if args.seeds else [cfg.train.seed]
    for seed in seeds:
        out_dir = args.out if len(seeds) == 1 else os.path.join(args.out, f"seed{seed}")
        _say(f"training variant={cfg.model.variant} seed={seed} -> {out_dir}")
        result = _train_single(cfg, args.data, out_dir, seed)
        final = result["report"]["final"]
        summary = ", ".join(f"{k} dice={v['dice']:.4f}" for k, v in sorted(final.items()))
        _say(f"seed {seed} done: {summary}")
    return 0


def _model_from_checkpoint(path):
    params, buffers, _, meta = load_checkpoint(path)
    if "config" not in meta:
        raise DataMissing(f"checkpoint {path} has no config snapshot")
    cfg = from_dict(meta["config"])
    model = build_model(cfg.model, np.random.default_rng(0))
    model.load_parameters(params)
    model.load_buffers(buffers)
    model.set_training(False)
    return model, cfg, meta


def cmd_eval(args):
    checkpoints = [c for chunk in args.checkpoint for c in chunk.split(",")]
    if not checkpoints:
        raise ConfigInvalid("eval needs at least one --checkpoint")
    per_checkpoint = {}
    for path in checkpoints:
        model, _, _ = _model_from_checkpoint(path)
        splits = _load_splits(args.data, (SPLIT_VAL, SPLIT_TEST_SHIFTED, SPLIT_VAL_SHIFTED, SPLIT_TRAIN))
        per_checkpoint[path] = {name: metrics.evaluate_masks(model, samples) for name, samples in splits.items()}

    aggregate = {}
    split_names = sorted({name for scores in per_checkpoint.values() for name in scores})
    for name in split_names:
        rows = [scores[name] for scores in per_checkpoint.values() if name in scores]
        aggregate[name] = {
            metric: {
                "mean": float(np.mean([r[metric] for r in rows])),
                "std": float(np.std([r[metric] for r in rows])),
            }
            for metric in ("dice", "precision", "recall")
        }
    payload = {"checkpoints": checkpoints, "per_checkpoint": per_checkpoint, "aggregate": aggregate}
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        out_path = os.path.join(args.out, "metrics.json")
        with open(out_path, "w") as fh:
            fh.write(text + "\n")
        _say(f"wrote {out_path}")
    else:
        _say(text)
    return 0


ABLATE_AXES = ("stage", "downsample", "ca_onoff")


def _ablate_cells(cfg, axis):
    base = to_raw(cfg)
    cells = []
    if axis == "stage":
        baseline = json.loads(json.dumps(base))
        baseline["model"]["variant"] = "BASELINE"
        cells.append(("baseline", baseline))
        for stage in range(1, len(cfg.model.encoder_channels) + 1):
            raw = json.loads(json.dumps(base))
            raw["model"]["variant"] = "STINV_CA"
            raw["model"]["attach_stage"] = stage
            cells.append((f"stage{stage}", raw))
    elif axis == "downsample":
        for mode in ("MAX", "AVG", "SCONV"):
            raw = json.loads(json.dumps(base))
            raw["model"]["variant"] = "STINV_CA"
            raw["model"]["branch"]["downsample_mode"] = mode
            cells.append((mode, raw))
    elif axis == "ca_onoff":
        for variant in ("STINV", "STINV_CA"):
            raw = json.loads(json.dumps(base))
            raw["model"]["variant"] = variant
            cells.append((variant, raw))
    else:
        raise ConfigInvalid(f"--axis must be one of {ABLATE_AXES}, got {axis!r}")
    return cells


def cmd_ablate(args):
    cfg = load_config(args.config)
    seeds = _parse_seeds(args.seeds) if args.seeds else [0, 1, 2]
    cells = _ablate_cells(cfg, args.axis)
    os.makedirs(args.out, exist_ok=True)

    jobs = []
    for cell_name, raw in cells:
        for seed in seeds:
            jobs.append((cell_name, raw, seed))

    def run(job):
        cell_name, raw, seed = job
        cell_cfg = from_dict(raw)
        out_dir = os.path.join(args.out, cell_name, f"seed{seed}")
        result = _train_single(cell_cfg, args.data, out_dir, seed, quiet=True)
        final = result["report"]["final"]
        _say(f"[{args.axis}] {cell_name} seed{seed}: " + ", ".join(f"{k}={v['dice']:.4f}" for k, v in sorted(final.items())))
        return cell_name, seed, final

    workers = _max_workers()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]

    by_cell = {}
    for cell_name, seed, final in results:
        by_cell.setdefault(cell_name, {})[seed] = final

    table_path = os.path.join(args.out, f"ablation_{args.axis}.csv")
    split_names = sorted({name for finals in by_cell.values() for f in finals.values() for name in f})
    with open(table_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["cell"]
        for name in split_names:
            header += [f"{name}_dice_mean", f"{name}_dice_std"]
        header += [f"seed{s}_{name}_dice" for s in seeds for name in split_names]
        writer.writerow(header)
        for cell_name, _ in cells:
            finals = by_cell[cell_name]
            row = [cell_name]
            for name in split_names:
                vals = [finals[s][name]["dice"] for s in seeds if name in finals[s]]
                row += [f"{np.mean(vals):.4f}", f"{np.std(vals):.4f}"]
            for s in seeds:
                for name in split_names:
                    row.append(f"{finals[s][name]['dice']:.4f}" if name in finals[s] else "")
            writer.writerow(row)
    _say(f"wrote {table_path}")
    return 0


def cmd_analyze(args):
    model, cfg, _ = _model_from_checkpoint(args.checkpoint)
    splits = _load_splits(args.data, (SPLIT_VAL, SPLIT_VAL_SHIFTED))
    if SPLIT_VAL_SHIFTED not in splits:
        raise DataMissing(f"analysis needs the {SPLIT_VAL_SHIFTED} split (regenerate with cmd synth)")
    val = [s["image"] for s in splits[SPLIT_VAL]]
    shifted = [s["image"] for s in splits[SPLIT_VAL_SHIFTED]]

    os.makedirs(args.out, exist_ok=True)
    depth = len(cfg.model.encoder_channels)
    divergence = {f"stage{k}": metrics.feature_divergence(model, val, shifted, k) for k in range(1, depth + 1)}

    rng = np.random.default_rng(cfg.train.seed)
    aug = [stains.augment_stain_light(img, rng, cfg.train.aug_scale_range, cfg.train.aug_shift_range) for img in val]
    mean_sigma, mean_v = metrics.mean_matrices(
        model, val, aug, cfg.model.attach_stage, centered=cfg.model.centered_covariance
    )

    with open(os.path.join(args.out, "divergence.json"), "w") as fh:
        json.dump({"divergence": divergence, "attach_stage": cfg.model.attach_stage}, fh, indent=2, sort_keys=True)
    with open(os.path.join(args.out, "divergence.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "sym_kl"])
        for k in range(1, depth + 1):
            writer.writerow([k, f"{divergence[f'stage{k}']:.6g}"])
    attention.export_matrix_csv(mean_sigma, os.path.join(args.out, "covariance_mean.csv"))
    attention.export_matrix_csv(mean_v, os.path.join(args.out, "variance_mean.csv"))
    attention.export_matrix_png(mean_sigma, os.path.join(args.out, "covariance_mean.png"))
    attention.export_matrix_png(mean_v, os.path.join(args.out, "variance_mean.png"))
    _say(f"wrote divergence report and matrix heatmaps to {args.out}")
    for k in range(1, depth + 1):
        _say(f"  stage{k}: sym_kl={divergence[f'stage{k}']:.6g}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="stainlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic dataset splits")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one variant (optionally over seeds)")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default=None, help="comma list, e.g. 0,1,2")
    p.add_argument("--variant", default=None, choices=("BASELINE", "STINV", "STINV_CA"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate checkpoints on dataset splits")
    p.add_argument("--checkpoint", action="append", default=[], help="checkpoint dir (repeatable or comma list)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep one axis and emit a CSV table")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--axis", required=True, choices=ABLATE_AXES)
    p.add_argument("--seeds", default=None, help="comma list, default 0,1,2")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("analyze", help="feature divergence per stage + matrix heatmaps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataMissing, EmptySet) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (NonFiniteValue, DegenerateBatch, DegenerateStain, InsufficientTissue, ShapeMismatch) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except StainlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
