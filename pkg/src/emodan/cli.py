"""Command-line entry points: synth, train, eval, explain."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import __version__
from .core import Scheme, TrainConfig, ValidationError, class_names, read_kv_file, write_kv_file
from .data import (
    ArrayDataset,
    compute_accuracy,
    compute_norm_stats,
    generate_synthetic_corpus,
    load_arrays,
    load_manifest,
    write_confusion,
)
from .explain import DEFAULT_EPSILON, LAYERS, analyze, render_overlay, write_report
from .geometry import GeometryError
from .network import EmotionalDAN, StructuralError, load_checkpoint, predict, save_checkpoint
from .training import TrainingDivergence, train_model, write_log

log = logging.getLogger("emodan")

RUN_CONFIG = "run_config.txt"
_TRAIN_FIELDS = [f.name for f in dataclasses.fields(TrainConfig)]
# flag spelling for config fields where the field name reads poorly on the command line
_FLAG_NAMES = {"emotion_scheme": "scheme", "max_epochs": "epochs", "dropout_p": "dropout"}


class UsageError(Exception):
    pass


def _flag(field: str) -> str:
    return _FLAG_NAMES.get(field, field)


def _add_train_flags(p: argparse.ArgumentParser):
    defaults = TrainConfig()
    for f in dataclasses.fields(TrainConfig):
        name = _flag(f.name)
        default = getattr(defaults, f.name)
        if isinstance(default, Scheme):
            default = default.value
        kw = {"dest": f.name, "default": None, "help": f"default: {default}"}
        if f.name == "emotion_scheme":
            kw["choices"] = [s.value for s in Scheme]
        # everything arrives as a string and is coerced by TrainConfig.from_dict
        p.add_argument("--" + name.replace("_", "-"), **kw)


def _resolve_train_config(args) -> TrainConfig:
    """defaults < --config file < explicit flags"""
    values: dict = {}
    if args.config:
        for key, value in read_kv_file(args.config).items():
            field = next((f for f in _TRAIN_FIELDS if key in (f, _flag(f))), None)
            if field is None:
                raise UsageError(f"{args.config}: unknown key {key!r}")
            values[field] = value
    for f in _TRAIN_FIELDS:
        v = getattr(args, f, None)
        if v is not None:
            values[f] = v
    try:
        return TrainConfig.from_dict(values)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def _write_run_config(out: Path, subcommand: str, values: dict) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / RUN_CONFIG
    write_kv_file(path, {"subcommand": subcommand, "version": __version__, **values})
    return path


def _seed_everything(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    out = Path(args.out)
    values = {"n": args.n, "seed": args.seed, "scheme": args.scheme, "val_fraction": args.val_fraction,
              "test_fraction": args.test_fraction, "size": args.size, "dataset": args.dataset}
    _write_run_config(out, "synth", values)
    m = generate_synthetic_corpus(args.n, args.seed, args.scheme, out, args.val_fraction, args.test_fraction,
                                  args.dataset, args.size)
    print(f"wrote {len(m)} samples to {out / 'manifest.csv'}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_train_config(args)
    out = Path(args.out)
    _write_run_config(out, "train", {"manifest": args.manifest, **cfg.to_dict()})
    _seed_everything(cfg.seed)
    manifest = load_manifest(args.manifest)
    stats = compute_norm_stats(manifest, cfg.image_size)
    train = load_arrays(manifest, "train", cfg.emotion_scheme, cfg.image_size, stats, cfg.drop_contempt)
    if not len(train):
        raise ValidationError(f"{args.manifest}: no usable training samples")
    val = load_arrays(manifest, "val", cfg.emotion_scheme, cfg.image_size, stats, cfg.drop_contempt)
    if not len(val):
        log.warning("no validation split; validating on the training set")
        val = train
    model = EmotionalDAN.from_config(cfg)
    model, rows = train_model(model, train, val, cfg, log_path=out / "train_log.csv")
    write_log(out / "train_log.csv", rows)
    save_checkpoint(out / "checkpoint.npz", model, cfg, stats)
    print(f"trained {cfg.stages} stage(s) on {len(train)} samples; checkpoint at {out / 'checkpoint.npz'}")
    return 0


def _load_eval_data(args, cfg: TrainConfig, stats) -> ArrayDataset:
    manifest = load_manifest(args.manifest)
    split = None if args.split == "all" else args.split
    ds = load_arrays(manifest, split, cfg.emotion_scheme, cfg.image_size, stats, cfg.drop_contempt)
    if not len(ds):
        raise ValidationError(f"{args.manifest}: no samples in split {args.split!r} for the {cfg.emotion_scheme.value} scheme")
    return ds


def _check_scheme(args, cfg: TrainConfig):
    if args.scheme is not None and Scheme(args.scheme) is not cfg.emotion_scheme:
        raise ValidationError(
            f"checkpoint was trained on the {cfg.emotion_scheme.value}-class scheme, {args.scheme} requested"
        )


def cmd_eval(args) -> int:
    model, cfg, stats = load_checkpoint(args.checkpoint)
    _check_scheme(args, cfg)
    out = Path(args.out)
    _write_run_config(out, "eval", {"checkpoint": args.checkpoint, "manifest": args.manifest, "split": args.split,
                                    "scheme": cfg.emotion_scheme.value})
    ds = _load_eval_data(args, cfg, stats)
    _, probs = predict(model, ds.images)
    preds = probs.argmax(1)
    names = class_names(cfg.emotion_scheme)
    tags = np.asarray(ds.tags)
    with open(out / "accuracy.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "n", "accuracy"])
        for tag in sorted(set(ds.tags)):
            sel = tags == tag
            acc, cm = compute_accuracy(preds[sel], ds.labels[sel], len(names))
            w.writerow([tag, int(sel.sum()), f"{acc:.6f}"])
            write_confusion(out / f"confusion_{tag}.csv", cm, names)
            print(f"{tag}: accuracy {acc:.4f} over {int(sel.sum())} samples")
    return 0


def cmd_explain(args) -> int:
    model, cfg, stats = load_checkpoint(args.checkpoint)
    if cfg.emotion_scheme is not Scheme.SEVEN:
        raise ValidationError("explain needs a seven-class checkpoint; action units are defined per basic emotion")
    out = Path(args.out)
    _write_run_config(out, "explain", {"checkpoint": args.checkpoint, "manifest": args.manifest, "split": args.split,
                                       "epsilon": args.epsilon, "stage": args.stage or model.n_stages,
                                       "per_image_reference": args.per_image_reference})
    ds = _load_eval_data(args, cfg, stats)
    results = analyze(model, ds.images, ds.landmarks, ds.labels, args.epsilon, LAYERS, args.stage,
                      args.per_image_reference)
    write_report(out / "overlap.csv", results)
    for r in results:
        if r.mean_map is None:
            log.warning("%s: no frontal samples, no overlay written", r.emotion)
            continue
        ref = ds.landmarks[ds.labels == r.mean_map.class_id].mean(0)
        background = ds.images[ds.labels == r.mean_map.class_id].mean(0)
        render_overlay(background, r.mean_map, ref, out / f"overlay_{r.emotion}_{r.layer}.png", highlight=r.topk)
        print(f"{r.emotion:10s} {r.layer}: overlap {r.overlap:.3f} (k={r.k}, n={r.n_images})")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="emodan", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a labelled synthetic face corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--scheme", choices=[x.value for x in Scheme], default="seven")
    s.add_argument("--val-fraction", type=float, default=0.0)
    s.add_argument("--test-fraction", type=float, default=0.0)
    s.add_argument("--size", type=int, default=224)
    s.add_argument("--dataset", default="synthetic", help="dataset tag written to every row")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="sequential stage training")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="flat 'key = value' file; explicit flags take precedence")
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "accuracy and confusion per dataset tag"),
                                 ("explain", cmd_explain, "Grad-CAM maps and action-unit overlap")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--manifest", required=True)
        e.add_argument("--out", required=True)
        e.add_argument("--split", default="all", choices=["all", "train", "val", "test"])
        e.set_defaults(func=func)
        if name == "eval":
            e.add_argument("--scheme", choices=[x.value for x in Scheme], help="expected scheme of the checkpoint")
        else:
            e.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON, help="frontal threshold in pixels")
            e.add_argument("--stage", type=int, default=None, help="stage to explain (default: last)")
            e.add_argument("--per-image-reference", action="store_true",
                           help="sample each map at its own image's landmarks instead of the mean shape")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (ValidationError, GeometryError, StructuralError, TrainingDivergence, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
