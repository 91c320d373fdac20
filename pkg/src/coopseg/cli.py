"""``coopseg`` command line: generate, train, eval, gradcheck.

Exit codes: 0 success, 2 configuration, 3 missing data, 4 checkpoint
incompatibility, 5 gradient check failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT, EXIT_GRADCHECK = 0, 2, 3, 4, 5

logger = logging.getLogger("coopseg")


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _thread_limit():
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(os.environ.get("COOPSEG_THREADS", "1")))


def load_config(args) -> ExperimentConfig:
    """Config file (or defaults) with command-line overrides applied, validated."""
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if getattr(args, "mode", None) is not None:
        cfg.train.mode = args.mode
    if getattr(args, "random_labels", None) is not None:
        cfg.train.random_label_fraction = args.random_labels
    if getattr(args, "rounds", None) is not None:
        cfg.train.rounds = args.rounds
    if getattr(args, "seed", None) is not None:
        if args.command == "generate":
            cfg.data.seed = args.seed
        else:
            cfg.train.seed = args.seed
    cfg.validate()
    return cfg


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_generate(args) -> int:
    from .data import generate_dataset, save_dataset

    cfg = load_config(args)
    out = Path(args.out or cfg.paths.dataset)
    dataset = generate_dataset(cfg.data)
    save_dataset(dataset, out)
    _write_json(out / "manifest.json", {"config": cfg.to_dict(), "seed": cfg.data.seed,
                                        "n_train": cfg.data.n_train, "n_val": cfg.data.n_val})
    print(f"wrote {len(dataset)} samples to {out}")
    return EXIT_OK


def _load_splits(cfg: ExperimentConfig, directory: Path):
    from .data import DatasetFormatError, load_dataset

    if not (directory / "labels.csv").is_file():
        raise CommandError(f"dataset not found at {directory} (run `coopseg generate` first)", EXIT_DATA)
    try:
        dataset = load_dataset(directory)
    except DatasetFormatError as exc:
        raise CommandError(str(exc), EXIT_DATA) from exc
    n_train = int(dataset.meta.get("n_train", cfg.data.n_train))
    train, val = dataset.split(n_train)
    if len(train) == 0 or len(val) == 0:
        raise CommandError(f"{directory}: split at {n_train} leaves an empty train or validation set", EXIT_DATA)
    if train.images.shape[-1] != cfg.arch.input_hw + 8:
        raise CommandError(
            f"{directory}: stored images are {train.images.shape[-1]} px, config expects {cfg.arch.input_hw + 8}",
            EXIT_CONFIG)
    return train, val


def cmd_train(args) -> int:
    from .training import train

    cfg = load_config(args)
    dataset_dir = Path(args.dataset or cfg.paths.dataset)
    train_set, val_set = _load_splits(cfg, dataset_dir)
    out = Path(args.out or cfg.paths.output)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    p = cfg.train.random_label_fraction
    _write_json(out / "manifest.json", {
        "config": cfg.to_dict(),
        "dataset": str(dataset_dir),
        "mode": cfg.train.mode,
        "seed": cfg.train.seed,
        "random_label_fraction": p,
        "corrupted_samples": int(np.floor(p * len(train_set) + 0.5)),
        "n_train": len(train_set),
        "n_val": len(val_set),
    })
    _, report = train(cfg.train, train_set, val_set, cfg.arch, out_dir=out)
    final = report.final
    print(f"finished {cfg.train.rounds} rounds in {report.wall_clock:.1f}s: "
          f"miou={final['miou']:.4f} top1={final['top1']:.4f} top2={final['top2']:.4f} binacc={final['binacc']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import CheckpointError, load_model
    from .data import CLASS_NAMES
    from .training import evaluate

    cfg = load_config(args)
    try:
        model, tensors = load_model(args.checkpoint)
    except CheckpointError as exc:
        raise CommandError(str(exc), EXIT_CHECKPOINT) from exc
    if args.config and asdict(model.cfg) != asdict(cfg.arch):
        raise CommandError(f"{args.checkpoint}: architecture differs from {args.config}", EXIT_CHECKPOINT)
    cfg.arch = model.cfg
    _, val_set = _load_splits(cfg, Path(args.dataset or cfg.paths.dataset))
    res = evaluate(model, val_set)
    iou = res.confusion.iou_per_class()
    lines = ["class            iou"]
    for k, v in enumerate(iou):
        name = CLASS_NAMES[k] if k < len(CLASS_NAMES) else f"class_{k}"
        lines.append(f"{name:<14} {'  n/a' if np.isnan(v) else f'{v:.4f}'}")
    lines.append(f"miou={res.miou!r} top1={res.top1!r} top2={res.top2!r} binacc={res.binacc!r}")
    print("\n".join(lines))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["miou", "top1", "top2", "binacc"] + [f"iou_{k}" for k in range(len(iou))])
            writer.writerow([repr(res.miou), repr(res.top1), repr(res.top2), repr(res.binacc)]
                            + ["" if np.isnan(v) else repr(float(v)) for v in iou])
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verification import check_model, check_ops, format_table

    results = check_ops(seed=args.seed or 0)
    if not args.ops_only:
        results.append(check_model(seed=args.seed or 0))
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coopseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment JSON file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("generate", help="render the synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="cooperative training run")
    common(p)
    p.add_argument("--mode", choices=("joint", "seg_only", "clf_only"))
    p.add_argument("--random-labels", type=float, dest="random_labels", metavar="P")
    p.add_argument("--rounds", type=int)
    p.add_argument("--dataset", help="dataset directory (overrides paths.dataset)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the validation split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="dataset directory (overrides paths.dataset)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--seed", type=int)
    p.add_argument("--ops-only", action="store_true", help="skip the full-model check")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except ConfigError as exc:
        fields = f" [fields: {', '.join(exc.fields)}]" if exc.fields else ""
        print(f"config error: {exc}{fields}", file=sys.stderr)
        return EXIT_CONFIG
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
