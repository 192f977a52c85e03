"""Command-line front end.

Exit codes: 0 success, 1 runtime fault (non-finite values, divergence),
2 usage or configuration error.

Environment:
    MEGPHONE_THREADS        cap on BLAS/OpenMP threads
    MEGPHONE_DETERMINISTIC  when "1", run single-threaded unless
                            MEGPHONE_THREADS says otherwise
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import yaml

from . import __version__, io, models
from .config import ExperimentConfig, expand_sweep, load_config, save_config
from .data import Dataset, class_histogram, format_histogram, generate_synthetic
from .errors import (
    ConfigurationError,
    DimensionError,
    InputError,
    LoadError,
    NumericFault,
    PairingError,
    ParseError,
    TrainingDiverged,
    UsageError,
    VocabularyError,
)
from .metrics import confusion, f1_macro, per_class_report, write_report
from .saliency import (
    class_saliency,
    cross_split_similarity,
    hcluster,
    render_clustermap,
    row_minmax,
    summarize_similarity,
    write_matrix_csv,
    write_tree_csv,
)
from .sampling import EVAL_SEED
from .training import TrainConfig, evaluate_split, train

log = logging.getLogger("megphone")

USAGE_ERRORS = (
    UsageError,
    ConfigurationError,
    InputError,
    LoadError,
    PairingError,
    ParseError,
    VocabularyError,
    DimensionError,
    FileNotFoundError,
)

CHECKPOINT_FILE = "model.ckpt"
LOG_FILE = "train_log.csv"
COMMAND_FILE = "command.yaml"


def thread_limit() -> Optional[int]:
    threads = os.environ.get("MEGPHONE_THREADS")
    if threads:
        try:
            n = int(threads)
        except ValueError:
            raise ConfigurationError(f"MEGPHONE_THREADS must be an integer, got {threads!r}") from None
        if n < 1:
            raise ConfigurationError("MEGPHONE_THREADS must be >= 1")
        return n
    if os.environ.get("MEGPHONE_DETERMINISTIC") == "1":
        return 1
    return None


def _thread_context():
    n = thread_limit()
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _write_provenance(out: Path, args: argparse.Namespace) -> None:
    record = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    (out / COMMAND_FILE).write_text(yaml.safe_dump(record, sort_keys=True))


def _dataset_from_config(cfg: ExperimentConfig) -> Dataset:
    if cfg.data.path is not None:
        return io.load_dataset(cfg.data.path)
    s = cfg.data.synthetic
    return generate_synthetic(s.n_per_class, s.snr, s.seed, n_classes=s.n_classes, eval_per_class=s.eval_per_class, drift=s.drift)


def _resolve_dataset(args) -> Dataset:
    if args.data:
        return io.load_dataset(args.data)
    if args.config:
        return _dataset_from_config(load_config(args.config))
    raise UsageError("pass --data DIR or --config FILE to locate the dataset")


def _load_checkpoint(path) -> models.PhonemeClassifier:
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return models.load(path)


# -- commands -------------------------------------------------------------------------------


def cmd_generate(args) -> int:
    if args.per_class < 1:
        raise UsageError("--per-class must be >= 1")
    if not 1 <= args.classes <= 39:
        raise UsageError("--classes must lie in [1, 39]")
    if not args.snr > 0:
        raise UsageError("--snr must be > 0")
    ds = generate_synthetic(
        args.per_class, args.snr, args.seed, n_classes=args.classes, eval_per_class=args.eval_per_class, drift=args.drift
    )
    out = Path(args.out)
    io.write_native(ds, out)
    _write_provenance(out, args)
    for name, split in ds.splits.items():
        print(f"[{name}] {len(split)} windows")
    print(format_histogram(class_histogram(ds["train"]), ds.inventory))
    return 0


def run_training(cfg: ExperimentConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out)
    dataset = _dataset_from_config(cfg).standardized()
    model = models.build(cfg.model, seed=cfg.train.seed)
    try:
        model, train_log = train(model, dataset, cfg.train)
    except TrainingDiverged as exc:
        if exc.model is not None:
            models.save(exc.model, out / CHECKPOINT_FILE)
        if exc.log is not None:
            exc.log.write_csv(out / LOG_FILE)
        raise
    models.save(model, out / CHECKPOINT_FILE)
    train_log.write_csv(out / LOG_FILE)
    best = train_log.best_epoch
    print(f"best epoch {best}: val_f1 {train_log.records[best - 1].val_f1:.4f}")
    print(f"wrote {out / CHECKPOINT_FILE} and {out / LOG_FILE}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.out:
        cfg.output_dir = str(args.out)
    return run_training(cfg, Path(cfg.output_dir))


def cmd_evaluate(args) -> int:
    model = _load_checkpoint(args.checkpoint)
    ds = _resolve_dataset(args).standardized()
    split = ds[args.split]
    true, pred = evaluate_split(model, split, args.grouped, args.group_size, EVAL_SEED)
    n_classes = model.spec.n_classes
    report = per_class_report(confusion(true, pred, n_classes))
    mode = "grouped" if args.grouped else "ungrouped"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"report_{args.split}_{mode}.csv"
    write_report(path, report, ds.inventory.symbols[:n_classes])
    _write_provenance(out, args)
    print(f"{args.split} ({mode}, n={len(true)}): f1_macro {f1_macro(true, pred, n_classes):.4f}")
    print(f"wrote {path}")
    return 0


def cmd_saliency(args) -> int:
    model = _load_checkpoint(args.checkpoint)
    ds = _resolve_dataset(args).standardized()
    symbols = list(ds.inventory.symbols[: model.spec.n_classes])
    raw = class_saliency(model, ds[args.split], symbols, args.max_per_class, args.seed)
    norm = row_minmax(raw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(out / "saliency_raw.csv", raw.values, raw.layer_names, symbols)
    write_matrix_csv(out / "saliency_normalized.csv", norm.values, norm.layer_names, symbols)
    filled = np.nan_to_num(norm.values, nan=0.0)
    row_tree, col_tree = hcluster(filled, 0), hcluster(filled, 1)
    write_tree_csv(out / "tree_layers.csv", row_tree, norm.layer_names)
    write_tree_csv(out / "tree_phonemes.csv", col_tree, symbols)
    render_clustermap(out / "clustermap.svg", norm, row_tree, col_tree, title=f"saliency ({args.split})")
    _write_provenance(out, args)
    missing = [s for s, c in zip(symbols, raw.counts) if c == 0]
    print(f"{len(raw.layer_names)} layers x {len(symbols)} classes; missing classes: {missing or 'none'}")
    print(f"wrote {out}")
    return 0


def cmd_similarity(args) -> int:
    model = _load_checkpoint(args.checkpoint)
    ds = _resolve_dataset(args).standardized()
    symbols = list(ds.inventory.symbols[: model.spec.n_classes])
    sims = cross_split_similarity(model, ds[args.split_a], ds[args.split_b], symbols, max_per_class=args.max_per_class, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for metric, sim in sims.items():
        write_matrix_csv(out / f"similarity_{metric}.csv", sim.values, sim.layer_names, symbols)
        lines.append(summarize_similarity(sim).line())
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    _write_provenance(out, args)
    print("\n".join(lines))
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    if args.out:
        cfg.output_dir = str(args.out)
    cells = expand_sweep(cfg)
    for name, cell in cells:
        out = Path(cell.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_config(cell, out)
        print(f"{name}: {out}")
        if not args.dry_run:
            run_training(cell, out)
    return 0


# -- parser ---------------------------------------------------------------------------------


def _data_args(p):
    p.add_argument("--data", help="native dataset directory")
    p.add_argument("--config", help="experiment config whose data section is used")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="megphone", description="MEG phoneme decoding toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset in native format")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=39)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--eval-per-class", type=int, default=None)
    p.add_argument("--snr", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--drift", type=float, default=0.5)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("config")
    p.add_argument("--out", default=None, help="override output_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    _data_args(p)
    p.add_argument("--split", default="test")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--grouped", dest="grouped", action="store_true")
    mode.add_argument("--ungrouped", dest="grouped", action="store_false")
    p.add_argument("--group-size", type=int, default=100)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_evaluate, grouped=False)

    p = sub.add_parser("saliency", help="layer-by-phoneme saliency and clustermap")
    p.add_argument("--checkpoint", required=True)
    _data_args(p)
    p.add_argument("--split", default="validation")
    p.add_argument("--max-per-class", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("similarity", help="cross-split saliency correlation")
    p.add_argument("--checkpoint", required=True)
    _data_args(p)
    p.add_argument("--split-a", default="validation")
    p.add_argument("--split-b", default="test")
    p.add_argument("--max-per-class", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_similarity)

    p = sub.add_parser("sweep", help="expand a config's sweep axes into cells and train each")
    p.add_argument("config")
    p.add_argument("--out", default=None)
    p.add_argument("--dry-run", action="store_true", help="only write the per-cell configs")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with _thread_context():
            return args.func(args)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericFault as exc:
        print(f"runtime fault: {exc}", file=sys.stderr)
        return 1
    except MemoryError:
        print("runtime fault: out of memory", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
