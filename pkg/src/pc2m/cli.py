"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import arrayio, train as tr
from .config import ConfigError, RunConfig, load, parse_overrides
from .losses import grad_check
from .spectral import write_pseudo_labels
from .synth import save_dataset, split_indices

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file; flags override it")
    group = p.add_argument_group("run configuration")
    for f in fields(RunConfig):
        group.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, metavar="V")


def _config(args) -> RunConfig:
    try:
        base = load(args.config) if args.config else RunConfig()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    pairs = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return parse_overrides(pairs, base)


def _pseudo_for_training(cfg: RunConfig, data, out: Path | None):
    if cfg.mode == "weak":
        return None
    train_idx, _ = split_indices(len(data), cfg.data_seed, cfg.holdout)
    clusters, mapped, f1 = tr.make_pseudo_labels(cfg, data, train_idx)
    if out is not None:
        write_pseudo_labels(out / "pseudo_labels.txt", [data[i].index for i in train_idx], clusters)
    logging.info("pseudo labels: micro-F1 %.3f macro-F1 %.3f", *f1)
    return mapped


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    data = tr.gen_dataset(tr.dataset_spec(cfg))
    save_dataset(args.out, data)
    print(f"wrote {len(data)} images to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    data = tr.load_data(cfg)
    pseudo = _pseudo_for_training(cfg, data, out)
    result = tr.train(cfg, data, pseudo, step_log=True)
    tr.save_outputs(out, result)
    ev = tr.evaluate(result.params, [data[i] for i in result.val_idx], result.encoder)
    gt = [data[i].labels for i in result.train_idx]
    tr.write_report_csv(out / "report.csv", ev, tr.f1_scores(result.labels, gt))
    last = result.epochs[-1]
    print(f"mIoU {last.miou:.4f}  H(a) {last.area_entropy:.4f}  JS(a*, a) {last.js_star:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    try:
        params, enc, _ = tr.load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read checkpoint: {exc}") from exc
    if enc.classes != cfg.class_count:
        raise ConfigError(f"checkpoint has {enc.classes} classes, configuration has {cfg.class_count}")
    data = tr.load_data(cfg)
    if args.split == "all":
        subset = data
    else:
        train_idx, val_idx = split_indices(len(data), cfg.data_seed, cfg.holdout)
        subset = [data[i] for i in (val_idx if args.split == "heldout" else train_idx)]
    try:
        ev = tr.evaluate(params, subset, enc, include_background=not args.no_background)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tr.write_report_csv(out / "report.csv", ev)
    print(f"mIoU {ev['miou']:.4f}")
    return EXIT_OK


def cmd_pseudo_labels(args) -> int:
    cfg = _config(args)
    data = tr.load_data(cfg)
    clusters, _, f1 = tr.make_pseudo_labels(cfg, data)
    write_pseudo_labels(args.out, [x.index for x in data], clusters)
    print(f"micro-F1 {f1[0]:.4f}  macro-F1 {f1[1]:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    try:
        values = [float(v) for v in args.values.split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad sweep values {args.values!r}") from exc
    try:
        rows = tr.sweep(cfg, args.parameter, values)
    except ValueError as exc:
        if "sweep" in str(exc):
            raise ConfigError(str(exc)) from exc
        raise
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tr.write_sweep_csv(out / "sweep.csv", rows)
    for r in rows:
        print(f"{r.parameter}={r.value:g}  mIoU {r.miou:.4f}  H(a) {r.area_entropy:.4f}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    cfg = _config(args)
    data = tr.load_data(cfg.replace(image_count=max(2, min(cfg.image_count, 8))))
    loss_fn, params = tr.frozen_objective(cfg, data)
    report = grad_check(loss_fn, params, h=args.h, tolerance=args.tolerance, max_entries=args.entries)
    for name, err in report.errors.items():
        print(f"{name:16s} {err:.3e}")
    print(f"max relative error {report.max_rel_error:.3e} ({report.worst}): {'ok' if report.passed else 'FAILED'}")
    return EXIT_OK if report.passed else EXIT_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pc2m", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and save the synthetic dataset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train and write checkpoint, epochs.csv, report.csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("heldout", "train", "all"), default="heldout")
    p.add_argument("--no-background", action="store_true", help="leave class 0 out of the mean")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pseudo-labels", help="unsupervised image-level labels")
    p.add_argument("--out", required=True, help="output text file")
    p.set_defaults(func=cmd_pseudo_labels)

    p = sub.add_parser("sweep", help="train once per value of gamma or beta")
    p.add_argument("--parameter", choices=("gamma", "beta"), required=True)
    p.add_argument("--values", required=True, help="comma separated")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("grad-check", help="finite-difference check of the full objective")
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--entries", type=int, default=20, help="entries checked per parameter")
    p.set_defaults(func=cmd_grad_check)

    for name, sp in sub.choices.items():
        _add_config_flags(sp)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except tr.NumericalAbort as exc:
        out = getattr(args, "out", None)
        if out and Path(out).suffix == "":
            Path(out).mkdir(parents=True, exist_ok=True)
            arrays = {k: np.asarray(v, dtype=np.float64) for k, v in exc.dump.items()}
            arrayio.save(Path(out) / "abort_dump.bin", arrays)
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
