"""``ggnn-iml`` command line: synth, train, eval, predict and erf subcommands.

Exit codes: 0 success, 1 usage error, 2 I/O or parse failure, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, apply_pairs, parse_pairs, parse_run_config
from .data import (
    DatasetFormatError, list_images, make_samples, read_dataset, read_index, read_ppm, write_dataset, write_gray,
    write_pgm,
)
from .train import (
    CheckpointError, evaluate_model, load_checkpoint, model_from_checkpoint, predict, train_loop,
)
from .vssd import compute_erf

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _override(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ggnn-iml", description="Toy image-manipulation localization workflow.")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded numerics (BLAS threads pinned to 1)")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic forgery dataset")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--count", type=int, default=64)
    s.add_argument("--fake-ratio", type=float, default=0.5)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train a model and write its best checkpoint")
    t.add_argument("--config", type=Path, help="key = value run configuration")
    t.add_argument("--data", type=Path)
    t.add_argument("--val", type=Path)
    t.add_argument("--out", required=True, type=Path, help="checkpoint path")
    t.add_argument("--log", type=Path, help="epoch CSV (default: <out>.log.csv)")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--set", dest="overrides", action="append", type=_override, default=[], metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True, type=Path)
    e.add_argument("--data", required=True, type=Path)
    e.add_argument("--report", required=True, type=Path)

    q = sub.add_parser("predict", help="binarized mask for one image")
    q.add_argument("--ckpt", required=True, type=Path)
    q.add_argument("--image", required=True, type=Path)
    q.add_argument("--out", required=True, type=Path)

    r = sub.add_parser("erf", help="effective receptive field of the RGB backbone")
    r.add_argument("--ckpt", required=True, type=Path)
    r.add_argument("--probes", required=True, type=Path, help="directory of .ppm probe images")
    r.add_argument("--out", required=True, type=Path)
    return p


def cmd_synth(a) -> int:
    if a.count < 0 or a.size <= 0 or not 0.0 <= a.fake_ratio <= 1.0:
        raise UsageError("synth: need count >= 0, size > 0 and 0 <= fake-ratio <= 1")
    samples = make_samples(a.count, a.size, a.fake_ratio, a.seed)
    write_dataset(samples, a.out)
    print(f"wrote {len(samples)} samples to {a.out}")
    return EXIT_OK


def _run_config(a) -> RunConfig:
    run = parse_run_config(a.config.read_text()) if a.config else parse_run_config("")
    flags = {}
    for k, v in a.overrides:
        flags.update(parse_pairs(f"{k} = {v}"))
    if a.seed is not None:
        flags["seed"] = a.seed
    if a.epochs is not None:
        flags["epochs"] = a.epochs
    if a.data is not None:
        flags["data"] = str(a.data)
    if a.val is not None:
        flags["val"] = str(a.val)
    return apply_pairs(run, flags)


def cmd_train(a) -> int:
    run = _run_config(a)
    if not run.data or not run.val:
        raise UsageError("train: --data and --val (or config keys data/val) are required")
    train, val = read_dataset(run.data), read_dataset(run.val)
    log_path = a.log or a.out.with_name(a.out.name + ".log.csv")
    res = train_loop(run.train, train, val, log_path=log_path, ckpt_path=a.out)
    last = res.log[-1] if res.log else None
    if last is not None:
        print(f"trained {last.epoch} epochs; best val loss {res.state.best_val:.6g}; checkpoint {a.out}")
    return EXIT_OK


def cmd_eval(a) -> int:
    model, _ = model_from_checkpoint(load_checkpoint(a.ckpt))
    samples = read_dataset(a.data)
    if not samples:
        raise DatasetFormatError(f"{a.data}: dataset is empty")
    ids = [row[0] for row in read_index(a.data).rows]
    report = evaluate_model(model, samples, ids=ids)
    a.report.write_text(report.to_json() + "\n")
    px = "n/a" if report.pixel_f1 is None else f"{report.pixel_f1:.4f}"
    auc = "n/a" if report.image_auc is None else f"{report.image_auc:.4f}"
    print(f"pixel_f1 {px}  image_f1 {report.image_f1:.4f}  image_auc {auc}")
    return EXIT_OK


def cmd_predict(a) -> int:
    model, _ = model_from_checkpoint(load_checkpoint(a.ckpt))
    image = read_ppm(a.image)
    probs, scores = predict(model, image[None])
    write_pgm(a.out, probs[0] >= 0.5)
    print(f"fake score {scores[0]:.4f}; mask written to {a.out}")
    return EXIT_OK


def cmd_erf(a) -> int:
    model, _ = model_from_checkpoint(load_checkpoint(a.ckpt))
    backbone = model.rgb_backbone.astype(np.float64)
    probes = [read_ppm(p) for p in list_images(a.probes)]
    if not probes:
        raise FileNotFoundError(f"{a.probes}: no .ppm probe images")
    erf = compute_erf(lambda x: backbone(x)[-1], probes)
    peak = erf.max()
    scaled = np.zeros_like(erf) if peak <= 0 else erf / peak
    write_gray(a.out, np.round(scaled * 255.0).astype(np.uint8))
    print(f"erf map {erf.shape[0]}x{erf.shape[1]} written to {a.out}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict, "erf": cmd_erf}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(message)s")
        return COMMANDS[a.command](a)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DatasetFormatError, CheckpointError, ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
