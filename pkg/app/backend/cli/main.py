"""``dclnet`` command line.

Exit codes: 0 ok, 1 failing check, 2 unreadable or missing input files,
3 unknown dataset preset, 4 invalid config / arch / plan, 5 training diverged,
6 checkpoint architecture does not fit the data.
"""

import argparse
import json
import logging
import os
import sys
from typing import Optional, Sequence

from pydantic import ValidationError

from app.backend.core.arch import NAMED_ARCHS, VARIANTS, parse_arch, resolve_arch
from app.backend.core.config import force_deterministic, get_settings
from app.backend.core.errors import (
    ArchDataMismatch,
    BadMagic,
    CorruptFile,
    DclError,
    DimMismatch,
    Divergence,
    ParseError,
    ShapeChainError,
    TruncatedFile,
    UnknownLayer,
    UnknownPreset,
)
from app.backend.core.network import grad_check
from app.backend.core.schemas import DatasetConfig, RunConfig, TrainConfig
from app.backend.services.analysis import compare_network, format_report, report_csv
from app.backend.services.checkpoint import read_checkpoint, restore_network
from app.backend.services.responses import response_stats, responses_csv
from app.backend.services.trainer import aggregate, evaluate, oracle_train_eval, run_training
from app.data_processing.synthesis.composer import (
    DigitSource,
    build_split,
    class_histogram,
    load_dataset,
    write_dataset,
)
from app.data_processing.synthesis.presets import preset

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_BAD_FILE = 2
EXIT_UNKNOWN_PRESET = 3
EXIT_BAD_CONFIG = 4
EXIT_DIVERGED = 5
EXIT_MISMATCH = 6

GRADCHECK_SUITE = ("lenet-tiny", "DCL-A2-tiny", "DCL-A3S-tiny", "DCL-B2-tiny")   # tiny-сети: лимит 10k параметров
GRADCHECK_CLASSES = 10


def _out(line: str = "") -> None:
    sys.stdout.write(line + "\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _shape(text: str) -> tuple[int, ...]:
    dims = tuple(_int_list(text))
    if len(dims) not in (1, 3):
        raise argparse.ArgumentTypeError(f"shape must be C,H,W or K, got {text!r}")
    return dims


def _read_json(path: str) -> dict:
    if not os.path.exists(path):
        raise FileNotFoundError(f"config not found: {path}")
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def _classes_from_arch(text: str, default: int = 100) -> int:
    last = text.rstrip(".").split("-")[-1]
    return int(last[2:]) if last.startswith("FC") and last[2:].isdigit() else default


# --- commands ---

def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = preset(args.preset) if args.preset else DatasetConfig.model_validate(_read_json(args.config))
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.counts is not None:
        if len(args.counts) != 2:
            raise argparse.ArgumentTypeError("--counts takes TRAIN,TEST")
        updates["counts"] = tuple(args.counts)
    if updates:
        cfg = cfg.model_copy(update=updates)
    out_dir = args.out or os.path.join(get_settings().DATASETS_DIR, cfg.id)
    mnist_dir = args.mnist_dir or get_settings().MNIST_DIR

    for code, split in enumerate(("train", "test")):
        data = build_split(cfg, DigitSource.from_mnist(mnist_dir, split), cfg.counts[code])
        write_dataset(out_dir, cfg, split, data)
        hist = class_histogram(data.labels, cfg.num_classes)
        _out(f"{split}: {len(data.labels)} images, {cfg.num_classes} classes, "
             f"per-class count min {hist.min()} max {hist.max()} mean {hist.mean():.1f}, "
             f"{data.regenerated} empty draws regenerated")
    _out(f"written to {out_dir}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    run = RunConfig.model_validate(_read_json(args.config))
    if args.deterministic:
        run = run.model_copy(update={"train": run.train.model_copy(update={"deterministic": True})})
    results = run_training(run, args.repeats)
    errors = []
    for r, result in enumerate(results):
        final = result.final("test")
        errors.append(final.error_rate)
        _out(f"run {r}: seed {run.train.seed + r}, final test error {final.error_rate:.4f}, "
             f"test loss {final.loss:.4f}")
    mean, spread = aggregate(errors)
    _out(f"final test error: mean {mean:.4f} std {spread:.4f} over {len(errors)} run(s)")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    checkpoint = read_checkpoint(args.checkpoint)
    test = load_dataset(args.data, args.split)
    meta = checkpoint.metadata
    data_shape = list(test.images.shape[1:])
    if list(meta.get("input_shape", [])) != data_shape or int(meta.get("num_classes", -1)) != test.num_classes:
        raise ArchDataMismatch(
            f"checkpoint expects input {meta.get('input_shape')} with {meta.get('num_classes')} classes, "
            f"data is {data_shape} with {test.num_classes}"
        )

    if args.oracle:
        train = load_dataset(args.data, "train")
        cfg = TrainConfig.model_validate(meta["train"]) if "train" in meta else TrainConfig()
        arch = resolve_arch(args.arch, 10)[0] if args.arch else meta["arch"]
        result = oracle_train_eval(arch, train, test, cfg)
        for k, err in enumerate(result.digit_errors):
            _out(f"digit {k} error_rate {err:.4f}")
        _out(f"oracle error_rate {result.error_rate:.4f}")
        return EXIT_OK

    net = restore_network(checkpoint)
    record = evaluate(net, test, epoch=int(meta.get("epoch", 0)))
    _out(f"error_rate {record.error_rate:.4f} loss {record.loss:.4f} ({len(test)} images)")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    names = [args.arch] if args.arch else list(GRADCHECK_SUITE)
    passed = True
    _out(f"{'arch':<28} {'tensor':<22} {'max_rel_error':>14}  result")
    for name in names:
        text, native = resolve_arch(name, args.classes)
        shape = native or args.input_shape
        spec = parse_arch(text, shape, args.classes)
        report = grad_check(spec, seed=args.seed)
        for entry in report.entries:
            _out(f"{name:<28} {entry.name:<22} {entry.max_rel_error:>14.3e}  {'pass' if entry.passed else 'FAIL'}")
        passed &= report.passed
    _out("all checks passed" if passed else "gradient check FAILED")
    return EXIT_OK if passed else EXIT_CHECK_FAILED


def cmd_analyze(args: argparse.Namespace) -> int:
    text, native = resolve_arch(args.arch, args.classes or 100)
    classes = args.classes or _classes_from_arch(text)
    spec = parse_arch(text, args.input_shape or native or (1, 28, 28), classes)
    report = compare_network(spec, args.plan or "")
    _out(format_report(report))
    _out(f"total parameters {report.total.params_original:,} -> {report.total.params_dcl:,} "
         f"({100 * report.total.savings_fraction:.2f}% fewer)")
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as f:
            f.write(report_csv(report))
        logger.info("cost report written to %s", args.csv)
    return EXIT_CHECK_FAILED if report.violations else EXIT_OK


def cmd_inspect_responses(args: argparse.Namespace) -> int:
    net = restore_network(read_checkpoint(args.checkpoint))
    data = load_dataset(args.data, args.split)
    if tuple(data.images.shape[1:]) != net.spec.input_shape or data.num_classes != net.spec.num_classes:
        raise ArchDataMismatch("checkpoint architecture does not fit the dataset")
    text = responses_csv(response_stats(net, data, args.filters))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
        _out(f"written to {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_variants(args: argparse.Namespace) -> int:
    for name, (text, shape) in NAMED_ARCHS.items():
        _out(f"{name:<14} {'x'.join(map(str, shape)):<10} {text}")
    for variant in VARIANTS:
        _out(f"{variant:<14} {'1x28x28':<10} {resolve_arch(variant, args.classes)[0]}")
    return EXIT_OK


# --- wiring ---

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--deterministic", action="store_true", help="ordered single-worker reductions")

    parser = argparse.ArgumentParser(prog="dclnet", description="Deep collaborative learning experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="synthesize a multi-digit dataset")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--preset", help="II-01..II-05 or III-01..III-10")
    source.add_argument("--config", help="DatasetConfig JSON")
    p.add_argument("--mnist-dir", help="directory with the MNIST IDX files (default: MNIST_DIR)")
    p.add_argument("--out", help="output directory (default: DATASETS_DIR/<id>)")
    p.add_argument("--seed", type=int)
    p.add_argument("--counts", type=_int_list, help="TRAIN,TEST sample counts")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train from a RunConfig JSON")
    p.add_argument("--config", required=True)
    p.add_argument("--repeats", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="directory written by gen-data")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--oracle", action="store_true", help="train and score per-digit classifiers instead")
    p.add_argument("--arch", help="base architecture for --oracle (default: the checkpoint's)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--arch", help=f"arch name or string (default suite: {', '.join(GRADCHECK_SUITE)})")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=GRADCHECK_CLASSES)
    p.add_argument("--input-shape", type=_shape, default=(1, 16, 16))
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("analyze", parents=[common], help="parameter / FLOP accounting")
    p.add_argument("--arch", required=True, help="arch name or string")
    p.add_argument("--plan", default="", help="e.g. fc6=DCL2@1024 or A=DCL2@100")
    p.add_argument("--classes", type=int)
    p.add_argument("--input-shape", type=_shape)
    p.add_argument("--csv", help="also write the report as CSV")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("inspect-responses", parents=[common], help="grouped DCL responses as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--filters", type=_int_list, required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_inspect_responses)

    p = sub.add_parser("variants", parents=[common], help="list named architectures")
    p.add_argument("--classes", type=int, default=100)
    p.set_defaults(func=cmd_variants)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.deterministic:
        force_deterministic()
    logging.basicConfig(
        level=get_settings().DCL_LOG_LEVEL.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except UnknownPreset as e:
        logger.error("%s", e)
        return EXIT_UNKNOWN_PRESET
    except (BadMagic, TruncatedFile, CorruptFile, DimMismatch, FileNotFoundError) as e:
        logger.error("%s", e)
        return EXIT_BAD_FILE
    except (ValidationError, json.JSONDecodeError, ParseError, UnknownLayer, argparse.ArgumentTypeError) as e:
        logger.error("invalid input: %s", e)
        return EXIT_BAD_CONFIG
    except Divergence as e:
        logger.error("%s; last good checkpoint: %s", e, e.checkpoint)
        return EXIT_DIVERGED
    except (ArchDataMismatch, ShapeChainError) as e:
        logger.error("%s", e)
        return EXIT_MISMATCH
    except DclError as e:
        logger.error("%s", e)
        return EXIT_CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())
