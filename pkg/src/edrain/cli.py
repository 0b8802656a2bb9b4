"""Command-line interface: ``edrain <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .bench import benchmark_latency, filter_timings, filtering_scaling, format_report
from .checkpoint import load_checkpoint
from .config import VARIANTS, TrainConfig, parse_bool, parse_int_list, read_kv_file
from .data import DatasetIndex, synthetic_pairs, write_pairs
from .errors import InvalidArgument
from .imageio import load_image, save_image
from .kpn import kpn_init
from .pipeline import derain_image, evaluate, train
from .rainmix import RainStreakSet, composite_rainy, generate_synthetic_streaks, make_rng, rain_mix

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    def __init__(self, message, help_text=""):
        super().__init__(message)
        self.help_text = help_text


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self.format_help())


def _on_off(text):
    try:
        return parse_bool(text)
    except InvalidArgument as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _int_list(text):
    try:
        return parse_int_list(text)
    except InvalidArgument as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


# flag name -> (TrainConfig field, type)
TRAIN_FLAGS = {
    "iterations": ("iterations", int),
    "epochs": ("epochs", int),
    "batch-size": ("batch_size", int),
    "lr": ("lr", float),
    "lambda": ("lam", float),
    "ssim-loss": ("ssim_enabled", _on_off),
    "rainmix": ("rainmix_enabled", _on_off),
    "dilations": ("dilations", _int_list),
    "kernel-width": ("kernel_width", int),
    "levels": ("levels", int),
    "base-channels": ("base_channels", int),
    "normalize-kernels": ("normalize_kernels", _on_off),
    "crop-size": ("crop_size", int),
    "checkpoint-interval": ("checkpoint_interval", int),
    "eval-interval": ("eval_interval", int),
    "precision": ("precision", str),
}


def _add_common(p):
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--config", metavar="FILE", help="key=value file; command-line flags override it")


def _add_model_flags(p):
    p.add_argument("--checkpoint", metavar="FILE", help="trained checkpoint (default: identity-start network)")
    p.add_argument("--kernel-width", type=int, default=5)
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--base-channels", type=int, default=32)
    p.add_argument("--dilations", type=_int_list, default=(1, 2, 3, 4))
    p.add_argument("--precision", choices=("float32", "float64"), default="float32")


def build_parser():
    parser = _Parser(prog="edrain", description="Pixel-wise dilation filtering for single-image deraining.")
    parser.add_argument("--version", action="version", version=f"edrain {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model (ablation switches: --variant or individual flags)")
    _add_common(p)
    p.add_argument("--data-dir", help="directory with rainy/ and clean/ sub-directories")
    p.add_argument("--rainy-dir")
    p.add_argument("--clean-dir")
    p.add_argument("--val-dir", help="optional held-out directory with rainy/ and clean/")
    p.add_argument("--streaks", metavar="DIR", help="rain-streak PNG directory (RainMix); synthetic if omitted")
    p.add_argument("--out-dir", default="run", help="checkpoints and metrics.csv go here (default ./run)")
    p.add_argument("--resume", metavar="FILE", help="continue from a checkpoint")
    p.add_argument("--variant", choices=sorted(VARIANTS), help="ablation preset v1..v4 (flags still override)")
    for flag, (_, typ) in TRAIN_FLAGS.items():
        p.add_argument(f"--{flag}", type=typ, default=None)

    p = sub.add_parser("derain", help="derain one PNG")
    _add_common(p)
    p.add_argument("input")
    p.add_argument("output")
    _add_model_flags(p)

    p = sub.add_parser("eval", help="PSNR/SSIM of a model on a paired dataset")
    _add_common(p)
    p.add_argument("--data-dir")
    p.add_argument("--rainy-dir")
    p.add_argument("--clean-dir")
    p.add_argument("--csv", metavar="FILE", help="write per-image CSV here")
    p.add_argument("--baseline", action="store_true", help="score the rainy inputs without a model")
    _add_model_flags(p)

    p = sub.add_parser("rainmix-preview", help="write RainMix samples (and composites) as PNGs")
    _add_common(p)
    p.add_argument("out_dir")
    p.add_argument("--streaks", metavar="DIR", help="rain-streak PNG directory (synthetic if omitted)")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--image", metavar="PNG", help="also composite each rain map onto this image")

    p = sub.add_parser("bench", help="stage latency report")
    _add_common(p)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--repetitions", type=int, default=100)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--scaling", action="store_true", help="also measure filtering time at 2x size")
    p.add_argument("--json", metavar="FILE", help="write the report as JSON")
    _add_model_flags(p)

    p = sub.add_parser("gen-streaks", help="write procedurally generated rain-streak maps")
    _add_common(p)
    p.add_argument("out_dir")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--size", type=int, default=128)

    p = sub.add_parser("make-dataset", help="write a synthetic rainy/clean dataset")
    _add_common(p)
    p.add_argument("out_dir")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    return parser


def _apply_config_file(parser, argv):
    """Turn ``--config FILE`` entries into subparser defaults (flags still win)."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    values = read_kv_file(known.config)
    sub_action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    command = next((a for a in argv if a in sub_action.choices), None)
    if command is None:
        return
    sub = sub_action.choices[command]
    dests = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in values.items():
        dest = "lambda" if key in ("lam", "lambda") else key
        if dest not in dests:
            raise UsageError(f"unknown key {key!r} in config file {known.config}", sub.format_help())
        action = dests[dest]
        defaults[dest] = action.type(value) if action.type else value
    sub.set_defaults(**defaults)


def _dataset(args, required=True):
    if args.data_dir:
        return DatasetIndex.from_root(args.data_dir)
    if args.rainy_dir and args.clean_dir:
        return DatasetIndex.from_dirs(args.rainy_dir, args.clean_dir)
    if required:
        raise UsageError("give --data-dir or both --rainy-dir and --clean-dir")
    return None


def _model(args):
    if args.checkpoint:
        params = load_checkpoint(args.checkpoint).params
        return params.astype(np.dtype(args.precision))
    cfg = TrainConfig(
        kernel_width=args.kernel_width,
        levels=args.levels,
        base_channels=args.base_channels,
        dilations=args.dilations,
        precision=args.precision,
    )
    return kpn_init(cfg.kpn_config(), args.seed, np.dtype(args.precision))


def _streaks(args, size=128):
    if args.streaks:
        return RainStreakSet.from_directory(args.streaks)
    return generate_synthetic_streaks(8, size, make_rng(args.seed))


def build_train_config(args):
    base = TrainConfig(seed=args.seed)
    if args.variant:
        base = base.with_variant(args.variant)
    changes = {}
    for flag, (field, _) in TRAIN_FLAGS.items():
        value = getattr(args, flag.replace("-", "_"))
        if value is not None:
            changes[field] = value
    return dataclasses.replace(base, **changes)


def cmd_train(args):
    config = build_train_config(args)
    dataset = _dataset(args)
    val = DatasetIndex.from_root(args.val_dir, split="val") if args.val_dir else None
    streaks = _streaks(args, config.crop_size) if config.rainmix_enabled else None
    resume = load_checkpoint(args.resume) if args.resume else None
    os.makedirs(args.out_dir, exist_ok=True)
    log_path = os.path.join(args.out_dir, "metrics.csv")
    for line in config.header_lines():
        print(f"# {line}")
    result = train(config, dataset, streaks, val=val, out_dir=args.out_dir, log_path=log_path, resume=resume)
    if result.rows:
        last = result.rows[-1]
        print(f"iterations {result.checkpoint.iteration}  final loss {last['loss']:.5f}")
    print(f"checkpoint {os.path.join(args.out_dir, 'final.edrn')}  log {log_path}")
    return EXIT_OK


def cmd_derain(args):
    params = _model(args)
    image = load_image(args.input)
    out = derain_image(params, image)
    save_image(args.output, out)
    print(f"wrote {args.output} ({image.shape[2]}x{image.shape[1]})")
    return EXIT_OK


def cmd_eval(args):
    dataset = _dataset(args)
    report = evaluate(None if args.baseline else _model(args), dataset)
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(report.to_csv())
    else:
        sys.stdout.write(report.to_csv())
    print(report.summary())
    return EXIT_OK


def cmd_rainmix_preview(args):
    os.makedirs(args.out_dir, exist_ok=True)
    streaks = _streaks(args, args.size)
    rng = make_rng(args.seed)
    image = load_image(args.image) if args.image else None
    for i in range(args.count):
        r = rain_mix(streaks, rng)
        save_image(os.path.join(args.out_dir, f"rainmix_{i:03d}.png"), r)
        if image is not None:
            save_image(os.path.join(args.out_dir, f"composite_{i:03d}.png"), composite_rainy(image, r))
    print(f"wrote {args.count} RainMix samples to {args.out_dir}")
    return EXIT_OK


def cmd_bench(args):
    params = _model(args)
    report = benchmark_latency(params, args.size, args.repetitions, args.warmup, args.seed)
    if args.scaling:
        report["filter_per_dilation_ms"] = {str(k): v for k, v in filter_timings(args.size, params.config.dilations,
                                                                                 params.config.kernel_width).items()}
        report["filtering_scaling_2x"] = filtering_scaling(args.size, dilations=params.config.dilations,
                                                           kernel_width=params.config.kernel_width)
    print(format_report(report))
    if args.scaling:
        print(f"  filtering time ratio at 2x size: {report['filtering_scaling_2x']:.2f}x")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2)
    return EXIT_OK


def cmd_gen_streaks(args):
    os.makedirs(args.out_dir, exist_ok=True)
    streaks = generate_synthetic_streaks(args.count, args.size, make_rng(args.seed))
    for i, m in enumerate(streaks.maps):
        save_image(os.path.join(args.out_dir, f"streak_{i:03d}.png"), m)
    print(f"wrote {args.count} streak maps to {args.out_dir}")
    return EXIT_OK


def cmd_make_dataset(args):
    index = write_pairs(synthetic_pairs(args.count, args.size, args.seed), args.out_dir)
    print(f"wrote {len(index)} pairs to {args.out_dir}/rainy and {args.out_dir}/clean")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "derain": cmd_derain,
    "eval": cmd_eval,
    "rainmix-preview": cmd_rainmix_preview,
    "bench": cmd_bench,
    "gen-streaks": cmd_gen_streaks,
    "make-dataset": cmd_make_dataset,
}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"edrain: error: {exc}\n\n{exc.help_text}")
        return EXIT_USAGE
    except (OSError, InvalidArgument) as exc:
        sys.stderr.write(f"edrain: error: {exc}\n")
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(f"edrain: error: {exc}\n")
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit code 2
        sys.stderr.write(f"edrain: error: {exc}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
