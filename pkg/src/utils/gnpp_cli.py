#!/usr/bin/env python
"""
Command-line front end for training, sweeps, gradient checks and analysis.

Usage:
    python -m src.utils.gnpp_cli train --arch lenet2 --dataset mnist --schedule mnist --repeats 3
    python -m src.utils.gnpp_cli sweep --arch lenet2 --types type1,type2 --sigmas 1.0,0.8,0.6
    python -m src.utils.gnpp_cli gradcheck --arch "{C3(S1P1)@4-G1(0.8)-MP2(S2)}{FC10}" --input 2x1x8x8
    python -m src.utils.gnpp_cli analyze rf --arch alexnet
    python -m src.utils.gnpp_cli analyze connections --arch alexnet --conv 5 --gnpp type1
    python -m src.utils.gnpp_cli evaluate --checkpoint runs/seed-0/checkpoint.bin --dataset mnist
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

# Add the project root to the Python path
sys.path.insert(0, str(Path(__file__).resolve().parent.parent.parent))

import pandas as pd
from dotenv import load_dotenv
from pydantic import ValidationError

from src.core.config import Settings, get_settings
from src.core.exceptions import ConfigError, GnppError
from src.core.timing import configure_logging
from src.schemas.gnpp import NeighborhoodType
from src.schemas.run import DatasetName, NormalizeScheme, RunConfig
from src.services.analysis_service import (
    connection_count,
    connection_footprint,
    conv_ordinal_index,
    full_view_layer,
    heatmap,
    iterations_to_reach,
    receptive_field,
    rf_table,
)
from src.services.arch_service import build_network, layer_token, resolve_arch
from src.services.checkpoint_service import checkpoint_load
from src.services.data_service import Split, load_dataset, normalize
from src.services.file_service import read_curves, write_pgm, write_table
from src.services.gradcheck_service import assert_passed, network_gradcheck
from src.services.optim_service import resolve_schedule
from src.services.training_service import evaluate_checkpoint, sweep, sweep_table, train_run

logger = logging.getLogger(__name__)

# Flags that map one-to-one onto RunConfig fields
RUN_FLAGS = {
    "arch": "arch",
    "dataset": "dataset",
    "batch": "batch_size",
    "momentum": "momentum",
    "wd": "weight_decay",
    "seed": "seed",
    "repeats": "repeats",
    "flip_prob": "flip_prob",
    "normalize": "normalize",
    "epoch_scale": "epoch_scale",
    "max_epochs": "max_epochs",
    "limit_train": "limit_train",
    "limit_test": "limit_test",
    "out": "out_dir",
}


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors as ConfigError instead of exiting with 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def parse_shape(text: str) -> tuple:
    """Parse "2x1x16x16" into (2, 1, 16, 16); a missing batch dimension becomes 1."""
    try:
        dims = tuple(int(d) for d in text.lower().split("x"))
    except ValueError as e:
        raise ConfigError(f"bad shape '{text}', expected NxCxHxW or CxHxW") from e
    if len(dims) == 3:
        dims = (1,) + dims
    if len(dims) != 4:
        raise ConfigError(f"bad shape '{text}', expected NxCxHxW or CxHxW")
    return dims


def parse_list(text: str, cast=str) -> list:
    try:
        return [cast(part.strip()) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise ConfigError(f"bad list '{text}'") from e


def add_run_arguments(parser: argparse.ArgumentParser, settings: Settings):
    parser.add_argument("--config", type=Path, help="JSON run configuration; explicit flags override it")
    parser.add_argument("--arch", help="Architecture preset name or literal string")
    parser.add_argument("--dataset", choices=[d.value for d in DatasetName])
    parser.add_argument("--data-dir", type=Path, help=f"Dataset directory (default GNPP_DATA_DIR={settings.data_dir})")
    parser.add_argument("--schedule", help='Preset (mnist, cifar, svhn) or stages like "20@1e-3,4@1e-4,1@1e-5"')
    parser.add_argument("--batch", type=int, help=f"Mini-batch size (default {settings.batch_size})")
    parser.add_argument("--momentum", type=float, help=f"SGD momentum (default {settings.momentum})")
    parser.add_argument("--wd", type=float, help=f"Weight decay (default {settings.weight_decay})")
    parser.add_argument("--seed", type=int, help=f"First seed (default {settings.seed})")
    parser.add_argument("--repeats", type=int, help="Independent runs from seeds seed..seed+R-1")
    parser.add_argument("--flip-prob", type=float, help="Horizontal flip probability for training batches")
    parser.add_argument("--normalize", choices=[s.value for s in NormalizeScheme])
    parser.add_argument("--epoch-scale", type=float, help="Multiply every schedule stage's epochs")
    parser.add_argument("--max-epochs", type=int, help="Truncate the schedule after this many epochs")
    parser.add_argument("--limit-train", type=int, help="Use only the first N training samples")
    parser.add_argument("--limit-test", type=int, help="Use only the first N test samples")
    parser.add_argument("--no-strict", action="store_true", help="Allow GNPP layers not followed by a pool")
    parser.add_argument("--out", type=Path, help=f"Output directory (default {settings.out_dir})")


def build_parser(settings: Settings) -> CliParser:
    parser = CliParser(prog="gnpp", description="Train and analyze GNPP convolutional networks")
    parser.add_argument("--log-level", default=settings.log_level, help="Logging level")
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="Train a network and write curves.csv and a checkpoint")
    add_run_arguments(train, settings)

    sweep_cmd = commands.add_parser("sweep", help="Train every GNPP placement combination")
    add_run_arguments(sweep_cmd, settings)
    sweep_cmd.add_argument("--types", default="type1", help="Comma-separated neighborhood types")
    sweep_cmd.add_argument("--sigmas", default="1.0", help="Comma-separated sigma values")
    sweep_cmd.add_argument(
        "--subset", action="append", help="1-based pools to equip, e.g. 1,2 (repeatable; default all subsets)"
    )
    sweep_cmd.add_argument("--workers", type=int, default=1, help="Parallel worker processes")

    grad = commands.add_parser("gradcheck", help="Compare backprop against central differences in 64-bit mode")
    grad.add_argument("--arch", default="lenet2")
    grad.add_argument("--input", default="2x1x16x16", help="Input shape NxCxHxW")
    grad.add_argument("--seed", type=int, default=settings.seed)
    grad.add_argument("--samples", type=int, default=settings.gradcheck_samples)
    grad.add_argument("--epsilon", type=float, default=settings.gradcheck_epsilon)
    grad.add_argument("--tolerance", type=float, default=settings.gradcheck_tolerance)
    grad.add_argument("--no-strict", action="store_true")
    grad.add_argument("--csv", type=Path, help="Save the report as CSV")

    evaluate_cmd = commands.add_parser("evaluate", help="Test error of a saved checkpoint")
    evaluate_cmd.add_argument("--checkpoint", type=Path, required=True)
    evaluate_cmd.add_argument("--dataset", choices=[d.value for d in DatasetName], default=DatasetName.MNIST.value)
    evaluate_cmd.add_argument("--data-dir", type=Path)
    evaluate_cmd.add_argument("--normalize", choices=[s.value for s in NormalizeScheme], default="scale255")
    evaluate_cmd.add_argument("--limit-test", type=int)

    analyze = commands.add_parser("analyze", help="Receptive fields, connections, heatmaps, convergence")
    kinds = analyze.add_subparsers(dest="analysis", required=True)

    rf = kinds.add_parser("rf", help="Receptive field, jump and overlap of a layer")
    rf.add_argument("--arch", required=True)
    rf.add_argument("--layer", type=int, help="Arch layer index (default: last conv)")
    rf.add_argument("--conv", type=int, help="1-based conv ordinal, e.g. 5 for conv-5")
    rf.add_argument("--csv", type=Path, help="Save the per-layer table as CSV")

    conn = kinds.add_parser("connections", help="Connections between a conv layer and its input")
    conn.add_argument("--arch", required=True)
    conn.add_argument("--conv", type=int, required=True, help="1-based conv ordinal")
    conn.add_argument("--gnpp", choices=[t.value for t in NeighborhoodType], help="Count GNPP latent connections")
    conn.add_argument("--input", default="3x227x227", help="Input shape CxHxW")
    conn.add_argument("--csv", type=Path, help="Save the counts as CSV")

    full = kinds.add_parser("fullview", help="Earliest layer whose receptive field covers the whole input")
    full.add_argument("--arch", required=True)
    full.add_argument("--input", default="3x227x227")
    full.add_argument("--csv", type=Path, help="Save the result as CSV")

    heat = kinds.add_parser("heatmap", help="Channel-averaged diffusion heatmap of one sample, as PGM")
    heat.add_argument("--arch", help="Required unless --checkpoint is given")
    heat.add_argument("--dataset", choices=[d.value for d in DatasetName], default=DatasetName.MNIST.value)
    heat.add_argument("--data-dir", type=Path)
    heat.add_argument("--checkpoint", type=Path, help="Use trained weights instead of a fresh initialization")
    heat.add_argument("--layer", type=int, help="Arch layer index (default: last conv)")
    heat.add_argument("--sample", type=int, default=0, help="Test-split sample index")
    heat.add_argument("--seed", type=int, default=settings.seed)
    heat.add_argument("--std-factor", type=float, default=settings.heatmap_std_factor)
    heat.add_argument("--out", type=Path, default=Path("heatmap.pgm"))

    conv = kinds.add_parser("convergence", help="Iterations needed to reach a test error")
    conv.add_argument("--curves", type=Path, required=True)
    conv.add_argument("--target", type=float, required=True, help="Test error as a fraction, e.g. 0.06")

    return parser


def build_run_config(args, settings: Settings) -> RunConfig:
    data = {}
    if args.config is not None:
        if not args.config.exists():
            raise ConfigError(f"config file {args.config} not found")
        try:
            data = json.loads(args.config.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {args.config} is not valid JSON: {e}") from e

    for flag, field in RUN_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            data[field] = value
    if args.no_strict:
        data["strict_placement"] = False
    if args.schedule is not None:
        data["schedule"] = resolve_schedule(args.schedule)
    elif isinstance(data.get("schedule"), str):
        data["schedule"] = resolve_schedule(data["schedule"])
    elif "schedule" not in data:
        raise ConfigError("--schedule is required (or a schedule in --config)")
    if "arch" not in data:
        raise ConfigError("--arch is required (or an arch in --config)")

    data.setdefault("batch_size", settings.batch_size)
    data.setdefault("momentum", settings.momentum)
    data.setdefault("weight_decay", settings.weight_decay)
    data.setdefault("seed", settings.seed)
    data.setdefault("out_dir", settings.out_dir)
    data["data_dir"] = args.data_dir or data.get("data_dir") or settings.data_dir
    return RunConfig(**data)


def cmd_train(args, settings: Settings) -> int:
    cfg = build_run_config(args, settings)
    summary = train_run(cfg, data_dir=cfg.data_dir)
    for result in summary.results:
        print(f"seed {result.seed}: test error {result.test_error:.2%} after {result.epochs} epochs ({result.run_dir})")
    if cfg.repeats > 1:
        print(f"mean test error: {summary.mean:.2%} ± {summary.std:.2%} over {cfg.repeats} runs")
    return 0


def cmd_sweep(args, settings: Settings) -> int:
    cfg = build_run_config(args, settings)
    nb_types = [NeighborhoodType(t) for t in parse_list(args.types)]
    sigmas = parse_list(args.sigmas, float)
    subsets = None
    if args.subset:
        subsets = [[p - 1 for p in parse_list(s, int)] for s in args.subset]
    results = sweep(cfg, nb_types, sigmas, cfg.data_dir, pool_subsets=subsets, workers=args.workers)
    table = sweep_table(results, nb_types, sigmas)
    write_table(Path(cfg.out_dir) / "sweep.csv", results)
    write_table(Path(cfg.out_dir) / "sweep_table.csv", table)
    print(table.to_string(index=False, float_format=lambda v: f"{v:.2%}"))
    best = results.iloc[results["test_error"].idxmin()]
    print(f"\nbest: pools={best['pools']} type={best['nb_type']} error={best['test_error']:.2%} "
          f"(relative decrease {best['relative_decrease']:.1%})")
    return 0


def cmd_gradcheck(args, settings: Settings) -> int:
    arch = resolve_arch(args.arch)
    report = network_gradcheck(
        arch,
        parse_shape(args.input),
        seed=args.seed,
        samples=args.samples,
        epsilon=args.epsilon,
        tolerance=args.tolerance,
        strict_placement=not args.no_strict,
    )
    print(report.to_string(index=False))
    if args.csv:
        write_table(args.csv, report)
    assert_passed(report, args.tolerance)
    print("\nAll gradients match within tolerance")
    return 0


def cmd_evaluate(args, settings: Settings) -> int:
    error = evaluate_checkpoint(
        args.checkpoint,
        DatasetName(args.dataset),
        args.data_dir or settings.data_dir,
        NormalizeScheme(args.normalize),
        args.limit_test,
    )
    print(f"test error: {error:.2%}")
    return 0


def _layer_index(arch, layer: Optional[int], conv: Optional[int] = None) -> int:
    if conv is not None:
        return conv_ordinal_index(arch, conv)
    if layer is not None:
        return layer
    convs = arch.conv_indices()
    if not convs:
        raise ConfigError("architecture has no conv layers; pass --layer")
    return convs[-1]


def cmd_analyze(args, settings: Settings) -> int:
    if args.analysis == "convergence":
        reached = iterations_to_reach(read_curves(args.curves), args.target)
        if reached is None:
            print(f"test error never reached {args.target:.2%}")
        else:
            print(f"test error reached {args.target:.2%} at iteration {reached}")
        return 0

    if args.analysis == "heatmap":
        return _heatmap(args, settings)

    arch = resolve_arch(args.arch)

    if args.analysis == "rf":
        index = _layer_index(arch, args.layer, args.conv)
        info = receptive_field(arch, index)
        print(f"layer {index} ({layer_token(arch.layers[index])})")
        print(f"receptive field: {info.rf}x{info.rf} pixels")
        print(f"jump: {info.jump}")
        print(f"overlap: {info.overlap:.1%}")
        table = rf_table(arch, index)
        print()
        print(table.to_string(index=False))
        if args.csv:
            write_table(args.csv, table)
        return 0

    if args.analysis == "connections":
        index = conv_ordinal_index(arch, args.conv)
        shape = parse_shape(args.input)
        nb_type = NeighborhoodType(args.gnpp) if args.gnpp else None
        layer = arch.layers[index]
        count = connection_count(arch, index, shape, nb_type)
        footprint = connection_footprint(layer.k, layer.stride, nb_type)
        print(f"conv-{args.conv} ({layer_token(layer)}): footprint {footprint}")
        print(f"connections: {count:,}")
        if args.csv:
            row = {
                "conv": args.conv,
                "layer": index,
                "gnpp": nb_type.value if nb_type else "none",
                "footprint": footprint,
                "connections": count,
            }
            write_table(args.csv, pd.DataFrame([row]))
        return 0

    if args.analysis == "fullview":
        shape = parse_shape(args.input)
        index = full_view_layer(arch, shape)
        rf = None
        if index is None:
            print(f"no layer sees the whole {shape[2]}x{shape[3]} input")
        else:
            rf = receptive_field(arch, index).rf
            print(f"layer {index} ({layer_token(arch.layers[index])}) sees the whole input: rf={rf}")
        if args.csv:
            row = {"height": shape[2], "width": shape[3], "layer": index, "rf": rf}
            write_table(args.csv, pd.DataFrame([row]))
        return 0

    raise ConfigError(f"unknown analysis {args.analysis}")


def _heatmap(args, settings: Settings) -> int:
    dataset = DatasetName(args.dataset)
    test = load_dataset(dataset, args.data_dir or settings.data_dir, Split.TEST)
    test = normalize(test, NormalizeScheme.SCALE255)
    if not 0 <= args.sample < len(test):
        raise ConfigError(f"sample {args.sample} out of range for {len(test)} test images")
    x = test.images[args.sample:args.sample + 1]
    if args.checkpoint:
        net = checkpoint_load(args.checkpoint)
    elif args.arch:
        net = build_network(resolve_arch(args.arch), (1,) + x.shape[1:], seed=args.seed, strict_placement=False)
    else:
        raise ConfigError("heatmap needs --arch or --checkpoint")
    index = _layer_index(net.arch, args.layer)
    features = net.forward(x, training=False, until=index)
    image = heatmap(features, net.arch, index, x.shape, args.std_factor)
    write_pgm(args.out, image)
    print(f"heatmap of layer {index} ({layer_token(net.arch.layers[index])}) written to {args.out}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
}


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    settings = get_settings()
    parser = build_parser(settings)

    try:
        args = parser.parse_args(argv)
        configure_logging(args.log_level)
        return COMMANDS[args.command](args, settings)
    except GnppError as e:
        print(f"Error: {e.detail}")
        return e.exit_code
    except ValidationError as e:
        print(f"Error: invalid configuration: {e}")
        return 1
    except SystemExit as e:
        # --help exits through argparse
        return e.code if isinstance(e.code, int) else 0
    except Exception as e:
        logger.exception("Unexpected failure")
        print(f"Error: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
