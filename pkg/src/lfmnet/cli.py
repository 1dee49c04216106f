"""Command-line entry points.

Exit codes: 0 success, 1 usage error, 2 invalid configuration,
3 missing or unwritable data.
"""

from __future__ import annotations

import argparse
import os
import sys

from .attack import ATTACK_CSV_HEADER
from .config import ExperimentConfig, SweepSpec, load_config
from .data import load_dataset, make_split, save_dataset, synth_generate, write_manifest
from .errors import ConfigError, DataError
from .experiments import (
    evaluate_model,
    output_lock,
    pin_threads,
    plot_sweep,
    run_compare,
    run_sweep,
    run_transfer_attack,
    train_model,
    viz_masks,
    write_eval_csv,
    write_sweep_csv,
    write_train_log,
)
from .nn import build_model, load_checkpoint, save_checkpoint
from .rng import RngStream

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_common(sub: argparse.ArgumentParser, with_data: bool = True) -> None:
    sub.add_argument("--config", help="config file ([section] key = value lines)")
    sub.add_argument("--seed", type=int, help="override run.seed")
    sub.add_argument("--out", help="override run.out output directory")
    sub.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config value (repeatable)",
    )
    if with_data:
        sub.add_argument("--data", required=True, help="dataset file (.lfmd)")


def _build_parser() -> _Parser:
    parser = _Parser(prog="lfmnet", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = subs.add_parser("gen-data", help="render the synthetic dataset")
    _add_common(p, with_data=False)

    p = subs.add_parser("train", help="train one model per the config flags")
    _add_common(p)

    p = subs.add_parser("eval", help="retrieval metrics for a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--method", default="model", help="method label for the CSV row")
    p.add_argument(
        "--include-same-camera",
        action="store_true",
        help="keep same-identity same-camera gallery entries (junk filter off)",
    )

    p = subs.add_parser("attack", help="transfer attack from surrogate to target")
    _add_common(p)
    p.add_argument("--target", required=True, help="target checkpoint")
    p.add_argument("--surrogate", required=True, help="surrogate checkpoint")
    p.add_argument("--kind", choices=("pgd", "gaussian"), default="pgd")

    p = subs.add_parser("sweep", help="train+eval over a value grid for one parameter")
    _add_common(p)
    p.add_argument("--param", required=True, help="config path, e.g. lfm.probability")
    p.add_argument("--values", required=True, help="comma-separated value list")
    p.add_argument("--seeds", type=int, default=1, help="seeds per value")
    p.add_argument("--plot", action="store_true", help="also render sweep.ppm")

    p = subs.add_parser("compare", help="one train+eval row per configured method")
    _add_common(p)

    p = subs.add_parser("viz-masks", help="before/after stem feature images")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", type=int, default=0, help="dataset sample index")

    return parser


def _load_cfg(args) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if args.config:
        if not os.path.exists(args.config):
            raise DataError(f"config file not found: {args.config}")
        cfg = load_config(args.config, cfg)
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        path, _, value = item.partition("=")
        cfg = cfg.with_value(path.strip(), value.strip())
    if args.seed is not None:
        cfg = cfg.with_value("run.seed", str(args.seed))
    if args.out is not None:
        cfg = cfg.with_value("run.out", args.out)
    cfg.validate()
    return cfg


def _load_data(cfg: ExperimentConfig, path):
    if not os.path.exists(path):
        raise DataError(f"dataset file not found: {path}")
    dataset = load_dataset(path)
    split = make_split(dataset, cfg.data.train_identities)
    return dataset, split


def _restore_model(cfg: ExperimentConfig, split, path):
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    model = build_model(
        cfg.model_config(num_classes=len(split.train_ids)),
        RngStream(cfg.run.seed).child("init"),
    )
    load_checkpoint(model, path)
    return model


def _cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    out = cfg.run.out
    with output_lock(out):
        dataset = synth_generate(
            cfg.data.seed, cfg.data.n_identities, cfg.data.views_per_id, cfg.data.n_cams
        )
        data_path = os.path.join(out, "dataset.lfmd")
        save_dataset(dataset, data_path)
        write_manifest(dataset, os.path.join(out, "manifest.csv"))
    print(f"wrote {len(dataset)} samples to {data_path}")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = _load_cfg(args)
    dataset, split = _load_data(cfg, args.data)
    out = cfg.run.out
    with output_lock(out):
        result = train_model(cfg, dataset, split)
        ckpt = os.path.join(out, "checkpoint.lfmc")
        save_checkpoint(result.model, ckpt)
        write_train_log(os.path.join(out, "train_log.csv"), result.log_rows)
    final = result.log_rows[-1] if result.log_rows else None
    status = f"final loss {final[1]:.4f} acc {final[2]:.4f}" if final else "no epochs"
    print(f"trained {cfg.train.epochs} epochs ({status}); checkpoint at {ckpt}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    dataset, split = _load_data(cfg, args.data)
    model = _restore_model(cfg, split, args.checkpoint)
    report = evaluate_model(
        cfg, model, dataset, split,
        exclude_same_camera=not args.include_same_camera,
    )
    out = cfg.run.out
    with output_lock(out):
        write_eval_csv(os.path.join(out, "eval.csv"), [(args.method, report)])
    print(report.csv_row(args.method))
    return EXIT_OK


def _cmd_attack(args) -> int:
    cfg = _load_cfg(args)
    dataset, split = _load_data(cfg, args.data)
    target = _restore_model(cfg, split, args.target)
    surrogate = _restore_model(cfg, split, args.surrogate)
    report = run_transfer_attack(cfg, target, surrogate, dataset, split, kind=args.kind)
    out = cfg.run.out
    model_name = os.path.splitext(os.path.basename(args.target))[0]
    with output_lock(out):
        path = os.path.join(out, "attack.csv")
        with open(path, "w", encoding="ascii") as fh:
            fh.write(ATTACK_CSV_HEADER + "\n")
            for row in report.csv_rows(model_name):
                fh.write(row + "\n")
    deltas = report.deltas
    print(
        f"{report.kind}: rank1 {report.clean.rank1:.4f} -> {report.attacked.rank1:.4f} "
        f"(delta {deltas['rank1']:.4f}); report at {path}"
    )
    return EXIT_OK


def _cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    dataset, split = _load_data(cfg, args.data)
    spec = SweepSpec(
        param=args.param,
        values=tuple(v.strip() for v in args.values.split(",") if v.strip()),
        seeds=args.seeds,
    )
    spec.validate()
    out = cfg.run.out
    with output_lock(out):
        rows = run_sweep(cfg, spec, dataset, split)
        path = os.path.join(out, "sweep.csv")
        write_sweep_csv(path, rows)
        if args.plot:
            plot_sweep(os.path.join(out, "sweep.ppm"), rows)
    print(f"swept {spec.param} over {len(spec.values)} values x {spec.seeds} seeds -> {path}")
    return EXIT_OK


def _cmd_compare(args) -> int:
    cfg = _load_cfg(args)
    dataset, split = _load_data(cfg, args.data)
    out = cfg.run.out
    with output_lock(out):
        rows = run_compare(cfg, dataset, split)
        path = os.path.join(out, "compare.csv")
        write_eval_csv(path, rows)
    for method, report in rows:
        print(report.csv_row(method))
    return EXIT_OK


def _cmd_viz_masks(args) -> int:
    cfg = _load_cfg(args)
    dataset, split = _load_data(cfg, args.data)
    model = _restore_model(cfg, split, args.checkpoint)
    out = cfg.run.out
    with output_lock(out):
        written = viz_masks(cfg, model, dataset, args.index, out)
    print(f"wrote {len(written)} files to {out}")
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "attack": _cmd_attack,
    "sweep": _cmd_sweep,
    "compare": _cmd_compare,
    "viz-masks": _cmd_viz_masks,
}


def main(argv=None) -> int:
    pin_threads()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
