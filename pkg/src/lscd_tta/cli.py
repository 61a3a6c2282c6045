"""Command line entry point: ``lscd-tta <subcommand> --config FILE``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .benchgen import dump_feature_csv
from .network import save_network

log = logging.getLogger("lscd_tta")


def _config(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config) if args.config else harness.ExperimentConfig()
    if args.seed:
        cfg = replace(cfg, seeds=tuple(args.seed))
    if args.out:
        cfg = replace(cfg, out=args.out)
    return cfg


def _out_dir(cfg, args) -> Path:
    # directory-producing commands ignore the report-file default
    return Path(args.out or ("data" if cfg.out == harness.ExperimentConfig.out else cfg.out))


def cmd_gen_data(cfg, args) -> int:
    out = _out_dir(cfg, args)
    out.mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds:
        source, target = harness.dataset_for_seed(cfg, seed)
        dump_feature_csv(source, out / f"source_seed{seed}.csv")
        dump_feature_csv(target, out / f"target_seed{seed}.csv")
        print(f"seed {seed}: {source.n} source rows, {target.n} target rows -> {out}")
    return 0


def cmd_train_source(cfg, args) -> int:
    out = _out_dir(cfg, args)
    out.mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds:
        data = harness.prepare_seed(replace(cfg, source_checkpoint=None), seed)
        path = out / f"source_seed{seed}.lscdnet"
        save_network(data.net, path)
        print(f"seed {seed}: validation accuracy {data.val_accuracy:.4f} -> {path}")
    return 0


def cmd_adapt(cfg, args) -> int:
    result = harness.run_experiment(cfg)
    harness.emit_report(result.rows(), cfg.out, cfg.format, result.config_hash)
    for rec in result.rows():
        if rec.is_aggregate:
            std = "" if rec.acc_std is None else f" +- {rec.acc_std:.4f}"
            print(f"{rec.method:>12}: {rec.acc_mean:.4f}{std}")
    return 1 if result.failures and not result.records else 0


def cmd_ablate(cfg, args) -> int:
    table = harness.run_ablation(cfg)
    harness.emit_ablation(table, cfg.out, cfg.format)
    for row in table.rows:
        avg = "failed" if row["average"] is None else f"{row['average']:.4f}"
        print(f"{row['method']:>8}: {avg}")
    return 1 if not table.seeds else 0


def cmd_sweep(cfg, args) -> int:
    points = harness.run_sensitivity(cfg)
    harness.emit_sensitivity(points, cfg.out, cfg.config_hash())
    for p in points:
        if p.seed is None:
            flag = "  <- best" if p.best else ""
            print(f"{p.sweep}={getattr(p.weights, p.sweep):g}: {p.accuracy:.4f}{flag}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-source": cmd_train_source,
    "adapt": cmd_adapt,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lscd-tta", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, action="append", help="override seeds (repeatable)")
        p.add_argument("--out", help="report file, or output directory for gen-data/train-source (default data/)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.command](cfg, args)
    except (harness.ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
