"""Command-line front end: run attack experiments from JSON configs and
emit reports, plus a dataset pair-statistics helper."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import experiment
from .graphs import load_canonical, pair_distribution


def _load_config(path: str | None) -> experiment.AttackRunConfig:
    if path is None:
        return experiment.AttackRunConfig()
    doc = json.loads(Path(path).read_text())
    return experiment.config_from_dict(doc)


def _parse_seeds(text: str) -> tuple:
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError as err:
        raise SystemExit(f"--seeds must be comma-separated integers: {err}")


def _print_summary(ledger: experiment.RunLedger, quiet: bool) -> None:
    if quiet:
        return
    for cell in sorted(ledger.cells):
        agg = ledger.aggregate(cell)
        n = agg["n_reports"]
        failed = len(ledger.errors.get(cell, {}))
        if n == 0:
            print(f"{cell}: no successful seeds ({failed} failed)")
            continue
        ov = agg["overall_auc"]
        ic = agg["intra_class_auc"]
        line = (f"{cell}: n={n} overall_auc {ov['mean']:.4f}+/-{ov['std']:.4f} "
                f"intra_class_auc {ic['mean']:.4f}+/-{ic['std']:.4f}")
        if failed:
            line += f" ({failed} seed{'s' if failed > 1 else ''} failed)"
        print(line)
    for cell in sorted(ledger.errors):
        for seed, msg in sorted(ledger.errors[cell].items()):
            print(f"  failed {cell} seed {seed}: {msg}", file=sys.stderr)


def _run_stats(cfg: experiment.AttackRunConfig, out_dir: Path,
               quiet: bool) -> int:
    if cfg.dataset is None:
        raise SystemExit("stats needs a config with a dataset path")
    g = load_canonical(cfg.dataset)
    stats = pair_distribution(g, seed=cfg.seeds[0])
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "pair_stats.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["population", "intra_class", "inter_class"])
        w.writerow(["linked", repr(stats.r_linked_intra),
                    repr(stats.r_linked_inter)])
        w.writerow(["unlinked", repr(stats.r_unlinked_intra),
                    repr(stats.r_unlinked_inter)])
    if not quiet:
        print(f"{g.name}: {g.num_nodes} nodes, {g.num_edges} edges, "
              f"{g.num_classes} classes")
        print(f"linked pairs:   {stats.r_linked_intra:.4f} intra / "
              f"{stats.r_linked_inter:.4f} inter")
        print(f"unlinked pairs: {stats.r_unlinked_intra:.4f} intra / "
              f"{stats.r_unlinked_inter:.4f} inter")
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="linkleak",
        description="Feature-poisoning link-leakage experiments on GNNs")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
            ("attack", "offline end-to-end attack over target classes"),
            ("online", "batched vendor training, arrival position sweep"),
            ("blackbox", "shadow x vendor architecture transfer grid"),
            ("ablation", "loss-weight / depth / distortion sweeps"),
            ("stats", "dataset pair-composition statistics")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file mirroring AttackRunConfig")
        p.add_argument("--out", help="output directory (default runs/<command>)")
        p.add_argument("--seeds", help="comma-separated seed list override")
        p.add_argument("--quiet", action="store_true",
                       help="suppress progress output")
        if name == "ablation":
            p.add_argument("--sweep", required=True,
                           choices=("reg_weights", "depth", "distortion"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args.config)
        if args.seeds:
            cfg = replace(cfg, seeds=_parse_seeds(args.seeds))
        out_dir = Path(args.out) if args.out else Path("runs") / args.command

        if args.command == "stats":
            return _run_stats(cfg, out_dir, args.quiet)

        if args.command == "attack":
            ledger = experiment.run_attack(cfg)
        elif args.command == "online":
            ledger = experiment.run_online(cfg)
        elif args.command == "blackbox":
            ledger = experiment.run_blackbox(cfg)
        else:
            ledger = experiment.run_ablation(cfg, args.sweep)
    except (ValueError, OSError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2

    written = experiment.emit_reports(ledger, out_dir)
    _print_summary(ledger, args.quiet)
    if not args.quiet:
        print(f"wrote {written[0]}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
