"""Command-line entry point: ``dualprompt <verb> [options]``.

On failure a single JSON line ``{"error": <category>, "message": ...}`` goes to
stderr and the exit code identifies the category (see ``EXIT_CODES``).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .backbone import ContractError
from .checkpoint import CheckpointError
from .data import CorruptionError, DataError
from .engine import MODES, RehearsalViolation
from .experiments import (ExperimentConfig, ReportError, cmd_ablate, cmd_compare_variants, cmd_pretrain,
                          cmd_report, cmd_run, cmd_sweep_lengths, cmd_sweep_positions, parse_ranges)
from .optim import NonFiniteGradientError
from .prompting import AttachConfig, ConfigError

EXIT_CODES = {
    "internal": 1,
    "usage": 2,
    "config": 3,
    "data": 4,
    "checkpoint": 5,
    "contract": 6,
    "numeric": 7,
    "io": 8,
}


def _category(exc: BaseException) -> str:
    # order matters: subclasses before their bases
    if isinstance(exc, (ConfigError, ReportError)):
        return "config"
    if isinstance(exc, CheckpointError):
        return "checkpoint"
    if isinstance(exc, (CorruptionError, DataError)):
        return "data"
    if isinstance(exc, (ContractError, RehearsalViolation)):
        return "contract"
    if isinstance(exc, (NonFiniteGradientError, FloatingPointError)):
        return "numeric"
    if isinstance(exc, OSError):
        return "io"
    return "internal"


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seeds", None):
        cfg = cfg.replace(seeds=[int(s) for s in args.seeds.split(",")])
    if getattr(args, "output_dir", None):
        cfg = cfg.replace(output_dir=args.output_dir)
    return cfg


def _ints(text: Optional[str]):
    return None if text is None else [int(v) for v in text.split(",") if v.strip()]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(json.dumps({"error": "usage", "type": "UsageError", "message": message}) + "\n")
        raise SystemExit(EXIT_CODES["usage"])


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dualprompt",
                description="Rehearsal-free continual learning with G- and E-prompts "
                            "on a frozen transformer backbone.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="verb", required=True, metavar="VERB", parser_class=_Parser)

    def common(sp, seeds=True):
        sp.add_argument("-c", "--config", help="experiment config (JSON); defaults are used when omitted")
        sp.add_argument("-o", "--output-dir", help="override output_dir from the config")
        if seeds:
            sp.add_argument("--seeds", help="comma-separated seeds overriding the config, e.g. 0,1,2")

    sp = sub.add_parser("init-config", help="write the default experiment config")
    sp.add_argument("path", help="where to write the JSON config")

    sp = sub.add_parser("pretrain", help="pretrain the backbone on the upstream split and save a checkpoint")
    common(sp, seeds=False)
    sp.add_argument("--out", help="checkpoint path (default: config checkpoint or OUTPUT_DIR/backbone.ckpt)")

    sp = sub.add_parser("run", help="continual run over all tasks for every seed")
    common(sp)
    sp.add_argument("--mode", choices=MODES, help="training mode (default: train.mode from the config)")
    sp.add_argument("--out", help="run directory (default: OUTPUT_DIR/MODE)")
    sp.add_argument("--no-oracle", action="store_true", help="skip the ground-truth-expert evaluation")

    sp = sub.add_parser("sweep-positions", help="rank prompt positions by validation Average Accuracy")
    common(sp)
    sp.add_argument("--strategy", choices=("heuristic", "exhaustive", "explicit"), default="heuristic")
    sp.add_argument("--kind", choices=("g", "e"), default="e",
                    help="prompt type varied by exhaustive/explicit sweeps")
    sp.add_argument("--ranges", help="explicit layer ranges, e.g. 1-2,3,4-5")
    sp.add_argument("--out", help="output directory (default: OUTPUT_DIR/sweep_positions)")

    sp = sub.add_parser("sweep-lengths", help="grid over (Lg, Le) by validation Average Accuracy")
    common(sp)
    sp.add_argument("--g-grid", help="comma-separated G lengths (default 5,10,20,40; doubled under Pre-T)")
    sp.add_argument("--e-grid", help="comma-separated E lengths (default 5,10,20,40; doubled under Pre-T)")
    sp.add_argument("--variant", choices=("prot", "pret"), help="override attach.variant")
    sp.add_argument("--out", help="output directory (default: OUTPUT_DIR/sweep_lengths)")

    sp = sub.add_parser("ablate", help="baseline / G / E / G+E at single and multiple layers")
    common(sp)
    sp.add_argument("--out", help="output directory (default: OUTPUT_DIR/ablate)")

    sp = sub.add_parser("compare-variants", help="DualPrompt with Pro-T and with Pre-T on the same seeds")
    common(sp)
    sp.add_argument("--out", help="output directory (default: OUTPUT_DIR/variants)")

    sp = sub.add_parser("report", help="merge run directories into one comparison table")
    sp.add_argument("runs", nargs="+", help="run directories (a seed_* directory or its parent)")
    sp.add_argument("--out", help="write report.{txt,csv,json} here")
    return p


def dispatch(args) -> dict:
    verb = args.verb
    if verb == "init-config":
        ExperimentConfig().save(args.path)
        return {"text": f"wrote {args.path}\n"}
    if verb == "report":
        return cmd_report(args.runs, Path(args.out) if args.out else None)
    cfg = _load(args)
    out = Path(args.out) if getattr(args, "out", None) else None
    if verb == "pretrain":
        res = cmd_pretrain(cfg, out)
        res["text"] = (f"checkpoint {res['checkpoint']}\nsha256 {res['sha256']}\n"
                       f"upstream accuracy {res['upstream_accuracy']:.2f}%\n")
        return res
    if verb == "run":
        return cmd_run(cfg, args.mode, out, with_oracle=not args.no_oracle)
    if verb == "sweep-positions":
        ranges = parse_ranges(args.ranges) if args.ranges else None
        if args.strategy == "explicit" and ranges is None:
            raise ConfigError("--strategy explicit needs --ranges")
        return cmd_sweep_positions(cfg, args.strategy, args.kind, ranges, out)
    if verb == "sweep-lengths":
        if args.variant:
            a = cfg.attach
            lg, le = a.g_length, a.e_length
            if args.variant != a.variant:
                lg, le = (lg // 2, le // 2) if a.variant == "pret" else (2 * lg, 2 * le)
            cfg = cfg.replace(attach=AttachConfig(a.g_range, a.e_range, args.variant, lg, le))
        return cmd_sweep_lengths(cfg, _ints(args.g_grid), _ints(args.e_grid), out)
    if verb == "ablate":
        return cmd_ablate(cfg, out)
    if verb == "compare-variants":
        return cmd_compare_variants(cfg, out)
    raise ConfigError(f"unknown verb {verb!r}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        res = dispatch(args)
    except Exception as exc:  # reported as one machine-parseable line
        cat = _category(exc)
        sys.stderr.write(json.dumps({"error": cat, "type": type(exc).__name__, "message": str(exc)}) + "\n")
        if args.verbose:
            logging.exception("command failed")
        return EXIT_CODES[cat]
    sys.stdout.write(res.get("text", ""))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
