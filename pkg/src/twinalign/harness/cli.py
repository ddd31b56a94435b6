"""Command line entry point.

Exit codes: 0 success, 1 configuration error, 2 stage failure, 3 failed
acceptance gate (``eval``).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from ..distill import ConfigurationError
from ..geometry import PathError
from .config import ConfigError, load_config
from .io import TrackFormatError, read_log
from .metrics import format_summary, summarize
from .pipeline import (
    StageError,
    check_gates,
    collect,
    gen_path,
    rollout_expert,
    run_alignment_stage,
    train_stage,
)
from .plots import emit_plots

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_GATE = 0, 1, 2, 3


def _common(suppress: bool) -> argparse.ArgumentParser:
    # subcommands suppress defaults so options given before the subcommand survive
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="YAML experiment config (defaults if omitted)", **kw)
    common.add_argument("-o", "--output-dir", help="override run.output_dir", **kw)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress", **kw)
    return common


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="twinalign", description="Virtual-twin alignment simulator", parents=[_common(False)])
    common = _common(True)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-path", parents=[common], help="generate an OU track CSV")
    s.add_argument("--out", help="track CSV to write")
    s.add_argument("--seed", type=int, help="override run.seed")
    s.add_argument("--length", type=float, help="override run.track_length [m]")

    s = sub.add_parser("rollout-expert", parents=[common], help="drive the expert over a track")
    s.add_argument("--track")
    s.add_argument("--out", help="state CSV to write")

    s = sub.add_parser("collect", parents=[common], help="collect a distillation dataset")
    s.add_argument("--out", help="dataset file to write")
    s.add_argument("--samples", type=int, help="override training.n_samples")
    s.add_argument("--workers", type=int, help="override run.workers")

    s = sub.add_parser("train", parents=[common], help="train the trajectory generator")
    s.add_argument("--dataset")
    s.add_argument("--out", help="model file to write")
    s.add_argument("--epochs", type=int, help="override training.epochs")

    s = sub.add_parser("run-alignment", parents=[common], help="run the twin alignment loop")
    s.add_argument("--track")
    s.add_argument("--model")
    s.add_argument("--log", help="log CSV to write")
    s.add_argument("--no-plot", action="store_true")

    s = sub.add_parser("eval", parents=[common], help="summarise a log and apply the configured gates")
    s.add_argument("--log", required=True)
    s.add_argument("--json", action="store_true", help="print the summary as JSON")

    s = sub.add_parser("plot", parents=[common], help="render the three-panel alignment figure")
    s.add_argument("--log", required=True)
    s.add_argument("--out", help="figure file (.svg, .pdf or .png)")
    return p


def _override(cfg, section: str, **values):
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return cfg
    try:
        sec = dataclasses.replace(getattr(cfg, section), **values)
    except ValueError as exc:
        raise ConfigError(f"command line: [{section}] {exc}") from None
    return dataclasses.replace(cfg, **{section: sec})


def _dispatch(args, cfg) -> int:
    cmd = args.command
    if cmd == "gen-path":
        cfg = _override(cfg, "run", seed=args.seed, track_length=args.length)
        print(gen_path(cfg, args.out))
    elif cmd == "rollout-expert":
        stats = rollout_expert(cfg, args.track, args.out)
        print(json.dumps(stats, sort_keys=True))
    elif cmd == "collect":
        cfg = _override(cfg, "training", n_samples=args.samples)
        cfg = _override(cfg, "run", workers=args.workers)
        print(collect(cfg, args.out))
    elif cmd == "train":
        cfg = _override(cfg, "training", epochs=args.epochs)
        print(train_stage(cfg, args.dataset, args.out))
    elif cmd == "run-alignment":
        art = run_alignment_stage(cfg, args.track, args.model, args.log, plot=not args.no_plot)
        print(format_summary(art.summary))
        print(f"log      {art.log_file}")
        print(f"metrics  {art.metrics_file}")
        if art.plot_file:
            print(f"plot     {art.plot_file}")
    elif cmd == "eval":
        summary = summarize(read_log(args.log))
        print(json.dumps(summary.to_dict(), sort_keys=True) if args.json else format_summary(summary))
        failed = False
        for name, value, limit, ok in check_gates(summary, cfg):
            print(f"{'PASS' if ok else 'FAIL'} {name} {value:.4f} <= {limit:.4f}")
            failed |= not ok
        return EXIT_GATE if failed else EXIT_OK
    elif cmd == "plot":
        out = args.out or args.log.rsplit(".", 1)[0] + "." + cfg.run.plot_format
        written = emit_plots(read_log(args.log), out)
        if written:
            print(written)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.output_dir:
            cfg = _override(cfg, "run", output_dir=args.output_dir)
        return _dispatch(args, cfg)
    except (ConfigError, ConfigurationError, TrackFormatError, PathError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_STAGE
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"stage {args.command!r} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
