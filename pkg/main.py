"""
relaygrid - command-line entry point

    python main.py synth --config run.cfg
    python main.py train --config run.cfg --steps 500
    python main.py eval  --config run.cfg --checkpoint runs/x/checkpoints/best.rlyt
    python main.py attn  --config run.cfg
    python main.py cost  --config run.cfg
"""
import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

from dotenv import load_dotenv
from pydantic import ValidationError

load_dotenv()

from src.cli import commands
from src.cli.config import load_run_config
from src.errors import ConfigError, RelayGridError

logger = logging.getLogger(__name__)

EXIT_RUNTIME = 1
EXIT_USAGE = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relaygrid", description="Relay-token multi-scale segmentation")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("synth", "generate the synthetic context-cue scene set"),
        ("train", "train one variant and write checkpoints"),
        ("eval", "sliding-window evaluation on the test split"),
        ("attn", "write relay attention rasters"),
        ("cost", "analytic parameter/FLOP/memory report"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", type=Path, help="flat key=value run config")
        cmd.add_argument("--checkpoint", type=Path, help="checkpoint to evaluate or resume from")
        cmd.add_argument("--out", type=Path, help="run directory (synth: scene root)")
        cmd.add_argument("--seed", type=int)
        cmd.add_argument("--threads", type=int)
        cmd.add_argument("--steps", type=int, help="stop after this optimizer step")
        cmd.add_argument("--variant", help="e.g. SequentialRelay, FewerBlocks:6")
        cmd.add_argument("--log-level", dest="log_level")
        cmd.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, str]:
    flat: Dict[str, str] = {}
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item}")
        flat[key.strip()] = value
    if args.seed is not None:
        flat["seed"] = str(args.seed)
    if args.variant is not None:
        flat["variant"] = args.variant
    threads = args.threads if args.threads is not None else os.getenv("RELAYGRID_THREADS")
    if threads is not None:
        flat["threads"] = str(threads)
    return flat


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


def _validation_reason(exc: ValidationError) -> str:
    first = exc.errors()[0]
    loc = ".".join(str(p) for p in first.get("loc", ()))
    more = f" (+{exc.error_count() - 1} more)" if exc.error_count() > 1 else ""
    return f"{loc}: {first.get('msg', '')}{more}" if loc else f"{first.get('msg', '')}{more}"


def run(args: argparse.Namespace) -> None:
    cfg = load_run_config(args.config, _overrides(args))
    if args.command == "synth":
        commands.cmd_synth(cfg, args.out)
    elif args.command == "train":
        commands.cmd_train(cfg, args.out, args.checkpoint, args.steps, cfg.threads)
    elif args.command == "eval":
        commands.cmd_eval(cfg, args.checkpoint, args.out)
    elif args.command == "attn":
        commands.cmd_attn(cfg, args.checkpoint, args.out)
    elif args.command == "cost":
        commands.cmd_cost(cfg, args.out)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = args.log_level or os.getenv("RELAYGRID_LOG_LEVEL", "INFO")
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format="%(asctime)s | %(levelname)-8s | %(name)s | %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )
    try:
        run(args)
    except ValidationError as exc:
        print(f"error: config: {_one_line(_validation_reason(exc))}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"error: {exc.kind}: {_one_line(exc)}", file=sys.stderr)
        return EXIT_USAGE
    except RelayGridError as exc:
        print(f"error: {exc.kind}: {_one_line(exc)}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: io: {_one_line(exc)}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
