# src/cli.py
import argparse
import logging
import re
import sys
from typing import Dict, List, Optional

from .config import load_settings
from .errors import ConfigError, NowcastError, ValidationError
from . import pipeline

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3

# Short flags and the section.key they stand for, per command.
ALIASES: Dict[str, Dict[str, str]] = {
    "gen-synth": {"grid": "data.grid", "steps": "data.steps", "velocity": "data.velocity", "seed": "data.seed",
                  "out": "data.data_dir", "situations": "data.situations", "blobs": "data.blobs",
                  "diffusion": "data.diffusion", "noise": "data.noise"},
    "index": {"data": "data.data_dir"},
    "split": {"data": "data.data_dir", "seed": "data.seed", "ratios": "data.ratios"},
    "train": {"data": "data.data_dir", "variant": "model.variant", "k": "model.k", "epochs": "train.epochs",
              "seed": "train.seed", "out": "train.out_dir", "batch-size": "train.batch_size",
              "lr": "train.learning_rate"},
    "eval": {"data": "data.data_dir", "split": "eval.split", "baseline": "eval.baseline", "out": "eval.out_dir",
             "lead-times": "eval.lead_times"},
    "predict": {"data": "data.data_dir", "split": "eval.split", "out": "eval.out_dir",
                "lead-times": "eval.lead_times"},
    "plot": {"data": "data.data_dir", "split": "eval.split", "out": "eval.out_dir", "lead-times": "eval.lead_times",
             "stride": "eval.arrow_stride"},
}


# -1,0 or -0.5: argparse would otherwise read these values as flags
NEGATIVE_VALUE = re.compile(r"^-\.?\d[\d.,eE+-]*$")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="TOML config file")
    common.add_argument("--log-level", default="INFO", help="Log level")

    parser = _Parser(prog="nowcast", description="Physics-disentangled radar nowcasting", allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    commands = {
        "gen-synth": "Generate a synthetic advection dataset",
        "index": "Rebuild index.csv from the frames on disk",
        "split": "Group rainy frames into situations and split them",
        "train": "Train a model and write a checkpoint",
        "eval": "Evaluate a checkpoint on a split",
        "predict": "Write forecast frames for one sample",
        "plot": "Plot figures for a checkpoint",
    }
    for name, help_text in commands.items():
        p = sub.add_parser(name, help=help_text, parents=[common], allow_abbrev=False)
        for flag, dotted in ALIASES[name].items():
            p.add_argument(f"--{flag}", dest=f"alias:{dotted}", default=None, help=f"Same as --{dotted}")
        if name == "train":
            p.add_argument("--icloss", dest="alias:model.icloss_enabled", action="store_const", const="true",
                           default=None, help="Enable the intensity classification loss")
            p.add_argument("--teacher-forcing", dest="alias:train.teacher_forcing", action="store_const",
                           const="true", default=None, help="Feed ground-truth frames during rollout")
        if name in ("eval", "predict", "plot"):
            p.add_argument("--checkpoint", required=True, help="Checkpoint .npz")
        if name in ("predict", "plot"):
            p.add_argument("--sample", type=int, default=0, help="Sample index within the split")
        if name == "plot":
            p.add_argument("--kind", required=True, choices=pipeline.PLOT_KINDS)
    return parser


def join_negative_values(argv: List[str]) -> List[str]:
    """Rewrites `--flag -1,0` as `--flag=-1,0`."""
    out: List[str] = []
    for token in argv:
        prev = out[-1] if out else ""
        if NEGATIVE_VALUE.match(token) and prev.startswith("--") and "=" not in prev:
            out[-1] = f"{prev}={token}"
        else:
            out.append(token)
    return out


def parse_extra(extra: List[str]) -> Dict[str, str]:
    """--section.key value / --section.key=value pairs left over by argparse."""
    overrides: Dict[str, str] = {}
    i = 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--") or "." not in token:
            raise ConfigError(f"Unrecognized argument: {token}")
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"Missing value for {token}")
            value = extra[i + 1]
            i += 2
        overrides[key] = value
    return overrides


def _overrides(args: argparse.Namespace, extra: List[str]) -> Dict[str, str]:
    overrides = parse_extra(extra)
    for name, value in vars(args).items():
        if name.startswith("alias:") and value is not None:
            overrides[name[len("alias:"):]] = value
    return overrides


def run(args: argparse.Namespace, extra: List[str]) -> None:
    config = load_settings(args.config, _overrides(args, extra))
    command = args.command
    if command == "gen-synth":
        pipeline.cmd_gen_synth(config)
    elif command == "index":
        pipeline.cmd_index(config)
    elif command == "split":
        pipeline.cmd_split(config)
    elif command == "train":
        pipeline.cmd_train(config)
    elif command == "eval":
        pipeline.cmd_eval(config, args.checkpoint)
    elif command == "predict":
        pipeline.cmd_predict(config, args.checkpoint, args.sample)
    elif command == "plot":
        pipeline.cmd_plot(config, args.checkpoint, args.kind, args.sample)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(join_negative_values(sys.argv[1:] if argv is None else list(argv)))
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION

    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )

    try:
        run(args, extra)
    except (ValidationError, FileNotFoundError) as e:
        logger.error("%s failed: %s", args.command, e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NowcastError, RuntimeError) as e:
        logger.error("%s failed: %s", args.command, e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK
