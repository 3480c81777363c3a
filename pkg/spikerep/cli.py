"""Command-line entry point: ``spikerep <subcommand> --config config.json [--seed N] [--use-dae] [--out DIR]``."""
import argparse
import json
import logging
import sys
from typing import List, Optional

from spikerep import __version__
from spikerep.commands import COMMANDS, run_command
from spikerep.utils.config import load_config, log_level
from spikerep.utils.errors import PipelineError

logger = logging.getLogger(__name__)

# Subcommand → file inputs it accepts (option name → input key).
COMMAND_INPUTS = {
    "synth": [],
    "preprocess": ["recording"],
    "detect": ["recording"],
    "extract": ["recording", "events", "ground-truth"],
    "train": ["snippets"],
    "embed": ["snippets", "model"],
    "sort": ["recording", "model"],
    "eval": ["recording", "ground-truth", "sorting"],
    "protocol": ["snippets", "model"],
    "ablate": ["train", "test", "model"],
    "sweep": ["train", "eval", "param", "values"],
    "compare": ["a", "b"],
}

HELP = {
    "synth": "generate a synthetic recording with ground truth",
    "preprocess": "remove bad channels and band-pass filter",
    "detect": "threshold spike detection → events.csv",
    "extract": "cut snippets at events, or a labeled train/eval split at ground-truth frames",
    "train": "train the representation model on snippets",
    "embed": "compute representations for snippets",
    "sort": "full pipeline: detect, extract, embed, cluster → sorting.csv",
    "eval": "score a sorting against ground truth",
    "protocol": "unit-sampling ARI protocol on labeled snippets",
    "ablate": "DAE ablation: centroid distance, silhouette and ARI",
    "sweep": "train one model per value of alpha or rep_dim and score each",
    "compare": "paired Wilcoxon tests between two evaluation reports",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spikerep", description="Self-supervised spike sorting pipeline")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        p = sub.add_parser(command, help=HELP[command])
        p.add_argument("--config", help="config.json (defaults when omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--use-dae", action="store_true", help="apply the DAE before the encoder at inference")
        p.add_argument("--out", default=".", help="output directory (default: current directory)")
        for name in COMMAND_INPUTS[command]:
            p.add_argument(f"--{name}", dest=name.replace("-", "_"))
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=log_level(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    inputs = {name.replace("-", "_"): getattr(args, name.replace("-", "_")) for name in COMMAND_INPUTS[args.command]}
    try:
        cfg = load_config(args.config, seed=args.seed)
        manifest = run_command(args.command, cfg, inputs, args.out, args.use_dae)
    except PipelineError as e:
        print(json.dumps(e.to_dict()))
        return 1
    except Exception as e:
        logger.exception(f"Unexpected error in {args.command}: {str(e)}")
        print(json.dumps({"success": False, "error_type": "internal", "message": str(e), "details": {}}))
        return 2
    logger.info(f"{args.command} finished: {json.dumps(manifest.outputs)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
