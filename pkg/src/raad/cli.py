"""Command-line entry point.

    raad <command> --config <path> [--seed N] [--out DIR] [--stage STAGE]

Commands run one pipeline stage each; --seed and --out override the
config's values, --stage restricts eval/heatmaps to a single stage.
"""

from __future__ import annotations

import argparse
import sys

from . import pipeline
from .config import load_config
from .errors import RaadError

_COMMANDS = ("gen-data", "pretrain", "train", "score-layers", "quantize",
             "finetune", "eval", "heatmaps")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="raad",
                                     description="Anomaly-detector quantization pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override config output directory")
        if name in ("eval", "heatmaps"):
            p.add_argument("--stage", choices=pipeline.STAGES, default=None,
                           help="restrict to one stage (default: all available)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        seed = cfg.seed if args.seed is None else args.seed
        out = cfg.out_dir if args.out is None else args.out
        if args.command == "gen-data":
            path = pipeline.cmd_gen_data(cfg, out, seed)
            print(f"dataset written to {path}")
        elif args.command == "pretrain":
            print(f"checkpoint written to {pipeline.cmd_pretrain(cfg, out, seed)}")
        elif args.command == "train":
            print(f"checkpoint written to {pipeline.cmd_train(cfg, out, seed)}")
        elif args.command == "score-layers":
            print(f"layer scores written to {pipeline.cmd_score_layers(cfg, out, seed)}")
        elif args.command == "quantize":
            print(f"checkpoint written to {pipeline.cmd_quantize(cfg, out, seed)}")
        elif args.command == "finetune":
            print(f"checkpoint written to {pipeline.cmd_finetune(cfg, out, seed)}")
        elif args.command == "eval":
            stages = None if args.stage is None else [args.stage]
            rows = pipeline.cmd_eval(cfg, out, seed, stages)
            for r in rows:
                print(f"{r.stage}: auroc={r.auroc:.4f} ap={r.ap:.4f} "
                      f"aupro={r.aupro:.4f} bias_mass={r.bias_mass:.4f}")
        elif args.command == "heatmaps":
            stages = None if args.stage is None else [args.stage]
            files = pipeline.cmd_heatmaps(cfg, out, seed, stages)
            print(f"{len(files)} heatmaps written")
    except RaadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
