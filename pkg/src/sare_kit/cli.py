"""Command-line entry point: ``sare-kit <command> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import PRESETS, RunConfig, load_config
from .errors import ArtifactError, ConfigError, ParseError, SareError

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


def _csv(kind):
    def parse(text):
        try:
            return [kind(x) for x in text.split(",") if x.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc
    return parse


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML or JSON run config")
    common.add_argument("--preset", default="desk", choices=sorted(PRESETS))
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable, applied after the file")
    common.add_argument("--root", help="output root (paths.root)")
    common.add_argument("--seed", type=int, help="master seed (the SARE_KIT_SEED env var wins)")
    common.add_argument("--jobs", type=int, default=1, help="parallel workers over objects")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sare-kit", description="Fracture reassembly experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset")
    sub.add_parser("train", parents=[common], help="train the flow model")
    s = sub.add_parser("sample", parents=[common], help="first-pass sampling on a split")
    s.add_argument("--split", default="test", choices=pipeline.SPLITS)
    r = sub.add_parser("refine", parents=[common], help="structure-aware second pass")
    r.add_argument("--mode", choices=("repaint", "freeze", "oracle-adjacency"))
    r.add_argument("--alpha", type=float)
    r.add_argument("--force", action="store_true", help="accept upstream outputs from another config")
    e = sub.add_parser("eval", parents=[common], help="metrics for first pass and refine outputs")
    e.add_argument("--force", action="store_true", help="pair outputs produced under different configs")
    a = sub.add_parser("ablate", parents=[common], help="head / attachment-layer / refine sweeps")
    a.add_argument("--sweep", type=Path, help='JSON like {"heads": [...], "layers": [...], "refine": [...]}')
    a.add_argument("--heads", type=_csv(str), help="comma list of both,fracture,adjacency,none")
    a.add_argument("--layers", type=_csv(int), help="comma list of attachment layers")
    a.add_argument("--refine", type=_csv(str), help="comma list of alpha=<v> and freeze")
    sub.add_parser("report", parents=[common], help="print the evaluation summary")
    return p


def resolve_config(args) -> RunConfig:
    overrides = list(args.overrides)
    if args.root:
        overrides.append(f"paths.root={json.dumps(args.root)}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "mode", None):
        overrides.append(f'refine.mode="{args.mode}"')
    if getattr(args, "alpha", None) is not None:
        overrides.append(f"refine.alpha={args.alpha}")
    return load_config(args.config, args.preset, overrides)


def _sweep(args, config: RunConfig) -> tuple[list, list, list]:
    spec = {}
    if args.sweep:
        if not args.sweep.exists():
            raise ConfigError(f"sweep file not found: {args.sweep}")
        spec = json.loads(args.sweep.read_text())
    heads = args.heads if args.heads is not None else spec.get("heads", ["both", "none"])
    layers = args.layers if args.layers is not None else spec.get("layers", [config.model.attach_layer])
    refine = args.refine if args.refine is not None else spec.get("refine", ["alpha=0.5", "alpha=1.0", "freeze"])
    return heads, layers, refine


def run(args) -> int:
    config = resolve_config(args)
    cmd = args.command
    if cmd == "gen-data":
        out = pipeline.cmd_gen_data(config, args.jobs)
    elif cmd == "train":
        out = pipeline.cmd_train(config)
    elif cmd == "sample":
        out = pipeline.cmd_sample(config, args.jobs, args.split)
    elif cmd == "refine":
        out = pipeline.cmd_refine(config, args.jobs, args.force)
    elif cmd == "eval":
        out = pipeline.cmd_eval(config, args.force)
    elif cmd == "ablate":
        out = pipeline.cmd_ablate(config, *_sweep(args, config))
    else:
        sys.stdout.write(pipeline.cmd_report(config))
        return EXIT_OK
    print(f"{cmd}: wrote {out} (config {config.config_hash()})")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (ConfigError, ArtifactError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SareError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
