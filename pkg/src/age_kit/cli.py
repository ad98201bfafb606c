"""``age-kit`` command line.

Exit codes: 0 success, 1 internal failure, 2 user or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from age_kit import pipeline
from age_kit.config import PROFILES, dump_config, load_config
from age_kit.errors import AgeKitError

OUTPUT_ENV = "AGE_KIT_OUTPUT"


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="experiment YAML (defaults to the profile)")
    p.add_argument("--profile", choices=sorted(PROFILES), default="paper",
                   help="defaults the config file is layered on (default: paper)")
    p.add_argument("--seed", type=int, help="seed override (see README for per-command meaning)")
    p.add_argument("--output", type=Path, help=f"output directory (default: ${OUTPUT_ENV}/<output_dir>)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser():
    common = _common()
    parser = argparse.ArgumentParser(prog="age-kit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", parents=[common], help="write a config template")
    p.add_argument("path", type=Path, nargs="?", help="where to write (default: stdout)")
    p.add_argument("--phantom-dir", type=Path, help="also write the phantom dataset as PNG + manifest here")

    sub.add_parser("pretrain", parents=[common], help="DINO pretraining")

    p = sub.add_parser("select-head", parents=[common], help="pick the density attention head")
    p.add_argument("--checkpoint", type=Path)

    p = sub.add_parser("build-masks", parents=[common], help="binary masks for the training split")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--head", type=int, help="1-based head index (default: the selected head)")

    p = sub.add_parser("augment", parents=[common], help="write erased images and panels for inspection")
    p.add_argument("--count", type=int, default=8)

    p = sub.add_parser("train", parents=[common], help="one downstream training run")
    p.add_argument("--mode", choices=("none", "RE", "AGE"), default="AGE")
    p.add_argument("--p", type=float, default=0.6, dest="probability")
    p.add_argument("--checkpoint", type=Path)

    p = sub.add_parser("sweep", parents=[common], help="every (mode, P) x seed from the config")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--no-resume", action="store_true", help="retrain completed runs")

    p = sub.add_parser("report", parents=[common], help="tables, t-tests and panels from results")
    p.add_argument("--panels", type=int, default=4)
    return parser


def _output(args, cfg):
    if args.output is not None:
        return args.output
    return Path(os.environ.get(OUTPUT_ENV, ".")) / cfg.output_dir


def run(args):
    if args.command == "report" and args.config is None:
        layout = pipeline.Layout(args.output or Path(os.environ.get(OUTPUT_ENV, ".")) /
                                 PROFILES[args.profile]().output_dir)
        cfg_path = layout.config if layout.config.is_file() else None
        variant = load_config(cfg_path, args.profile).ttest_variant
        print(pipeline.run_report(layout, variant, args.panels).to_text(), end="")
        return 0

    cfg = load_config(args.config, args.profile)
    if args.seed is not None and args.command in ("pretrain", "select-head", "build-masks"):
        cfg = replace(cfg, pretrain_seed=args.seed,
                      head_selection=replace(cfg.head_selection, seed=args.seed))
    if args.seed is not None and args.command == "sweep":
        cfg = replace(cfg, seeds=(args.seed,))
    layout = pipeline.Layout(_output(args, cfg))

    if args.command == "init":
        if args.path is None:
            sys.stdout.write(dump_config(cfg))
        else:
            dump_config(cfg, args.path)
        if args.phantom_dir is not None:
            from age_kit.dataset import generate_phantom_dataset, write_phantom_dataset

            pc = cfg.dataset.phantom
            data = generate_phantom_dataset(pc.seed, pipeline.phantom_counts(cfg), pc.image_size, pc.mlo_fraction)
            print(write_phantom_dataset(args.phantom_dir, data))
    elif args.command == "pretrain":
        print(pipeline.run_pretrain(cfg, layout))
    elif args.command == "select-head":
        print(pipeline.run_select_head(cfg, layout, args.checkpoint).to_text(), end="")
    elif args.command == "build-masks":
        head = None if args.head is None else args.head - 1
        print(pipeline.run_build_masks(cfg, layout, args.checkpoint, head))
    elif args.command == "augment":
        for path in pipeline.write_panels(cfg, layout, layout.root / "augment", args.count):
            print(path)
    elif args.command == "train":
        seed = args.seed if args.seed is not None else cfg.seeds[0]
        r = pipeline.run_train(cfg, layout, args.mode, args.probability, seed, args.checkpoint)
        print(f"{r.key} seed {seed}: macro F1 {r.macro_f1:.4f}")
    elif args.command == "sweep":
        results = pipeline.run_sweep(cfg, layout, args.checkpoint, resume=not args.no_resume)
        print(f"{len(results)} results -> {layout.results}")
    elif args.command == "report":
        print(pipeline.run_report(layout, cfg.ttest_variant, args.panels).to_text(), end="")
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except AgeKitError as exc:
        print(f"age-kit: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        logging.getLogger("age_kit").exception("internal failure")
        print(f"age-kit: internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
