"""Command line driver: ``oneshot-det <gen-data|train|adapt-eval|curve|report>``.

Options not listed below are config overrides (``--key value``) applied on
top of ``--config`` (a flat ``key = value`` file).  Exit codes: 0 success,
2 configuration error (including refusing to overwrite), 3 training fault,
4 missing input.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from . import config, pipeline
from .checkpoint import MissingGroupError
from .detcore import TrainingFault
from .synthgen import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_FAULT, EXIT_MISSING = 0, 2, 3, 4

logger = logging.getLogger("oneshot_det")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--out", help=f"output root (default ${pipeline.OUTPUT_ROOT_ENV} or ./runs)")
    common.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="oneshot-det", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write source and target datasets")
    t = sub.add_parser("train", parents=[common], help="pretrain one variant on the source split")
    t.add_argument("--dir", help="checkpoint directory (default <out>/train/<variant>-s<seed>)")
    a = sub.add_parser("adapt-eval", parents=[common], help="adapt per image and score every target domain")
    a.add_argument("--checkpoint", action="append", default=[], help="checkpoint path (repeatable)")
    a.add_argument("--name", default="default", help="subdirectory under <out>/eval")
    a.add_argument("--curve", action="store_true", help="also sweep gamma_list and plot mAP against gamma")
    c = sub.add_parser("curve", parents=[common], help="mAP against adaptation iterations")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--name", default="default", help="subdirectory under <out>/curve")
    sub.add_parser("report", parents=[common], help="seed-averaged summary of every eval run")
    return p


def run(argv: list[str] | None = None) -> int:
    args, rest = _parser().parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = config.load(args.config, rest)
        errs = cfg.validate()
        if errs:
            raise ConfigError("; ".join(errs))
        if cfg.workers == 1:
            torch.set_num_threads(1)
        root = pipeline.output_root(args.out)
        if args.command == "gen-data":
            pipeline.gen_data(cfg, root, args.overwrite)
            out = root / "data"
        elif args.command == "train":
            out = pipeline.cmd_train(cfg, root, args.overwrite, Path(args.dir) if args.dir else None)
        elif args.command == "adapt-eval":
            out = pipeline.cmd_adapt_eval(cfg, root, args.checkpoint, args.name, args.overwrite, args.curve)
        elif args.command == "curve":
            out = pipeline.cmd_curve(cfg, root, args.checkpoint, args.name, args.overwrite)
        else:
            out = pipeline.cmd_report(root, args.overwrite)
    except (ConfigError, ValueError, FileExistsError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingFault, MemoryError) as exc:
        print(f"training fault: {exc}", file=sys.stderr)
        return EXIT_FAULT
    except (FileNotFoundError, MissingGroupError) as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    print(out)
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
