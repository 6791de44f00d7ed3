"""``diffinv`` command line: sample | invert | generate | run | evaluate | grid."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .backends import BackendError
from .config import ConfigError, load_config, with_overrides
from .dataset import DatasetError, read_triplets, sample_triplets, write_triplets
from .images import ImageDecodeError
from .inversion import DivergenceError
from .runner import MissingArtifact, Runner, render_grids

log = logging.getLogger("diffinv")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_BACKEND = 4
EXIT_DIVERGED = 5


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true", help="overwrite artifacts made under a different config")
    p.add_argument("--backend", choices=("mock", "sd21", "sdxl"))
    p.add_argument("--alpha", type=float, help="image/text delta interpolation ratio")
    p.add_argument("--tokens", type=int, help="number of Difference Tokens")
    p.add_argument("--lambda-tc", type=float, dest="lambda_tc")
    p.add_argument("--lambda-clip", type=float, dest="lambda_clip")
    p.add_argument("--iterations", type=int)
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--run-id", dest="run_id")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffinv", description="Difference Inversion for image analogies")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="build (A, A', B) triplets from an edit-pair manifest")
    _common(p)
    p.add_argument("dataset", help="directory containing manifest.jsonl")
    p.add_argument("--count", type=int)
    p.add_argument("--out", default="triplets.jsonl")

    for name, text in (("invert", "learn Difference Tokens"), ("generate", "generate B' from learned tokens"), ("run", "invert, generate and score")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("triplets", help="triplets.jsonl written by `diffinv sample`")
        p.add_argument("--id", action="append", dest="ids", help="restrict to these triplet ids")
        if name == "generate":
            p.add_argument("--diff", help="diff.tensor to apply (default: the triplet's own)")
            p.add_argument("--reverse", action="store_true", default=None, help="apply -D (A' -> A direction)")
        if name == "run":
            p.add_argument("--workers", type=int)

    p = sub.add_parser("evaluate", help="directional-score report for a run directory")
    _common(p)
    p.add_argument("run_dir")

    p = sub.add_parser("grid", help="A | A' | B | B' figure pages for a run directory")
    _common(p)
    p.add_argument("run_dir")
    p.add_argument("--rows", type=int, default=8)
    return parser


def _config(args):
    cfg = load_config(args.config)
    overrides = {k: getattr(args, k, None) for k in (
        "seed", "backend", "alpha", "lambda_tc", "lambda_clip", "iterations", "output_dir", "run_id", "count", "workers", "reverse")}
    overrides["tokens"] = getattr(args, "tokens", None)
    return with_overrides(cfg, **overrides)


def _select(triplets, ids):
    if not ids:
        return triplets
    chosen = [t for t in triplets if t.id in set(ids)]
    missing = set(ids) - {t.id for t in chosen}
    if missing:
        raise MissingArtifact(f"triplet ids not found: {sorted(missing)}")
    return chosen


def dispatch(args) -> int:
    cfg = _config(args)
    if args.command == "sample":
        triplets, summary = sample_triplets(args.dataset, cfg.eval.count, cfg.eval.seed)
        write_triplets(triplets, args.out)
        print(f"wrote {summary.returned} triplets to {args.out} "
              f"(requested {summary.requested}, eligible pairs {summary.eligible_pairs}, "
              f"skipped singleton-instruction pairs {summary.skipped_singletons})")
        return EXIT_OK
    if args.command == "grid":
        for path in render_grids(args.run_dir, args.rows):
            print(path)
        return EXIT_OK

    runner = Runner(cfg, force=args.force)
    if args.command == "evaluate":
        paths = runner.evaluate(args.run_dir)
        print(Path(paths["table"]).read_text(encoding="utf-8"), end="")
        return EXIT_OK

    triplets = _select(read_triplets(args.triplets), args.ids)
    if args.command == "invert":
        for t in triplets:
            print(runner.invert(t))
    elif args.command == "generate":
        for t in triplets:
            print(runner.generate(t, args.diff))
    else:
        for path in runner.run(triplets):
            print(path)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return dispatch(args)
    except (ConfigError, DatasetError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (MissingArtifact, ImageDecodeError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_MISSING
    except BackendError as exc:
        log.error("%s", exc)
        return EXIT_BACKEND
    except DivergenceError as exc:
        log.error("%s", exc)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
