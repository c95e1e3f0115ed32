"""Command-line surface for the extractor.

Exit codes mirror the mapping engine: 0 success, 1 usage, 2 data error,
3 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .backends import load_bundle
from .config import ExtractorConfig
from .errors import BackendUnavailable, ExtractorError, InputError
from .fixtures import make_fixtures
from .pipeline import embed_text, emit_sequence


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _config_from_args(args) -> ExtractorConfig:
    kwargs = {"backend": args.backend}
    if getattr(args, "box_threshold", None) is not None:
        kwargs["box_threshold"] = args.box_threshold
    if getattr(args, "min_mask_pixels", None) is not None:
        kwargs["min_mask_pixels"] = args.min_mask_pixels
    if getattr(args, "extra_labels", None):
        kwargs["extra_labels"] = tuple(
            part.strip() for part in args.extra_labels.split(",") if part.strip())
    if getattr(args, "device", None):
        kwargs["device"] = args.device
    return ExtractorConfig(**kwargs)


def cmd_run(args) -> int:
    config = _config_from_args(args)
    summary = emit_sequence(args.input, args.output, config)
    print(f"wrote {summary['frames']} frames with {summary['detections']} "
          f"detections to {summary['output']}")
    return 0


def cmd_embed_text(args) -> int:
    config = _config_from_args(args)
    bundle = load_bundle(config)
    query = embed_text(args.text, bundle, instance_rank=args.instance_rank)
    rendered = json.dumps(query, sort_keys=True, indent=2)
    if args.output:
        Path(args.output).write_text(rendered + "\n", encoding="utf-8")
    else:
        print(rendered)
    return 0


def cmd_make_fixtures(args) -> int:
    scene = make_fixtures(args.output, n_frames=args.frames, seed=args.seed)
    print(f"wrote {scene['n_frames']} fixture frames with "
          f"{len(scene['objects'])} objects to {args.output}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="osmap-extract",
                     description="Produce osmap frame-record files from RGB-D imagery")
    sub = parser.add_subparsers(dest="command", required=True)

    backend = argparse.ArgumentParser(add_help=False)
    backend.add_argument("--backend", default="procedural",
                         choices=["procedural", "transformers"])
    backend.add_argument("--device", help="inference device for model backends")

    p_run = sub.add_parser("run", parents=[backend],
                           help="extract a posed RGB-D directory into a frames file")
    p_run.add_argument("input", help="directory with rgb_*/depth_* images, "
                                     "poses.txt and intrinsics.json")
    p_run.add_argument("-o", "--output", required=True, help="frames JSONL path")
    p_run.add_argument("--box-threshold", type=float, default=None)
    p_run.add_argument("--min-mask-pixels", type=int, default=None)
    p_run.add_argument("--extra-labels", default=None,
                       help="comma-separated labels to add to the tag set")
    p_run.set_defaults(func=cmd_run)

    p_text = sub.add_parser("embed-text", parents=[backend],
                            help="write a query JSON for the mapping engine")
    p_text.add_argument("text")
    p_text.add_argument("-o", "--output", help="query JSON path (default stdout)")
    p_text.add_argument("--instance-rank", type=int, default=1)
    p_text.set_defaults(func=cmd_embed_text)

    p_fix = sub.add_parser("make-fixtures",
                           help="render a synthetic posed RGB-D fixture set")
    p_fix.add_argument("output", help="fixture output directory")
    p_fix.add_argument("--frames", type=int, default=5)
    p_fix.add_argument("--seed", type=int, default=3)
    p_fix.set_defaults(func=cmd_make_fixtures)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (InputError, BackendUnavailable) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ExtractorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
