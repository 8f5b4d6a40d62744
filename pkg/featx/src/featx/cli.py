"""Command line wrapper: manifest in, feature container out."""

from __future__ import annotations

import argparse
import sys

from .encoders import EncoderUnavailableError, available_encoders
from .extract import ManifestError, extract


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="featx",
        description="Extract frozen-encoder image features into an HVFEAT01 container",
    )
    parser.add_argument("--manifest", required=True, help="CSV with header item_id,path")
    parser.add_argument("--encoder", default="tiny-conv64",
                        help=f"one of: {', '.join(available_encoders())}")
    parser.add_argument("--out", required=True, help="output container path")
    parser.add_argument("--batch", type=int, default=16)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 2
    try:
        summary = extract(args.manifest, args.encoder, args.out, batch_size=args.batch)
    except (ManifestError, EncoderUnavailableError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(summary.describe())
    return 0


def entrypoint() -> None:
    sys.exit(main())
