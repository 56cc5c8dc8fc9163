"""Command-line wrapper: extract --model <id> --input <txt> --out <semb>."""

from __future__ import annotations

import argparse
import sys

from .extract import EmptyInput, ExtractionJob, ModelLoadFailure, extract


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="extract",
        description=__doc__,
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--model", required=True,
                        help="model identifier or local checkpoint path")
    parser.add_argument("--input", required=True,
                        help="UTF-8 text, one passage per line")
    parser.add_argument("--out", required=True, help=".semb output path")
    parser.add_argument("--mode", choices=("token", "word"), default="token",
                        help="emit per-token records or word-averaged records")
    parser.add_argument("--batch", type=int, default=16, help="passages per batch")
    parser.add_argument("--max-records", type=int, default=None,
                        help="stop after this many records")
    parser.add_argument("--device", default="cpu", help="torch device hint")
    return parser


def main() -> None:
    args = _build_parser().parse_args()
    try:
        job = ExtractionJob(
            model=args.model,
            input_path=args.input,
            output_path=args.out,
            mode=args.mode,
            max_records=args.max_records,
            batch_size=args.batch,
            device=args.device,
        )
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        sys.exit(1)
    try:
        written = extract(job)
    except (ModelLoadFailure, EmptyInput, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(2)
    print(f"wrote {written} records -> {args.out}", file=sys.stderr)
    sys.exit(0)


if __name__ == "__main__":
    main()
