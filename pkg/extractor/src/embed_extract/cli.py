"""Command line for the embedding extractor."""

from __future__ import annotations

import argparse
import sys

from embed_extract.extract import ExtractorConfig, extract


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embed-extract",
        description="Extract per-token transformer embeddings for a corpus file")
    parser.add_argument("--corpus", required=True, help="corpus file (JSONL)")
    parser.add_argument("--encoder", required=True,
                        help="pretrained encoder name or local path")
    parser.add_argument("--pool", choices=("first", "mean"), default="first",
                        help="subword-to-word pooling rule")
    parser.add_argument("--out", required=True, help="output embedding file")
    parser.add_argument("--max-length", type=int, default=512)
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--layer", type=int, default=-1,
                        help="hidden layer to pool from (-1: last)")
    parser.add_argument("--d-emb", type=int,
                        help="expected embedding dimension (validated)")
    return parser


def main() -> None:
    args = build_parser().parse_args()
    config = ExtractorConfig(
        encoder=args.encoder, pooling=args.pool, max_length=args.max_length,
        batch_size=args.batch_size, layer=args.layer, d_emb=args.d_emb)
    try:
        path = extract(args.corpus, config, args.out)
    except Exception as exc:  # noqa: BLE001 - single-line machine-parsable error
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(1)
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
