#!/usr/bin/env python3
"""Write a synthetic byte corpus for the toy experiments."""

import argparse
from pathlib import Path

from ebft.data import synthetic_text


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("path", type=Path)
    ap.add_argument("--bytes", type=int, default=160_000)
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--words", type=int, default=64)
    ap.add_argument("--branching", type=int, default=4)
    ap.add_argument("--chain-p", type=float, default=0.9)
    args = ap.parse_args()
    data = synthetic_text(args.bytes, seed=args.seed, n_words=args.words,
                          branching=args.branching, chain_p=args.chain_p)
    args.path.write_bytes(data)
    print(f"wrote {len(data)} bytes to {args.path}")


if __name__ == "__main__":
    main()
