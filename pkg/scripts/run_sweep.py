#!/usr/bin/env python3
"""Calibration-size sweep: how recovery quality scales with the number of
fine-tuning samples."""

import argparse
from pathlib import Path

from ebft.data import calibration_sweep, read_corpus, split_eval
from ebft.finetune import FineTuneConfig, finetune_model
from ebft.model import ModelConfig, init_model, perplexity
from ebft.pruning import Unstructured, prune_model
from ebft.train import PretrainConfig, pretrain


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("corpus", type=Path)
    ap.add_argument("--sizes", default="8,16,32,64,128")
    ap.add_argument("--sparsity", type=float, default=0.5)
    ap.add_argument("--pretrain-epochs", type=int, default=6)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--csv", type=Path, help="optional output CSV")
    args = ap.parse_args()

    train, eval_corpus = split_eval(read_corpus(args.corpus), 0.1)
    model = init_model(ModelConfig(), seed=args.seed)
    pretrain(model, train, PretrainConfig(lr=1.2e-3, epochs=args.pretrain_epochs,
                                          batch_size=16, seq_len=128,
                                          seed=args.seed))
    print(f"dense ppl {perplexity(model, eval_corpus.ids, 128):.4f}")

    def pipeline(calib):
        sparse, masks, _ = prune_model(model, "activation",
                                       Unstructured(args.sparsity), calib)
        tuned, _ = finetune_model(model, sparse, masks, calib,
                                  FineTuneConfig(seed=args.seed))
        return perplexity(tuned, eval_corpus.ids, 128)

    sizes = sorted(int(s) for s in args.sizes.split(","))
    rows = calibration_sweep(train, sizes, pipeline, 128, seed=args.seed)
    for row in rows:
        print(f"n={row['size']:<5d} perplexity {row['perplexity']:.4f}")
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write("size,perplexity,seed\n")
            for row in rows:
                fh.write(f"{row['size']},{row['perplexity']},{row['seed']}\n")
        print(f"wrote {args.csv}")


if __name__ == "__main__":
    main()
