#!/usr/bin/env python3
"""End-to-end experiment: pretrain a dense teacher, prune it, recover it
block by block, and report perplexities at every stage."""

import argparse
import time
from pathlib import Path

from ebft.data import (read_corpus, sample_calibration, split_eval,
                       synthetic_text)
from ebft.finetune import FineTuneConfig, finetune_model
from ebft.model import ModelConfig, init_model, perplexity
from ebft.pruning import NM, Channel, Unstructured, prune_model
from ebft.train import PretrainConfig, pretrain


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--corpus", type=Path, help="text file; synthesized if omitted")
    ap.add_argument("--sparsity", type=float, default=0.5)
    ap.add_argument("--pattern", choices=["unstructured", "nm", "channel"],
                    default="unstructured")
    ap.add_argument("--criterion", choices=["magnitude", "activation"],
                    default="activation")
    ap.add_argument("--pretrain-epochs", type=int, default=6)
    ap.add_argument("--calib-samples", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    if args.corpus:
        corpus = read_corpus(args.corpus)
    else:
        from ebft.data import tokenize
        corpus = tokenize(synthetic_text(160_000, seed=11, n_words=64,
                                         branching=4, chain_p=0.9), "synthetic")
    train, eval_corpus = split_eval(corpus, 0.1)

    model = init_model(ModelConfig(), seed=args.seed)
    t0 = time.time()
    report = pretrain(model, train,
                      PretrainConfig(lr=1.2e-3, epochs=args.pretrain_epochs,
                                     batch_size=16, seq_len=128, seed=args.seed))
    ppl_dense = perplexity(model, eval_corpus.ids, 128)
    print(f"dense teacher: ppl {ppl_dense:.4f} "
          f"(losses {[round(x, 3) for x in report.epoch_losses]}, {time.time()-t0:.0f}s)")

    calib = sample_calibration(train, args.calib_samples, 128, seed=args.seed + 1)
    pattern = {"unstructured": Unstructured(args.sparsity),
               "nm": NM(2, 4),
               "channel": Channel(args.sparsity)}[args.pattern]
    sparse, masks, layer_report = prune_model(
        model, args.criterion, pattern,
        calib if args.criterion == "activation" else None)
    ppl_pruned = perplexity(sparse, eval_corpus.ids, 128)
    mean_s = sum(layer_report.values()) / len(layer_report)
    print(f"pruned ({args.criterion}, {pattern}): ppl {ppl_pruned:.4f} "
          f"(mean layer sparsity {mean_s:.3f})")

    t0 = time.time()
    tuned, ft_report = finetune_model(model, sparse, masks, calib,
                                      FineTuneConfig(seed=args.seed))
    ppl_tuned = perplexity(tuned, eval_corpus.ids, 128)
    print(f"block-wise fine-tuned: ppl {ppl_tuned:.4f} ({time.time()-t0:.0f}s, "
          f"max resident blocks {ft_report.max_resident_blocks})")
    for i, blk in enumerate(ft_report.blocks):
        print(f"  block {i}: loss {blk.losses[0]:.3e} -> {blk.losses[-1]:.3e} "
              f"in {blk.epochs_run} epochs (converged={blk.converged})")
    rel = 100 * (ppl_pruned - ppl_tuned) / ppl_pruned
    print(f"recovered {rel:.2f}% of pruned perplexity "
          f"({ppl_pruned:.4f} -> {ppl_tuned:.4f}, dense {ppl_dense:.4f})")


if __name__ == "__main__":
    main()
