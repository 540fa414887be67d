"""Next-token pretraining for the dense toy teacher."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Corpus
from .errors import ConfigError, DataError, NumericError
from .model import LanguageModel, model_forward
from .optim import Adam
from .tensor import Tape, backward


@dataclass
class PretrainConfig:
    lr: float = 1e-3
    epochs: int = 3
    batch_size: int = 16
    seq_len: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1 or self.seq_len < 2:
            raise ConfigError(f"invalid pretrain config: {self}")


@dataclass
class PretrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    seconds: float = 0.0


def pretrain(model: LanguageModel, corpus: Corpus,
             cfg: PretrainConfig) -> PretrainReport:
    """Train in place on non-overlapping windows with Adam; window order is
    reshuffled each epoch from one seeded stream, so runs are reproducible."""
    n_windows = len(corpus) // cfg.seq_len
    if n_windows < 1:
        raise DataError(
            f"corpus has {len(corpus)} tokens, needs at least {cfg.seq_len}")
    windows = corpus.ids[:n_windows * cfg.seq_len].reshape(n_windows, cfg.seq_len)

    params = list(model.named_tensors().values())
    for t in params:
        t.requires_grad = True
    opt = Adam(params, cfg.lr)
    rng = np.random.default_rng(cfg.seed)

    t0 = time.perf_counter()
    report = PretrainReport()
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(n_windows)
            losses = []
            for start in range(0, n_windows, cfg.batch_size):
                batch = windows[order[start:start + cfg.batch_size]]
                s = batch.shape[1]
                with Tape() as tape:
                    logits = model_forward(model, batch)
                    logits = T.slice_(logits, (slice(None), slice(0, s - 1)))
                    loss = T.cross_entropy(logits, batch[:, 1:])
                val = loss.item()
                if not np.isfinite(val):
                    raise NumericError("pretraining loss diverged",
                                       epoch=epoch, lr=cfg.lr)
                backward(loss, tape)
                opt.step()
                losses.append(val)
            report.epoch_losses.append(float(np.mean(losses)))
    finally:
        model.set_requires_grad(False)
    report.seconds = time.perf_counter() - t0
    return report
