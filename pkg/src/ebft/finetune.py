"""Block-by-block fine-tuning of masked weights against dense block outputs.

The driver walks blocks in order. For each block it records the student
input stream (propagated through the already-tuned sparse blocks) and the
dense teacher outputs, then minimizes the mean squared block reconstruction
error by backpropagation, updating only the masked linear weights. Pruned
coordinates stay exactly zero: gradients are masked before the optimizer
step and weights re-masked after it, so optimizer moments never accumulate
on pruned entries.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, NumericError
from .model import LanguageModel, TransformerBlock, block_forward
from .optim import make_optimizer
from .pruning import SparsityMask
from .tensor import Tape, Tensor, backward

_ZERO_LOSS = 1e-300  # reconstruction already exact; nothing to tune


@dataclass
class FineTuneConfig:
    lr: float = 2e-4
    max_epochs: int = 10
    batch_size: int = 8
    convergence_rel_tol: float = 1e-4
    convergence_patience: int = 2
    optimizer: str = "adam"
    seed: int = 0
    teacher_propagation: str = "dense"  # "dense": fixed dense targets; "self": teacher fed the student stream
    train_norms: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.convergence_rel_tol < 0:
            raise ConfigError("convergence_rel_tol must be >= 0")
        if self.convergence_patience < 1:
            raise ConfigError("convergence_patience must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.teacher_propagation not in ("dense", "self"):
            raise ConfigError(
                f"teacher_propagation must be dense or self, got {self.teacher_propagation!r}")


@dataclass
class BlockTargets:
    inputs: np.ndarray   # (n, s, d) student inputs to the block
    targets: np.ndarray  # (n, s, d) teacher outputs of the block


@dataclass
class BlockReport:
    losses: list[float]
    epochs_run: int
    converged: bool
    seconds: float


@dataclass
class FineTuneReport:
    blocks: list[BlockReport] = field(default_factory=list)
    total_seconds: float = 0.0
    max_resident_blocks: int = 0
    config: Optional[FineTuneConfig] = None

    def to_json_dict(self) -> dict:
        return {
            "config": asdict(self.config) if self.config else None,
            "blocks": [{"loss": b.losses, "epochs": b.epochs_run,
                        "converged": b.converged, "seconds": b.seconds}
                       for b in self.blocks],
            "total_seconds": self.total_seconds,
            "max_resident_blocks": self.max_resident_blocks,
        }


class ResidencyGauge:
    """Counts blocks holding gradient state; proves one-block-at-a-time
    streaming for the report and the acceptance suite."""

    def __init__(self, model: LanguageModel):
        self.model = model
        self.max_resident = 0

    def probe(self) -> int:
        resident = sum(
            1 for blk in self.model.blocks
            if any(t.grad is not None for t in blk.named_params().values()))
        self.max_resident = max(self.max_resident, resident)
        return resident


def convergence_check(loss_history: list[float], rel_tol: float, patience: int) -> bool:
    """True iff the last `patience` relative improvements are all below rel_tol."""
    if patience < 1:
        raise ConfigError(f"patience must be >= 1, got {patience}")
    if len(loss_history) < patience + 1:
        return False
    eps = 1e-12
    tail = loss_history[-(patience + 1):]
    for prev, cur in zip(tail, tail[1:]):
        if (prev - cur) / max(prev, eps) >= rel_tol:
            return False
    return True


def _embed(model: LanguageModel, tokens: np.ndarray) -> Tensor:
    s = tokens.shape[1]
    return T.add(T.embedding(model.tok_emb, tokens),
                 T.slice_(model.pos_emb, slice(0, s)))


def _stream(model: LanguageModel, segments: np.ndarray, n_blocks: int,
            batch_size: int) -> np.ndarray:
    """Hidden states entering block `n_blocks` (no gradients retained)."""
    outs = []
    for start in range(0, segments.shape[0], batch_size):
        x = _embed(model, segments[start:start + batch_size])
        for blk in model.blocks[:n_blocks]:
            x = block_forward(blk, x)
        outs.append(x.data)
    return np.concatenate(outs, axis=0)


def collect_block_io(dense_model: LanguageModel, sparse_model: LanguageModel,
                     calib, block_index: int,
                     teacher_propagation: str = "dense",
                     batch_size: int = 8) -> BlockTargets:
    """Student inputs (sparse stream) and teacher targets (dense outputs)
    for one block, holding activations for that block only."""
    n_blocks = len(sparse_model.blocks)
    if not 0 <= block_index < n_blocks:
        raise IndexError(f"block index {block_index} out of range [0, {n_blocks})")
    segments = calib.segments if hasattr(calib, "segments") else np.asarray(calib)

    inputs = _stream(sparse_model, segments, block_index, batch_size)
    teacher_block = dense_model.blocks[block_index]
    if teacher_propagation == "self":
        targets = []
        for start in range(0, inputs.shape[0], batch_size):
            x = Tensor(inputs[start:start + batch_size])
            targets.append(block_forward(teacher_block, x).data)
        targets = np.concatenate(targets, axis=0)
    else:
        dense_in = _stream(dense_model, segments, block_index, batch_size)
        targets = []
        for start in range(0, dense_in.shape[0], batch_size):
            x = Tensor(dense_in[start:start + batch_size])
            targets.append(block_forward(teacher_block, x).data)
        targets = np.concatenate(targets, axis=0)
    return BlockTargets(inputs=inputs, targets=targets)


def dataset_loss(block: TransformerBlock, io: BlockTargets,
                 batch_size: int = 8) -> float:
    """Mean squared error over every element of the whole target set,
    accumulated in sample order."""
    total = 0.0
    for start in range(0, io.inputs.shape[0], batch_size):
        pred = block_forward(block, Tensor(io.inputs[start:start + batch_size]))
        diff = pred.data - io.targets[start:start + batch_size]
        total += float((diff * diff).sum())
    return total / io.targets.size


def _trainable_params(block: TransformerBlock, masks: dict[str, SparsityMask],
                      train_norms: bool):
    """(tensor, mask bits or None) pairs; masked linear weights always, the
    rest only when train_norms is set."""
    maskable = block.maskable_weights()
    missing = sorted(set(maskable) - set(masks))
    if missing:
        raise ContractError(f"masks missing for block weights: {missing}")
    params = [(maskable[name], masks[name].bits) for name in sorted(maskable)]
    if train_norms:
        for name, t in sorted(block.named_params().items()):
            if name not in maskable:
                params.append((t, None))
    return params


def finetune_block(block: TransformerBlock, masks: dict[str, SparsityMask],
                   io: BlockTargets, cfg: FineTuneConfig,
                   block_index: int = 0,
                   probe=None) -> tuple[TransformerBlock, BlockReport]:
    """Minimize the block reconstruction error over masked weights.

    Runs at most cfg.max_epochs training epochs with an evaluation pass
    before each; exits early once the loss plateaus (or is exactly zero).
    """
    t0 = time.perf_counter()
    params = _trainable_params(block, masks, cfg.train_norms)
    for t, _ in params:
        t.requires_grad = True
    opt = make_optimizer(cfg.optimizer, [t for t, _ in params], cfg.lr)

    n = io.inputs.shape[0]
    losses: list[float] = []
    converged = False
    epochs_run = 0
    try:
        for epoch in range(cfg.max_epochs):
            e = dataset_loss(block, io, cfg.batch_size)
            if not np.isfinite(e):
                raise NumericError("non-finite reconstruction loss",
                                   block=block_index, epoch=epoch, lr=cfg.lr)
            losses.append(e)
            if e <= _ZERO_LOSS or convergence_check(
                    losses, cfg.convergence_rel_tol, cfg.convergence_patience):
                converged = True
                break

            for start in range(0, n, cfg.batch_size):
                with Tape() as tape:
                    pred = block_forward(block, Tensor(io.inputs[start:start + cfg.batch_size]))
                    loss = T.reconstruction_loss(
                        Tensor(io.targets[start:start + cfg.batch_size]), pred)
                backward(loss, tape)
                grads = [t.grad * bits if bits is not None else t.grad
                         for t, bits in params]
                opt.step(grads)
                for t, bits in params:
                    if bits is not None:
                        t.data *= bits
                if probe is not None:
                    probe()
            epochs_run += 1
        else:
            e = dataset_loss(block, io, cfg.batch_size)
            if not np.isfinite(e):
                raise NumericError("non-finite reconstruction loss",
                                   block=block_index, epoch=cfg.max_epochs, lr=cfg.lr)
            losses.append(e)
    finally:
        for t, _ in params:
            t.requires_grad = False
            t.grad = None

    return block, BlockReport(losses=losses, epochs_run=epochs_run,
                              converged=converged,
                              seconds=time.perf_counter() - t0)


def finetune_model(dense_model: LanguageModel, sparse_model: LanguageModel,
                   masks: dict[str, SparsityMask], calib,
                   cfg: FineTuneConfig) -> tuple[LanguageModel, FineTuneReport]:
    """Fine-tune all blocks strictly in order; gradient state exists for at
    most one block at any instant (tracked in the report)."""
    needed = set(sparse_model.maskable_weights())
    missing = sorted(needed - set(masks))
    if missing:
        raise ContractError(f"mask table missing entries: {missing}")

    t0 = time.perf_counter()
    gauge = ResidencyGauge(sparse_model)
    report = FineTuneReport(config=cfg)
    for l, block in enumerate(sparse_model.blocks):
        io = collect_block_io(dense_model, sparse_model, calib, l,
                              teacher_propagation=cfg.teacher_propagation,
                              batch_size=cfg.batch_size)
        gauge.probe()
        block_masks = {name: masks[f"blocks.{l}.{name}"]
                       for name in block.maskable_weights()}
        _, block_report = finetune_block(block, block_masks, io, cfg,
                                         block_index=l, probe=gauge.probe)
        gauge.probe()
        report.blocks.append(block_report)
    report.total_seconds = time.perf_counter() - t0
    report.max_resident_blocks = gauge.max_resident
    return sparse_model, report


def block_reconstruction_errors(dense_model: LanguageModel,
                                student_model: LanguageModel, calib,
                                teacher_propagation: str = "dense",
                                batch_size: int = 8) -> list[float]:
    """Per-block reconstruction error of `student_model` against the dense
    teacher under the student propagation scheme."""
    errors = []
    for l, block in enumerate(student_model.blocks):
        io = collect_block_io(dense_model, student_model, calib, l,
                              teacher_propagation=teacher_propagation,
                              batch_size=batch_size)
        errors.append(dataset_loss(block, io, batch_size))
    return errors
