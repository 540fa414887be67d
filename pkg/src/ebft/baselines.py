"""Comparison fine-tuners.

* layerwise_lsq: exact per-row least squares on the layer reconstruction
  objective with the mask fixed. This is the certified optimum the rest of
  the test suite measures against.
* mask tuning: gradient-guided grow/prune swaps of mask positions with all
  weight values frozen, one accepted-or-reverted swap per layer per epoch.
* compare_strategies: runs {none, lsq, mask, ebft} from one initialization
  and reports perplexities plus per-block reconstruction errors.
"""

from __future__ import annotations

import time
from copy import deepcopy
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .finetune import (BlockReport, BlockTargets, FineTuneConfig,
                       block_reconstruction_errors, collect_block_io,
                       convergence_check, dataset_loss, finetune_model)
from .model import LanguageModel, TransformerBlock, block_forward, perplexity
from .pruning import Channel, NM, SparsityMask
from .tensor import Tape, Tensor, backward


@dataclass
class LsqSolveStats:
    residual_before: float
    residual_after: float
    cond_estimate: float
    ridge: float
    escalated: bool = False


def _solve_rows(w_dense: np.ndarray, gram: np.ndarray, bits: np.ndarray,
                lam: float) -> tuple[np.ndarray, float, bool]:
    """Per-row masked normal-equation solve; returns (weights, ridge used,
    escalated flag)."""
    out_dim, in_dim = w_dense.shape
    rhs_all = gram @ w_dense.T  # (in, out)
    solved = np.zeros_like(w_dense)
    ridge = lam
    escalated = False
    for r in range(out_dim):
        keep = np.flatnonzero(bits[r])
        if keep.size == 0:
            continue
        a = gram[np.ix_(keep, keep)]
        b = rhs_all[keep, r]
        lam_r = lam
        for attempt in range(8):
            try:
                sys = a + lam_r * np.eye(keep.size) if lam_r > 0 else a
                c = np.linalg.cholesky(sys)
                w = np.linalg.solve(c.T, np.linalg.solve(c, b))
                break
            except np.linalg.LinAlgError:
                escalated = True
                base = 1e-8 * np.trace(gram) / in_dim
                lam_r = base if lam_r == 0 else lam_r * 10
        else:
            raise ContractError(f"least-squares system for row {r} stays singular")
        ridge = max(ridge, lam_r)
        solved[r, keep] = w
    return solved, ridge, escalated


def layerwise_lsq(w, x, mask: SparsityMask, lam: float = 0.0
                  ) -> tuple[Tensor, LsqSolveStats]:
    """Minimize the layer reconstruction residual over weights allowed by the
    mask, exactly (per output row). Singular systems escalate to a small
    ridge automatically, recorded in the stats."""
    if lam < 0:
        raise ConfigError(f"ridge must be >= 0, got {lam}")
    w = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] != w.shape[1]:
        raise ConfigError(
            f"activation matrix {x.shape} incompatible with weight {w.shape}")
    gram = x.T @ x
    target = x @ w.T
    pruned = w * mask.bits
    solved, ridge, escalated = _solve_rows(w, gram, mask.bits, lam)

    # a ridge-escalated solve can land above an already-optimal start; never
    # return a row worse than the pruned baseline
    sq_pruned = ((target - x @ pruned.T) ** 2).sum(axis=0)
    sq_solved = ((target - x @ solved.T) ** 2).sum(axis=0)
    worse = sq_solved > sq_pruned
    if worse.any():
        solved[worse] = pruned[worse]
        sq_solved = np.where(worse, sq_pruned, sq_solved)

    res_before = float(np.sqrt(sq_pruned.sum()))
    res_after = float(np.sqrt(sq_solved.sum()))
    stats = LsqSolveStats(residual_before=res_before, residual_after=res_after,
                          cond_estimate=float(np.linalg.cond(gram)),
                          ridge=ridge, escalated=escalated)
    return Tensor(solved), stats


def _capture_layer_inputs(block: TransformerBlock, inputs: np.ndarray,
                          batch_size: int) -> dict[str, np.ndarray]:
    chunks: dict[str, list[np.ndarray]] = {}
    for start in range(0, inputs.shape[0], batch_size):
        cap: dict = {}
        block_forward(block, Tensor(inputs[start:start + batch_size]), capture=cap)
        for name, x in cap.items():
            chunks.setdefault(name, []).append(x.reshape(-1, x.shape[-1]))
    return {name: np.concatenate(parts, axis=0) for name, parts in chunks.items()}


def lsq_finetune_model(dense_model: LanguageModel, sparse_model: LanguageModel,
                       masks: dict[str, SparsityMask], calib,
                       lam: float = 0.0, batch_size: int = 8
                       ) -> tuple[LanguageModel, dict[str, LsqSolveStats]]:
    """Replace every maskable layer with its least-squares reconstruction,
    block by block under the same student propagation as the block-wise
    fine-tuner. Masks are untouched."""
    stats: dict[str, LsqSolveStats] = {}
    for l, block in enumerate(sparse_model.blocks):
        io = collect_block_io(dense_model, sparse_model, calib, l,
                              batch_size=batch_size)
        layer_x = _capture_layer_inputs(block, io.inputs, batch_size)
        dense_weights = dense_model.blocks[l].maskable_weights()
        for name, w_sparse in block.maskable_weights().items():
            full = f"blocks.{l}.{name}"
            solved, st = layerwise_lsq(dense_weights[name], layer_x[name],
                                       masks[full], lam)
            w_sparse.data = solved.data
            stats[full] = st
    return sparse_model, stats


def _layer_feature_norms(x: np.ndarray) -> np.ndarray:
    return np.sqrt((x * x).sum(axis=0))


def _propose_swap(pattern, bits: np.ndarray, grad: np.ndarray,
                  orig: np.ndarray, xnorm: np.ndarray):
    """Pick (grow, prune) index pairs for one swap, or None when the pattern
    leaves no legal pair. Grow favors the most negative first-order loss
    change; prune removes the lowest activation-aware importance."""
    grow_proxy = grad * orig
    importance = np.abs(orig) * xnorm
    pruned = bits == 0.0
    kept = ~pruned
    if not pruned.any() or not kept.any():
        return None

    if isinstance(pattern, Channel):
        col_pruned = pruned.all(axis=0)
        col_kept = ~col_pruned
        if not col_pruned.any() or not col_kept.any():
            return None
        grow_col = int(np.argmin(np.where(col_pruned, grow_proxy.sum(axis=0), np.inf)))
        prune_col = int(np.argmin(np.where(col_kept, importance.sum(axis=0), np.inf)))
        return ("col", grow_col, prune_col)

    flat_proxy = np.where(pruned, grow_proxy, np.inf).ravel()
    grow_idx = int(np.argmin(flat_proxy))
    if isinstance(pattern, NM):
        m = pattern.m
        r, c = np.unravel_index(grow_idx, bits.shape)
        group = slice((c // m) * m, (c // m) * m + m)
        row_imp = np.where(kept[r, group], importance[r, group], np.inf)
        if not np.isfinite(row_imp).any():
            return None
        prune_idx = int(np.ravel_multi_index((r, group.start + int(np.argmin(row_imp))),
                                             bits.shape))
    else:
        prune_idx = int(np.argmin(np.where(kept, importance, np.inf).ravel()))
    return ("flat", grow_idx, prune_idx)


def _apply_swap(bits: np.ndarray, swap) -> None:
    kind, grow, prune = swap
    if kind == "col":
        bits[:, grow] = 1.0
        bits[:, prune] = 0.0
    else:
        bits.flat[grow] = 1.0
        bits.flat[prune] = 0.0


def _block_grads(block: TransformerBlock, io: BlockTargets,
                 batch_size: int) -> dict[str, np.ndarray]:
    """Full-dataset loss gradient for every maskable weight, accumulated over
    mini-batches in sample order."""
    weights = block.maskable_weights()
    for t in weights.values():
        t.requires_grad = True
    total_elems = io.targets.size
    acc = {name: np.zeros_like(t.data) for name, t in weights.items()}
    try:
        for start in range(0, io.inputs.shape[0], batch_size):
            tgt = io.targets[start:start + batch_size]
            with Tape() as tape:
                pred = block_forward(block, Tensor(io.inputs[start:start + batch_size]))
                loss = T.reconstruction_loss(Tensor(tgt), pred)
            backward(loss, tape)
            frac = tgt.size / total_elems
            for name, t in weights.items():
                acc[name] += frac * t.grad
    finally:
        for t in weights.values():
            t.requires_grad = False
            t.grad = None
    return acc


def mask_tune_block(block: TransformerBlock, masks: dict[str, SparsityMask],
                    io: BlockTargets, cfg: FineTuneConfig
                    ) -> tuple[dict[str, SparsityMask], BlockReport]:
    """Reselect mask positions with weight values frozen.

    `block` must carry the original (dense) weight values; the tuned mask is
    applied at forward time through a working copy. One swap pair per layer
    per epoch, accepted only when the measured block loss decreases.
    """
    t0 = time.perf_counter()
    orig = {name: t.data.copy() for name, t in block.maskable_weights().items()}
    new_masks = {name: SparsityMask(m.pattern, m.bits.copy(), m.owner)
                 for name, m in masks.items()}

    work = deepcopy(block)
    work_weights = work.maskable_weights()

    def _sync(name_only=None):
        for name, w in work_weights.items():
            if name_only is None or name == name_only:
                w.data = orig[name] * new_masks[name].bits

    _sync()
    losses = [dataset_loss(work, io, cfg.batch_size)]
    converged = False
    epochs_run = 0
    for epoch in range(cfg.max_epochs):
        if losses[-1] <= 0.0 or convergence_check(
                losses, cfg.convergence_rel_tol, cfg.convergence_patience):
            converged = True
            break
        grads = _block_grads(work, io, cfg.batch_size)
        layer_x = _capture_layer_inputs(work, io.inputs, cfg.batch_size)
        current = losses[-1]
        for name in sorted(new_masks):
            mask = new_masks[name]
            swap = _propose_swap(mask.pattern, mask.bits, grads[name],
                                 orig[name], _layer_feature_norms(layer_x[name]))
            if swap is None:
                continue
            saved = mask.bits.copy()
            _apply_swap(mask.bits, swap)
            _sync(name)
            trial = dataset_loss(work, io, cfg.batch_size)
            if trial < current:
                current = trial
            else:
                mask.bits[...] = saved
                _sync(name)
        losses.append(current)
        epochs_run += 1

    report = BlockReport(losses=losses, epochs_run=epochs_run,
                         converged=converged, seconds=time.perf_counter() - t0)
    return new_masks, report


def mask_tune_model(dense_model: LanguageModel, masks: dict[str, SparsityMask],
                    calib, cfg: FineTuneConfig
                    ) -> tuple[LanguageModel, dict[str, SparsityMask], list[BlockReport]]:
    """Mask tuning over all blocks; returns the re-masked sparse model, the
    tuned mask table, and per-block reports."""
    student = dense_model.copy()
    tuned: dict[str, SparsityMask] = dict(masks)
    for name, w in student.maskable_weights().items():
        w.data = w.data * masks[name].bits

    reports = []
    for l, block in enumerate(student.blocks):
        io = collect_block_io(dense_model, student, calib, l,
                              batch_size=cfg.batch_size)
        dense_block = dense_model.blocks[l]
        block_masks = {name: masks[f"blocks.{l}.{name}"]
                       for name in dense_block.maskable_weights()}
        new_masks, rep = mask_tune_block(deepcopy(dense_block), block_masks, io, cfg)
        reports.append(rep)
        for name, m in new_masks.items():
            full = f"blocks.{l}.{name}"
            tuned[full] = SparsityMask(m.pattern, m.bits, full)
            block.maskable_weights()[name].data = \
                dense_block.maskable_weights()[name].data * m.bits
    return student, tuned, reports


@dataclass
class StrategyRow:
    name: str
    perplexity: float
    per_block_loss: list[float]
    seconds: float


@dataclass
class ComparisonReport:
    rows: list[StrategyRow] = field(default_factory=list)
    config: Optional[FineTuneConfig] = None

    def to_json_dict(self) -> dict:
        return {"config": asdict(self.config) if self.config else None,
                "strategies": [asdict(r) for r in self.rows]}


def compare_strategies(dense_model: LanguageModel, sparse_model: LanguageModel,
                       masks: dict[str, SparsityMask], calib,
                       eval_tokens: np.ndarray, cfg: FineTuneConfig,
                       eval_seq_len: int = 128) -> ComparisonReport:
    """Run {none, lsq, mask, ebft} from the same initialization; purely
    observational (no ordering asserted)."""
    report = ComparisonReport(config=cfg)

    def _row(name: str, model: LanguageModel, t0: float) -> StrategyRow:
        ppl = perplexity(model, eval_tokens, eval_seq_len)
        errs = block_reconstruction_errors(dense_model, model, calib,
                                           batch_size=cfg.batch_size)
        return StrategyRow(name=name, perplexity=ppl, per_block_loss=errs,
                           seconds=time.perf_counter() - t0)

    t0 = time.perf_counter()
    report.rows.append(_row("none", sparse_model, t0))

    t0 = time.perf_counter()
    lsq_model, _ = lsq_finetune_model(dense_model, sparse_model.copy(), masks, calib,
                                      batch_size=cfg.batch_size)
    report.rows.append(_row("lsq", lsq_model, t0))

    t0 = time.perf_counter()
    mask_model, _, _ = mask_tune_model(dense_model, masks, calib, cfg)
    report.rows.append(_row("mask", mask_model, t0))

    t0 = time.perf_counter()
    ebft_model, _ = finetune_model(dense_model, sparse_model.copy(), masks, calib, cfg)
    report.rows.append(_row("ebft", ebft_model, t0))
    return report
