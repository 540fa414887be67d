"""Mask construction (unstructured / N:M / channel) and pruning criteria.

Weights are (out, in); masks follow the same orientation, so "input
dimension" means the last axis and a channel is one input column. All tie
breaks are by flat index, which keeps mask builds reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .model import LanguageModel, model_forward
from .tensor import Tensor


@dataclass(frozen=True)
class Unstructured:
    sparsity: float

    def __str__(self):
        return f"unstructured(S={self.sparsity})"


@dataclass(frozen=True)
class NM:
    n: int
    m: int

    def __str__(self):
        return f"{self.n}:{self.m}"


@dataclass(frozen=True)
class Channel:
    sparsity: float

    def __str__(self):
        return f"channel(S={self.sparsity})"


Pattern = Union[Unstructured, NM, Channel]


@dataclass
class SparsityMask:
    pattern: Pattern
    bits: np.ndarray  # float64 zeros/ones, same shape as the owning weight
    owner: str = ""

    @property
    def sparsity(self) -> float:
        return 1.0 - float(self.bits.mean())


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _check_scores(scores: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(scores)) or np.any(scores < 0):
        raise ContractError("importance scores must be finite and nonnegative")
    return scores


def score_magnitude(w) -> np.ndarray:
    """Importance = |w| elementwise."""
    return np.abs(_as_array(w))


def score_activation_aware(w, x) -> np.ndarray:
    """Importance = |w_ij| * l2 norm of calibration input feature j."""
    w, x = _as_array(w), _as_array(x)
    if x.ndim != 2 or x.shape[0] < 1:
        raise DimensionError("activation matrix must be (n_rows, in) with n >= 1", x.shape)
    if x.shape[1] != w.shape[-1]:
        raise DimensionError("activation feature count != weight input dim", w.shape, x.shape)
    return scores_from_feature_norms(w, np.sqrt((x * x).sum(axis=0)))


def scores_from_feature_norms(w, feature_norms: np.ndarray) -> np.ndarray:
    w = _as_array(w)
    feature_norms = np.asarray(feature_norms, dtype=np.float64)
    if feature_norms.shape != (w.shape[-1],):
        raise DimensionError("feature norm length != weight input dim",
                             w.shape, feature_norms.shape)
    return np.abs(w) * feature_norms


def build_mask_unstructured(scores: np.ndarray, sparsity: float,
                            owner: str = "") -> SparsityMask:
    """Zero exactly round(S * total) lowest-scoring entries, lowest flat
    index first on ties."""
    if not 0.0 <= sparsity < 1.0:
        raise ConfigError(f"sparsity must be in [0, 1), got {sparsity}")
    scores = _check_scores(np.asarray(scores, dtype=np.float64))
    flat = scores.ravel()
    k = _round_half_up(sparsity * flat.size)
    bits = np.ones(flat.size)
    if k:
        bits[np.argsort(flat, kind="stable")[:k]] = 0.0
    return SparsityMask(Unstructured(sparsity), bits.reshape(scores.shape), owner)


def build_mask_nm(scores: np.ndarray, n: int, m: int, owner: str = "") -> SparsityMask:
    """Keep the n highest-scoring entries in every group of m along the input
    dimension; lower index wins ties."""
    if not 0 < n < m:
        raise ConfigError(f"need 0 < N < M, got {n}:{m}")
    scores = _check_scores(np.asarray(scores, dtype=np.float64))
    in_dim = scores.shape[-1]
    if in_dim % m != 0:
        raise ConfigError(f"group size {m} does not divide input dimension {in_dim}")
    groups = scores.reshape(-1, in_dim // m, m)
    keep = np.argsort(-groups, axis=-1, kind="stable")[..., :n]
    bits = np.zeros_like(groups)
    np.put_along_axis(bits, keep, 1.0, axis=-1)
    return SparsityMask(NM(n, m), bits.reshape(scores.shape), owner)


def build_mask_channel(w, x=None, sparsity: float = 0.0, owner: str = "",
                       feature_norms: Optional[np.ndarray] = None) -> SparsityMask:
    """Zero the round(S * n_cols) lowest-scoring whole input columns. Column
    score is the column l2 norm of w, or the activation-aware column sum when
    calibration inputs are available."""
    if not 0.0 <= sparsity < 1.0:
        raise ConfigError(f"sparsity must be in [0, 1), got {sparsity}")
    w = _as_array(w)
    if feature_norms is not None:
        col_scores = scores_from_feature_norms(w, feature_norms).sum(axis=0)
    elif x is not None:
        col_scores = score_activation_aware(w, x).sum(axis=0)
    else:
        col_scores = np.sqrt((w * w).sum(axis=0))
    k = _round_half_up(sparsity * w.shape[-1])
    cols = np.ones(w.shape[-1])
    if k:
        cols[np.argsort(col_scores, kind="stable")[:k]] = 0.0
    bits = np.broadcast_to(cols, w.shape).copy()
    return SparsityMask(Channel(sparsity), bits, owner)


def build_mask(scores_or_w, pattern: Pattern, owner: str = "",
               feature_norms: Optional[np.ndarray] = None) -> SparsityMask:
    if isinstance(pattern, Unstructured):
        return build_mask_unstructured(scores_or_w, pattern.sparsity, owner)
    if isinstance(pattern, NM):
        return build_mask_nm(scores_or_w, pattern.n, pattern.m, owner)
    if isinstance(pattern, Channel):
        return build_mask_channel(scores_or_w, sparsity=pattern.sparsity,
                                  owner=owner, feature_norms=feature_norms)
    raise ConfigError(f"unknown mask pattern {pattern!r}")


def apply_mask(w: Tensor, mask: SparsityMask) -> Tensor:
    """Elementwise product; pruned entries become exactly 0.0."""
    if w.shape != mask.bits.shape:
        raise DimensionError("mask shape mismatch", w.shape, mask.bits.shape)
    return Tensor(w.data * mask.bits)


def gather_feature_norms(model: LanguageModel, segments: np.ndarray,
                         batch_size: int = 8) -> dict[str, np.ndarray]:
    """Per-layer l2 norms of every input feature, accumulated over all
    calibration token positions with dense forwards."""
    ssq: dict[str, np.ndarray] = {}
    for start in range(0, segments.shape[0], batch_size):
        capture: dict = {}
        model_forward(model, segments[start:start + batch_size], capture=capture)
        for block_key, layers in capture.items():
            for layer_key, x in layers.items():
                name = f"{block_key}.{layer_key}"
                flat = x.reshape(-1, x.shape[-1])
                contrib = (flat * flat).sum(axis=0)
                ssq[name] = ssq.get(name, 0.0) + contrib
    return {name: np.sqrt(v) for name, v in ssq.items()}


def prune_model(model: LanguageModel, criterion: str, pattern: Pattern,
                calib=None) -> tuple[LanguageModel, dict[str, SparsityMask], dict[str, float]]:
    """Mask every maskable linear layer of a copy of `model`.

    criterion: "magnitude" or "activation" (the latter needs a calibration
    set). Returns (pruned model, masks keyed by weight name, achieved
    per-layer sparsity).
    """
    if criterion not in ("magnitude", "activation"):
        raise ConfigError(f"unknown criterion {criterion!r}")
    if criterion == "activation" and calib is None:
        raise ConfigError("activation-aware pruning requires a calibration set")
    weights = model.maskable_weights()
    if isinstance(pattern, NM):
        for name, w in weights.items():
            if w.shape[-1] % pattern.m != 0:
                raise ConfigError(
                    f"group size {pattern.m} does not divide input dimension "
                    f"{w.shape[-1]} of layer {name}")

    norms: dict[str, np.ndarray] = {}
    if criterion == "activation":
        segments = calib.segments if hasattr(calib, "segments") else np.asarray(calib)
        norms = gather_feature_norms(model, segments)

    pruned = model.copy()
    masks: dict[str, SparsityMask] = {}
    report: dict[str, float] = {}
    for name, w in pruned.maskable_weights().items():
        if criterion == "activation":
            scores = scores_from_feature_norms(w, norms[name])
            mask = build_mask(scores if not isinstance(pattern, Channel) else w,
                              pattern, owner=name, feature_norms=norms.get(name))
        else:
            scores = score_magnitude(w)
            mask = build_mask(scores if not isinstance(pattern, Channel) else w,
                              pattern, owner=name)
        w.data = apply_mask(w, mask).data
        masks[name] = mask
        report[name] = mask.sparsity
    return pruned, masks, report
