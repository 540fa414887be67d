"""Decoder-only toy transformer: pre-norm residual blocks, byte-scale vocab.

Blocks follow the pre-norm layout: x + MHA(LN(x)), then + MLP(LN(.)).
Linear weights are stored (out, in) so pruning can treat columns as input
features everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, DimensionError, VocabularyError
from .tensor import Tensor

NEG_INF = -1e30  # finite stand-in for -inf so masked logits never produce NaN


@dataclass
class ModelConfig:
    vocab_size: int = 512
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    max_seq_len: int = 256
    mlp_gated: bool = False
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"n_heads {self.n_heads} must divide d_model {self.d_model}")
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "max_seq_len"):
            if getattr(self, name) < (0 if name == "n_layers" else 1):
                raise ConfigError(f"{name} out of range: {getattr(self, name)}")

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model


class TransformerBlock:
    """Parameters of one decoder block (four attention + two/three MLP linears)."""

    def __init__(self, cfg: ModelConfig):
        d, f = cfg.d_model, cfg.d_ff
        self.n_heads = cfg.n_heads
        self.ln_eps = cfg.ln_eps
        z = lambda *s: Tensor(np.zeros(s))
        self.ln1_gamma, self.ln1_beta = Tensor(np.ones(d)), z(d)
        self.ln2_gamma, self.ln2_beta = Tensor(np.ones(d)), z(d)
        self.wq, self.bq = z(d, d), z(d)
        self.wk, self.bk = z(d, d), z(d)
        self.wv, self.bv = z(d, d), z(d)
        self.wo, self.bo = z(d, d), z(d)
        self.w_up, self.b_up = z(f, d), z(f)
        self.w_gate: Optional[Tensor] = z(f, d) if cfg.mlp_gated else None
        self.w_down, self.b_down = z(d, f), z(d)

    def named_params(self) -> dict[str, Tensor]:
        out = {
            "ln1.gamma": self.ln1_gamma, "ln1.beta": self.ln1_beta,
            "attn.wq": self.wq, "attn.bq": self.bq,
            "attn.wk": self.wk, "attn.bk": self.bk,
            "attn.wv": self.wv, "attn.bv": self.bv,
            "attn.wo": self.wo, "attn.bo": self.bo,
            "ln2.gamma": self.ln2_gamma, "ln2.beta": self.ln2_beta,
            "mlp.w_up": self.w_up, "mlp.b_up": self.b_up,
            "mlp.w_down": self.w_down, "mlp.b_down": self.b_down,
        }
        if self.w_gate is not None:
            out["mlp.w_gate"] = self.w_gate
        return out

    def maskable_weights(self) -> dict[str, Tensor]:
        """Weight matrices eligible for sparsity masks; biases and LN excluded."""
        out = {
            "attn.wq": self.wq, "attn.wk": self.wk,
            "attn.wv": self.wv, "attn.wo": self.wo,
            "mlp.w_up": self.w_up, "mlp.w_down": self.w_down,
        }
        if self.w_gate is not None:
            out["mlp.w_gate"] = self.w_gate
        return out


class LanguageModel:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        V, d, s = cfg.vocab_size, cfg.d_model, cfg.max_seq_len
        self.tok_emb = Tensor(np.zeros((V, d)))
        self.pos_emb = Tensor(np.zeros((s, d)))
        self.blocks = [TransformerBlock(cfg) for _ in range(cfg.n_layers)]
        self.ln_f_gamma = Tensor(np.ones(d))
        self.ln_f_beta = Tensor(np.zeros(d))
        self.head_w = Tensor(np.zeros((V, d)))

    def named_tensors(self) -> dict[str, Tensor]:
        out = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb,
               "ln_f.gamma": self.ln_f_gamma, "ln_f.beta": self.ln_f_beta,
               "head.w": self.head_w}
        for i, blk in enumerate(self.blocks):
            for name, t in blk.named_params().items():
                out[f"blocks.{i}.{name}"] = t
        return out

    def maskable_weights(self) -> dict[str, Tensor]:
        out = {}
        for i, blk in enumerate(self.blocks):
            for name, t in blk.maskable_weights().items():
                out[f"blocks.{i}.{name}"] = t
        return out

    def copy(self) -> "LanguageModel":
        other = LanguageModel(self.cfg)
        src, dst = self.named_tensors(), other.named_tensors()
        for name, t in src.items():
            dst[name].data = t.data.copy()
        return other

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.named_tensors().values():
            t.requires_grad = flag
            if not flag:
                t.grad = None


def _linear(x: Tensor, w: Tensor, b: Optional[Tensor],
            capture: Optional[dict], name: str) -> Tensor:
    if capture is not None:
        capture[name] = x.data
    out = T.matmul(x, T.transpose(w, (1, 0)))
    return T.add(out, b) if b is not None else out


def _causal_bias(s: int) -> Tensor:
    return Tensor(np.triu(np.full((s, s), NEG_INF), k=1))


def block_forward(block: TransformerBlock, x: Tensor, causal: bool = True,
                  capture: Optional[dict] = None) -> Tensor:
    """One pre-norm residual block. `capture`, when given, collects the raw
    input activations of every linear layer under its weight name."""
    b, s, d = x.shape
    nh = block.n_heads
    hd = d // nh

    h = T.layer_norm(x, block.ln1_gamma, block.ln1_beta, block.ln_eps)
    q = _linear(h, block.wq, block.bq, capture, "attn.wq")
    k = _linear(h, block.wk, block.bk, capture, "attn.wk")
    v = _linear(h, block.wv, block.bv, capture, "attn.wv")
    q = T.transpose(T.reshape(q, (b, s, nh, hd)), (0, 2, 1, 3))
    k = T.transpose(T.reshape(k, (b, s, nh, hd)), (0, 2, 1, 3))
    v = T.transpose(T.reshape(v, (b, s, nh, hd)), (0, 2, 1, 3))
    att = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    if causal:
        att = T.add(att, _causal_bias(s))
    att = T.softmax(att, axis=-1)
    o = T.matmul(att, v)
    o = T.reshape(T.transpose(o, (0, 2, 1, 3)), (b, s, d))
    o = _linear(o, block.wo, block.bo, capture, "attn.wo")
    x = T.add(x, o)

    h = T.layer_norm(x, block.ln2_gamma, block.ln2_beta, block.ln_eps)
    if block.w_gate is not None:
        gate = T.silu(_linear(h, block.w_gate, None, capture, "mlp.w_gate"))
        up = _linear(h, block.w_up, block.b_up, capture, "mlp.w_up")
        hidden = T.mul(gate, up)
    else:
        hidden = T.silu(_linear(h, block.w_up, block.b_up, capture, "mlp.w_up"))
    down = _linear(hidden, block.w_down, block.b_down, capture, "mlp.w_down")
    return T.add(x, down)


def model_forward(model: LanguageModel, tokens: np.ndarray,
                  capture: Optional[dict] = None) -> Tensor:
    """Logits (b, s, V) for an int token batch (b, s)."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise DimensionError("model_forward expects (batch, seq) tokens", tokens.shape)
    b, s = tokens.shape
    cfg = model.cfg
    if s > cfg.max_seq_len:
        raise DimensionError(
            f"sequence length {s} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        bad = tokens.flat[np.argmax((tokens < 0) | (tokens >= cfg.vocab_size))]
        raise VocabularyError(f"token id {bad} outside vocabulary of size {cfg.vocab_size}")

    x = T.add(T.embedding(model.tok_emb, tokens),
              T.slice_(model.pos_emb, slice(0, s)))
    for i, blk in enumerate(model.blocks):
        cap = None
        if capture is not None:
            cap = capture.setdefault(f"blocks.{i}", {})
        x = block_forward(blk, x, causal=True, capture=cap)
    x = T.layer_norm(x, model.ln_f_gamma, model.ln_f_beta, cfg.ln_eps)
    return T.matmul(x, T.transpose(model.head_w, (1, 0)))


def perplexity(model: LanguageModel, tokens: np.ndarray, seq_len: int,
               batch_size: int = 8) -> float:
    """exp(mean next-token NLL) over non-overlapping windows of seq_len.

    The final partial window is dropped; window order is fixed so the result
    is deterministic.
    """
    tokens = np.asarray(tokens).ravel()
    if tokens.size <= seq_len:
        raise DataError(
            f"corpus of {tokens.size} tokens is shorter than one window of {seq_len}")
    n_windows = tokens.size // seq_len
    windows = tokens[:n_windows * seq_len].reshape(n_windows, seq_len)

    total_nll = 0.0
    total_count = 0
    for start in range(0, n_windows, batch_size):
        batch = windows[start:start + batch_size]
        logits = model_forward(model, batch).data
        m = logits.max(axis=-1, keepdims=True)
        lse = (m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))).squeeze(-1)
        targets = batch[:, 1:]
        picked = np.take_along_axis(logits[:, :-1, :], targets[..., None], axis=-1).squeeze(-1)
        total_nll += float((lse[:, :-1] - picked).sum())
        total_count += targets.size
    return float(np.exp(total_nll / total_count))


def init_model(cfg: ModelConfig, seed: int = 0, init_std: float = 0.02) -> LanguageModel:
    """Seeded gaussian init for embeddings and weight matrices; biases stay
    zero and layer norms stay identity."""
    model = LanguageModel(cfg)
    rng = np.random.default_rng(seed)
    for name, t in sorted(model.named_tensors().items()):
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("w") or name in ("tok_emb", "pos_emb"):
            t.data = rng.normal(0.0, init_std, size=t.shape)
    return model
