"""Corpus handling: byte tokenization, calibration sampling, eval splits.

The tokenizer is byte-level (ids 0..255) so detokenize(tokenize(x)) == x for
arbitrary input and no external vocabulary is needed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from .errors import ConfigError, DataError

BYTE_VOCAB = 256
TOKENIZER_ID = "bytes-v1"


@dataclass(frozen=True)
class Provenance:
    source: str
    tokenizer: str
    content_hash: str


@dataclass
class Corpus:
    ids: np.ndarray  # int64 token ids
    vocab_size: int
    provenance: Provenance

    def __len__(self):
        return int(self.ids.size)


@dataclass
class CalibrationSet:
    segments: np.ndarray  # (n_samples, seq_len) int64
    n_samples: int
    seq_len: int
    seed: int


def tokenize(data: bytes, source: str = "<bytes>") -> Corpus:
    if not data:
        raise DataError("cannot tokenize empty input")
    ids = np.frombuffer(data, dtype=np.uint8).astype(np.int64)
    digest = hashlib.sha256(data).hexdigest()
    return Corpus(ids, BYTE_VOCAB, Provenance(source, TOKENIZER_ID, digest))


def detokenize(corpus: Corpus) -> bytes:
    return corpus.ids.astype(np.uint8).tobytes()


def read_corpus(path: Union[str, Path]) -> Corpus:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read corpus {path}: {e}")
    return tokenize(data, source=str(path))


def cache_corpus(corpus: Corpus, path: Union[str, Path]) -> None:
    """Binary corpus cache: token ids plus provenance for fast reload."""
    np.savez(path, ids=corpus.ids, vocab_size=corpus.vocab_size,
             source=corpus.provenance.source,
             tokenizer=corpus.provenance.tokenizer,
             content_hash=corpus.provenance.content_hash)


def load_cached_corpus(path: Union[str, Path],
                       expected_hash: Union[str, None] = None) -> Corpus:
    try:
        with np.load(path) as blob:
            corpus = Corpus(blob["ids"].astype(np.int64),
                            int(blob["vocab_size"]),
                            Provenance(str(blob["source"]), str(blob["tokenizer"]),
                                       str(blob["content_hash"])))
    except (OSError, KeyError, ValueError) as e:
        raise DataError(f"cannot load corpus cache {path}: {e}")
    if expected_hash is not None and corpus.provenance.content_hash != expected_hash:
        raise DataError(
            f"corpus cache {path} is stale: content hash "
            f"{corpus.provenance.content_hash} != expected {expected_hash}")
    return corpus


def sample_calibration(corpus: Corpus, n_samples: int, seq_len: int,
                       seed: int) -> CalibrationSet:
    """Seeded uniform windows of exactly seq_len tokens, start offsets drawn
    without replacement whenever the corpus has enough distinct offsets."""
    if n_samples < 1:
        raise ConfigError(f"n_samples must be >= 1, got {n_samples}")
    if len(corpus) < seq_len:
        raise DataError(
            f"corpus has {len(corpus)} tokens but needs at least {seq_len}")
    n_starts = len(corpus) - seq_len + 1
    rng = np.random.default_rng(seed)
    starts = rng.choice(n_starts, size=n_samples, replace=n_samples > n_starts)
    segments = np.stack([corpus.ids[s:s + seq_len] for s in starts])
    return CalibrationSet(segments, n_samples, seq_len, seed)


def split_eval(corpus: Corpus, fraction: float, seed: int = 0) -> tuple[Corpus, Corpus]:
    """Contiguous split: the final `fraction` of tokens become the eval
    corpus, the rest the train corpus. `seed` is accepted for interface
    symmetry; the split itself is deterministic."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"eval fraction must be in (0, 1), got {fraction}")
    n_eval = int(np.floor(fraction * len(corpus) + 0.5))
    n_eval = min(max(n_eval, 1), len(corpus) - 1)
    cut = len(corpus) - n_eval
    src = corpus.provenance

    def _sub(ids: np.ndarray, tag: str) -> Corpus:
        digest = hashlib.sha256(ids.astype(np.uint8).tobytes()).hexdigest()
        return Corpus(ids.copy(), corpus.vocab_size,
                      Provenance(f"{src.source}#{tag}", src.tokenizer, digest))

    return _sub(corpus.ids[:cut], "train"), _sub(corpus.ids[cut:], "eval")


def calibration_sweep(corpus: Corpus, sizes: Sequence[int],
                      run_fn: Callable[[CalibrationSet], float],
                      seq_len: int, seed: int) -> list[dict]:
    """Run the supplied pipeline once per calibration size (shared seed,
    independent draws) and collect (size, perplexity) rows."""
    sizes = list(sizes)
    if sizes != sorted(sizes):
        raise ConfigError(f"sweep sizes must be ascending, got {sizes}")
    rows = []
    for n in sizes:
        calib = sample_calibration(corpus, n, seq_len, seed)
        rows.append({"size": int(n), "perplexity": float(run_fn(calib)), "seed": int(seed)})
    return rows


def synthetic_text(n_bytes: int, seed: int = 0, n_words: int = 48,
                   branching: int = 4, chain_p: float = 0.92) -> bytes:
    """Deterministic toy corpus: a seeded first-order word chain rendered as
    sentences. Low-entropy by construction so a small byte model can learn it
    quickly; `branching` and `chain_p` control how predictable it is."""
    rng = np.random.default_rng(seed)
    letters = "abcdefghijklmnopqrstuvwxyz"
    words = ["".join(letters[i] for i in rng.integers(0, 26, size=rng.integers(3, 9)))
             for _ in range(n_words)]

    base_p = 1.0 / np.arange(1, n_words + 1) ** 1.2
    base_p /= base_p.sum()
    succ = [rng.choice(n_words, size=branching, replace=False) for _ in range(n_words)]
    succ_p = 1.0 / np.arange(1, branching + 1)
    succ_p /= succ_p.sum()

    pieces: list[str] = []
    total = 0
    sentences = 0
    word = int(rng.choice(n_words, p=base_p))
    while total < n_bytes:
        length = int(rng.integers(4, 15))
        toks = []
        for _ in range(length):
            word = int(rng.choice(succ[word], p=succ_p)) if rng.random() < chain_p \
                else int(rng.choice(n_words, p=base_p))
            toks.append(words[word])
        sentence = " ".join(toks).capitalize() + ". "
        sentences += 1
        if sentences % 8 == 0:
            sentence = sentence.rstrip() + "\n"
        pieces.append(sentence)
        total += len(sentence)
    return "".join(pieces).encode("ascii")[:n_bytes]
