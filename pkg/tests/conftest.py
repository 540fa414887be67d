import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from ebft.checkpoint import load_model, save_checkpoint
from ebft.data import sample_calibration, split_eval, synthetic_text, tokenize
from ebft.model import ModelConfig, init_model
from ebft.train import PretrainConfig, pretrain

# Settings for the shared desk-scale model: V=512, d=128, L=4 teacher trained
# for a few minutes on a synthetic byte corpus. The corpus is deliberately
# memorization-heavy (many word bigrams) so 50% pruning does measurable damage.
TOY = {
    "corpus_bytes": 160_000,
    "corpus_seed": 11,
    "corpus_kwargs": {"n_words": 64, "branching": 4, "chain_p": 0.9},
    "model_seed": 0,
    "eval_fraction": 0.1,
    "pretrain": {"lr": 1.2e-3, "epochs": 6, "batch_size": 16, "seq_len": 128,
                 "seed": 0},
}

CACHE_DIR = Path(__file__).resolve().parent.parent / ".cache-tests"


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tiny_config(**overrides) -> ModelConfig:
    base = dict(vocab_size=64, d_model=16, n_layers=2, n_heads=2, max_seq_len=32)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return init_model(tiny_config(), seed=0)


@pytest.fixture(scope="session")
def toy_setup():
    """(dense model, train corpus, eval corpus) at the full toy scale.

    Pretraining takes a few minutes, so the result is cached on disk keyed by
    the settings; delete .cache-tests/ to force a retrain.
    """
    key = hashlib.sha256(json.dumps(TOY, sort_keys=True).encode()).hexdigest()[:16]
    cache = CACHE_DIR / f"toy-{key}"
    corpus = tokenize(synthetic_text(TOY["corpus_bytes"], TOY["corpus_seed"],
                                     **TOY["corpus_kwargs"]),
                      source="synthetic")
    train, eval_corpus = split_eval(corpus, TOY["eval_fraction"])
    ckpt_path = cache / "model.ckpt"
    if ckpt_path.exists():
        model, _ = load_model(ckpt_path)
    else:
        model = init_model(ModelConfig(), seed=TOY["model_seed"])
        pretrain(model, train, PretrainConfig(**TOY["pretrain"]))
        cache.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, None, ckpt_path)
    return model, train, eval_corpus


@pytest.fixture(scope="session")
def toy_calib(toy_setup):
    _, train, _ = toy_setup
    return sample_calibration(train, 64, 128, seed=1)
