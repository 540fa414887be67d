import numpy as np
import pytest

from conftest import tiny_config
from ebft.data import split_eval, synthetic_text, tokenize
from ebft.errors import DataError, NumericError
from ebft.model import init_model, perplexity
from ebft.train import PretrainConfig, pretrain


def _corpus(n=20_000, seed=17):
    return tokenize(synthetic_text(n, seed=seed), source="synthetic")


def test_pretraining_lowers_eval_perplexity():
    train, eval_corpus = split_eval(_corpus(), 0.1)
    cfg = tiny_config(vocab_size=256, d_model=32)
    model = init_model(cfg, seed=0)
    before = perplexity(model, eval_corpus.ids, 32)
    report = pretrain(model, train, PretrainConfig(epochs=2, batch_size=8,
                                                   seq_len=32, seed=0))
    after = perplexity(model, eval_corpus.ids, 32)
    assert report.epoch_losses[-1] < report.epoch_losses[0]
    assert after < before


def test_pretraining_is_deterministic():
    train, _ = split_eval(_corpus(), 0.1)
    cfg = tiny_config(vocab_size=256, d_model=16)
    weights = []
    for _ in range(2):
        model = init_model(cfg, seed=1)
        pretrain(model, train, PretrainConfig(epochs=1, batch_size=8,
                                              seq_len=32, seed=3))
        weights.append({n: t.data.copy() for n, t in model.named_tensors().items()})
    for name in weights[0]:
        assert np.array_equal(weights[0][name], weights[1][name]), name


def test_diverging_loss_aborts():
    train, _ = split_eval(_corpus(5_000), 0.1)
    model = init_model(tiny_config(vocab_size=256, d_model=16), seed=0)
    model.tok_emb.data[:] = np.inf  # drives the first loss non-finite
    with pytest.raises(NumericError), np.errstate(invalid="ignore"):
        pretrain(model, train, PretrainConfig(epochs=1, batch_size=8,
                                              seq_len=32, seed=0))


def test_corpus_shorter_than_window_is_data_error():
    model = init_model(tiny_config(vocab_size=256, d_model=16), seed=0)
    with pytest.raises(DataError):
        pretrain(model, tokenize(b"tiny"), PretrainConfig(seq_len=32))


def test_gradients_released_after_training():
    train, _ = split_eval(_corpus(5_000), 0.1)
    model = init_model(tiny_config(vocab_size=256, d_model=16), seed=0)
    pretrain(model, train, PretrainConfig(epochs=1, batch_size=8, seq_len=32,
                                          seed=0))
    for name, t in model.named_tensors().items():
        assert not t.requires_grad and t.grad is None, name
