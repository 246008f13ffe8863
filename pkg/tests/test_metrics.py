import math

import numpy as np
import pytest

from minibert.ablation import masked_lm_perplexity
from minibert.data import Document, MaskingPolicy
from minibert.metrics import MetricReport, accuracy, config_hash, mean_em_f1, normalize_answer, span_em_f1
from minibert.model import ModelConfig
from minibert.tokenizer import SPECIAL_TOKENS, Vocab
from minibert.training import PretrainConfig, pretrain


def test_accuracy_extremes_and_hand_count():
    assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert accuracy([0, 0], [1, 1]) == 0.0
    rng = np.random.default_rng(0)
    p, g = rng.integers(0, 3, 100).tolist(), rng.integers(0, 3, 100).tolist()
    hits = 0
    for a, b in zip(p, g):
        if a == b:
            hits += 1
    assert accuracy(p, g) == hits / 100
    with pytest.raises(ValueError):
        accuracy([1], [1, 2])


def test_span_metrics():
    assert span_em_f1("new york", ["new york"]) == (1.0, 1.0)
    assert span_em_f1("x b", ["b c"]) == (0.0, 0.5)
    # articles are dropped before counting
    assert span_em_f1("a b", ["b c"])[1] == pytest.approx(2 / 3)
    assert span_em_f1(None, [""]) == (1.0, 1.0)
    assert span_em_f1("cat", [""]) == (0.0, 0.0)
    assert span_em_f1("b", ["c", "b d"]) == (0.0, pytest.approx(2 / 3))
    with pytest.raises(ValueError):
        span_em_f1("x", [])
    assert normalize_answer("The  Cat's, hat!") == "cats hat"
    assert mean_em_f1(["a", "b"], [["a"], ["c"]]) == (0.5, 0.5)


def test_report_ranges():
    MetricReport("cls", {"accuracy": 1.0, "perplexity": 1.0}, 3)
    with pytest.raises(ValueError):
        MetricReport("cls", {"accuracy": 1.2}, 3)
    with pytest.raises(ValueError):
        MetricReport("lm", {"perplexity": 0.5}, 3)
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})


def test_untrained_perplexity_near_vocab_size():
    vocab = Vocab(list(SPECIAL_TOKENS) + [f"t{i}" for i in range(45)])
    rng = np.random.default_rng(0)
    docs = [Document([[int(t) for t in rng.integers(5, 50, 8)] for _ in range(4)]) for _ in range(6)]
    cfg = PretrainConfig(ModelConfig(L=2, H=16, A=2, V=50, max_positions=64), total_steps=0, warmup_steps=0)
    ckpt = pretrain(cfg, docs, vocab, 0).final
    ppl = masked_lm_perplexity(ckpt, docs, vocab, MaskingPolicy(), 0)
    assert abs(ppl - 50) / 50 <= 0.15


def test_memorized_corpus_perplexity_near_one():
    vocab = Vocab(list(SPECIAL_TOKENS) + [f"t{i}" for i in range(10)])
    # two identical one-sentence-pair documents: there is one sequence to memorize
    docs = [Document([[5, 6, 7], [8, 9, 10]]), Document([[5, 6, 7], [8, 9, 10]])]
    cfg = PretrainConfig(ModelConfig(L=1, H=32, A=2, V=15, max_positions=16, dropout=0.0), batch_size=16,
                         max_len=16, total_steps=300, warmup_steps=10, lr=3e-3, nsp=False)
    ckpt = pretrain(cfg, docs, vocab, 0).final
    ppl = masked_lm_perplexity(ckpt, docs, vocab, MaskingPolicy(), 0, n_examples=64, max_len=16)
    assert 1.0 <= ppl < 1.1
    assert math.isfinite(ppl)
