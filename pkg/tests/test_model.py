import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from minibert import heads as Hd
from minibert.model import (BERT_BASE, BERT_LARGE, Batch, ConfigError, ModelConfig, additive_mask,
                            attention_allowed, attention_layer, count_parameters, embed_inputs, embed_sum,
                            encoder_forward, encoder_shapes, init_weights)
from minibert.tensor import Tensor
from minibert.tokenizer import EncodedSequence

from gradcheck import check


def cfg64(**kw):
    base = dict(L=2, H=16, A=2, V=50, max_positions=16, dropout=0.0, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


def random_batch(rng, B, N, V, lengths=None):
    lengths = lengths or [N] * B
    seqs = []
    for n in lengths:
        ids = [2] + [int(t) for t in rng.integers(5, V, size=n - 1)]
        split = int(rng.integers(1, n)) if n > 1 else n
        seqs.append(EncodedSequence(ids, [0] * split + [1] * (n - split)))
    return Batch.from_sequences(seqs, 0, N)


def test_config_invariants():
    assert ModelConfig(H=64, A=4).ffn_size == 256
    with pytest.raises(ConfigError):
        ModelConfig(H=65, A=4)
    c = cfg64()
    assert ModelConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({**c.to_dict(), "bogus": 1})
    assert c.diff(c.replace(L=3)) == ["L"]


def test_embedding_sum_is_three_lookups():
    rng = np.random.default_rng(0)
    c = cfg64()
    p = init_weights(c, 0)
    b = random_batch(rng, 2, 6, c.V)
    got = embed_sum(b, p).data
    for r in range(2):
        for i in range(6):
            expect = (p["embeddings.token"].data[b.token_ids[r, i]] + p["embeddings.segment"].data[b.segment_ids[r, i]]
                      + p["embeddings.position"].data[i])
            np.testing.assert_array_equal(got[r, i], expect)


def test_zero_tables_give_zero_sum():
    c = cfg64()
    p = init_weights(c, 0)
    for k in ("embeddings.token", "embeddings.segment", "embeddings.position"):
        p[k].data[:] = 0
    b = random_batch(np.random.default_rng(0), 1, 5, c.V)
    assert not embed_sum(b, p).data.any()


def test_embedding_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    c = cfg64(V=12, max_positions=6, H=4, A=2)
    p = init_weights(c, 1)
    b = random_batch(rng, 2, 5, c.V)
    w = Tensor(rng.standard_normal((2, 5, 4)), dtype=np.float64)
    tables = [p[k] for k in ("embeddings.token", "embeddings.segment", "embeddings.position")]
    assert check(lambda: (embed_sum(b, p) * w).sum(), tables) == {}
    assert check(lambda: (embed_inputs(b, p, c) * w).sum(), tables + [p["embeddings.norm.gain"]]) == {}


def test_position_overflow():
    c = cfg64(max_positions=4)
    b = random_batch(np.random.default_rng(0), 1, 5, c.V)
    with pytest.raises(ValueError, match="max_positions"):
        encoder_forward(b, init_weights(c, 0), c)


def _np_ln(x, g, b, eps=1e-12):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _np_gelu(x):
    return np.array([v * 0.5 * (1 + math.erf(v / math.sqrt(2))) for v in x.reshape(-1)]).reshape(x.shape)


def loop_attention_layer(x, p, prefix, c, allowed):
    """Explicit per-query, per-head loop: softmax over allowed keys, heads concatenated."""
    N, H = x.shape
    d = c.head_dim
    W = lambda n: p[prefix + n].data  # noqa: E731
    q = x @ W("attention.query.weight") + W("attention.query.bias")
    k = x @ W("attention.key.weight") + W("attention.key.bias")
    v = x @ W("attention.value.weight") + W("attention.value.bias")
    ctx = np.zeros((N, H))
    for h in range(c.A):
        sl = slice(h * d, (h + 1) * d)
        for i in range(N):
            keys = [j for j in range(N) if allowed[i, j]]
            logits = [float(q[i, sl] @ k[j, sl]) / math.sqrt(d) for j in keys]
            m = max(logits)
            w = [math.exp(z - m) for z in logits]
            s = sum(w)
            for j, wj in zip(keys, w):
                ctx[i, sl] += wj / s * v[j, sl]
    attn = ctx @ W("attention.output.weight") + W("attention.output.bias")
    y = _np_ln(x + attn, W("attention_norm.gain"), W("attention_norm.bias"))
    f = _np_gelu(y @ W("ffn.intermediate.weight") + W("ffn.intermediate.bias"))
    f = f @ W("ffn.output.weight") + W("ffn.output.bias")
    return _np_ln(y + f, W("ffn_norm.gain"), W("ffn_norm.bias"))


@pytest.mark.parametrize("mode", ["bidirectional", "causal"])
def test_attention_matches_loop_oracle(mode):
    rng = np.random.default_rng(2)
    c = cfg64(H=8, A=2, attention_mode=mode)
    p = init_weights(c, 3)
    for t in p.values():
        if t.ndim == 2:
            t.data[:] = rng.standard_normal(t.shape) * 0.5
    x = rng.standard_normal((1, 4, 8))
    pad = np.array([[True, True, True, False]])
    allowed = attention_allowed(pad, mode)
    got = attention_layer(Tensor(x, dtype=np.float64), p, "layers.0.", c, additive_mask(allowed, np.float64)).data
    expect = loop_attention_layer(x[0], p, "layers.0.", c, allowed[0, 0])
    assert np.abs(got[0] - expect).max() < 1e-5


def test_single_token_ignores_query_and_key():
    rng = np.random.default_rng(4)
    c = cfg64(H=8, A=2)
    p = init_weights(c, 5)
    b = random_batch(rng, 1, 1, c.V)
    before = encoder_forward(b, p, c).T.data.copy()
    for name in ("layers.0.attention.query.weight", "layers.1.attention.key.weight"):
        p[name].data[:] = rng.standard_normal(p[name].shape)
    np.testing.assert_array_equal(encoder_forward(b, p, c).T.data, before)


def test_zero_layers_keep_only_embedding():
    c = cfg64(L=0)
    out = encoder_forward(random_batch(np.random.default_rng(0), 1, 3, c.V), init_weights(c, 0), c)
    assert len(out.hidden_states) == 1
    assert out.C.shape == (1, c.H)


def test_hidden_states_and_cls_vector():
    c = cfg64()
    out = encoder_forward(random_batch(np.random.default_rng(0), 2, 5, c.V), init_weights(c, 0), c)
    assert len(out.hidden_states) == c.L + 1
    np.testing.assert_array_equal(out.C.data, out.T.data[:, 0])


def test_causal_barrier_exact():
    rng = np.random.default_rng(7)
    c = cfg64(attention_mode="causal", dropout=0.1)
    p = init_weights(c, 7)
    for _ in range(20):
        N = int(rng.integers(2, 12))
        b = random_batch(rng, 1, N, c.V)
        base = encoder_forward(b, p, c).T.data
        j = int(rng.integers(1, N))
        b.token_ids[0, j] = (b.token_ids[0, j] + 1 - 5) % (c.V - 5) + 5
        pert = encoder_forward(b, p, c).T.data
        assert pert[0, :j].tobytes() == base[0, :j].tobytes()


def test_bidirectional_sensitivity():
    rng = np.random.default_rng(8)
    c = cfg64()
    p = init_weights(c, 8)
    b = random_batch(rng, 1, 6, c.V)
    base = encoder_forward(b, p, c).T.data.copy()
    b.token_ids[0, 5] = 5 if b.token_ids[0, 5] != 5 else 6
    assert not np.array_equal(encoder_forward(b, p, c).T.data[0, 0], base[0, 0])


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 10), st.integers(0, 5), st.sampled_from(["bidirectional", "causal"]),
       st.integers(0, 2**31 - 1))
def test_padding_invariance(n, extra, mode, seed):
    rng = np.random.default_rng(seed)
    c = cfg64(attention_mode=mode)
    p = init_weights(c, 11)
    short = random_batch(rng, 1, n, c.V)
    longer = Batch(np.pad(short.token_ids, ((0, 0), (0, extra))), np.pad(short.segment_ids, ((0, 0), (0, extra))),
                   np.pad(short.pad_mask, ((0, 0), (0, extra))))
    a = encoder_forward(short, p, c).T.data[0]
    b = encoder_forward(longer, p, c).T.data[0, :n]
    assert np.abs(a - b).max() < 1e-5


def test_parameter_counts_reference_configs():
    base = count_parameters(BERT_BASE, heads=("mlm", "nsp"))
    large = count_parameters(BERT_LARGE, heads=("mlm", "nsp"))
    assert abs(base - 110e6) / 110e6 <= 0.05
    assert abs(large - 340e6) / 340e6 <= 0.05


def test_parameter_count_hand_case():
    c = ModelConfig(L=0, H=4, A=2, V=10, max_positions=8)
    assert count_parameters(c) == 88


@pytest.mark.parametrize("kw", [dict(), dict(L=3, H=8, A=4, V=30, max_positions=12, ffn_size=20),
                                dict(L=1, H=6, A=3, V=7, max_positions=5, tie_mlm=False)])
def test_parameter_count_matches_shape_walk(kw):
    c = cfg64(**kw)
    enc = init_weights(c, 0)
    rng = np.random.default_rng(0)
    heads = {"mlm": Hd.MlmHead.create(c, rng, enc["embeddings.token"]), "nsp": Hd.NspHead.create(c, rng),
             "cls": Hd.ClsHead.create(c, rng, 2), "span": Hd.SpanHead.create(c, rng),
             "choice": Hd.ChoiceHead.create(c, rng), "tag": Hd.TagHead.create(c, rng, 2)}
    walk = sum(t.size for t in enc.values())
    assert sum(int(np.prod(s)) for s in encoder_shapes(c).values()) == walk == count_parameters(c)
    for name, head in heads.items():
        assert count_parameters(c, (name,)) - count_parameters(c) == sum(t.size for t in head.params.values())


def test_init_deterministic_and_statistics():
    c = ModelConfig(L=1, H=768, A=12, V=100, max_positions=16)
    a, b = init_weights(c, 3), init_weights(c, 3)
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)
    w = a["layers.0.attention.query.weight"].data.astype(np.float64)
    n = w.size
    assert abs(w.mean()) <= 4 * 0.02 / math.sqrt(n)
    assert np.abs(w).max() <= 0.04 + 1e-7
    assert (a["layers.0.ffn_norm.gain"].data == 1).all()
    assert not a["layers.0.ffn.output.bias"].data.any()
