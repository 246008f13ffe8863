import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from minibert.data import (IGNORE_INDEX, CorpusWarning, DataError, Document, LoadReport, MaskingPolicy, NspLabel,
                           apply_masking, build_pretrain_batch, build_pretrain_example, load_cls_dataset,
                           load_corpus, load_span_dataset, load_tag_dataset, parse_corpus, sample_nsp_pair,
                           stream_rng)
from minibert.fixtures import fixture_path
from minibert.tokenizer import SPECIAL_TOKENS, Vocab, WordPieceTokenizer, encode_pair, load_vocab


@pytest.fixture(scope="module")
def vocab():
    return load_vocab(fixture_path("vocab.txt"))


@pytest.fixture(scope="module")
def tok(vocab):
    return WordPieceTokenizer(vocab)


@pytest.fixture(scope="module")
def docs(tok):
    return load_corpus(fixture_path("toy_corpus.txt"), tok)


def test_two_docs_three_lines(tmp_path, tok):
    p = tmp_path / "c.txt"
    p.write_text("the cat .\nthe dog .\na bird .\n\nthe sun .\nthe rain .\nthe snow .\n\n\n\n")
    d = load_corpus(p, tok)
    assert [len(x) for x in d] == [3, 3]


def test_single_document_warns(tok):
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        parse_corpus("the cat .\nthe dog .\n", tok)
    assert any(issubclass(x.category, CorpusWarning) for x in w)


def test_unreadable_corpus(tmp_path, tok):
    with pytest.raises((DataError, OSError)):
        load_corpus(tmp_path / "missing.txt", tok)


def test_corpus_token_counts_replay_tokenizer(tok, docs):
    text = fixture_path("toy_corpus.txt").read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    flat = [s for d in docs for s in d.sentences]
    assert len(flat) == len(lines)
    for line, ids in zip(lines, flat):
        pieces = []
        for word in line.split():
            pieces.extend(tok.tokenize(word))
        assert ids == tok.vocab.to_ids(pieces)


def small_vocab():
    return Vocab(list(SPECIAL_TOKENS) + ["my", "dog", "is", "hairy", "apple", "s1", "s2"])


def test_forced_is_next_single_split():
    v = small_vocab()
    d = [Document([[v.index["s1"]], [v.index["s2"]]])]
    pair = sample_nsp_pair(d, np.random.default_rng(0), 16, force=NspLabel.IS_NEXT)
    assert pair.a == [v.index["s1"]] and pair.b == [v.index["s2"]]


def test_forced_not_next_other_document(docs):
    rng = np.random.default_rng(0)
    for _ in range(200):
        pair = sample_nsp_pair(docs, rng, 48, force=NspLabel.NOT_NEXT)
        assert pair.doc_a != pair.doc_b
        assert len(pair.a) + len(pair.b) <= 45


def test_unsplittable_corpus_errors():
    with pytest.raises(DataError):
        sample_nsp_pair([Document([[5]]), Document([[6]])], np.random.default_rng(0), 16)


def test_nsp_balance_over_many_samples(docs):
    rng = np.random.default_rng(123)
    n = 20000
    frac = sum(sample_nsp_pair(docs, rng, 48).label == NspLabel.IS_NEXT for _ in range(n)) / n
    # 4 sigma at n = 2e4 is 0.0141
    assert abs(frac - 0.5) < 0.0142


def test_my_dog_is_hairy_mask_branch():
    v = small_vocab()
    seq = encode_pair(v, ["my", "dog", "is", "hairy"])
    ex = apply_masking(seq, MaskingPolicy(), v, np.random.default_rng(0), positions=[4], branch="mask")
    assert v.to_tokens(ex.seq.token_ids[1:5]) == ["my", "dog", "is", "[MASK]"]
    assert ex.mlm_positions == [4]
    assert ex.mlm_targets == [v.index["hairy"]]


def test_random_branch_keeps_target():
    v = small_vocab()
    seq = encode_pair(v, ["my", "dog", "is", "hairy"])
    ex = apply_masking(seq, MaskingPolicy(), v, np.random.default_rng(1), positions=[4], branch="random")
    assert ex.seq.token_ids[4] not in v.special_ids
    assert ex.mlm_targets == [v.index["hairy"]]
    same = apply_masking(seq, MaskingPolicy(), v, np.random.default_rng(1), positions=[4], branch="same")
    assert same.seq.token_ids == seq.token_ids


def test_zero_rate_selects_nothing():
    v = small_vocab()
    ex = apply_masking(encode_pair(v, ["my", "dog"]), MaskingPolicy(0.0), v, np.random.default_rng(0))
    assert ex.mlm_positions == [] and ex.mlm_targets == []


def test_minimum_one_position_and_rounding():
    v = small_vocab()
    rng = np.random.default_rng(0)
    assert len(apply_masking(encode_pair(v, ["dog"]), MaskingPolicy(), v, rng).mlm_positions) == 1
    # 10 candidates * 0.15 = 1.5 rounds half up to 2
    assert len(apply_masking(encode_pair(v, ["dog"] * 10), MaskingPolicy(), v, rng).mlm_positions) == 2
    assert len(apply_masking(encode_pair(v, ["dog"] * 9), MaskingPolicy(), v, rng).mlm_positions) == 1


def test_no_candidates_errors():
    v = small_vocab()
    seq = encode_pair(v, ["dog"])
    seq.token_ids[1] = v.sep_id
    with pytest.raises(DataError):
        apply_masking(seq, MaskingPolicy(), v, np.random.default_rng(0))


def test_policy_validation():
    with pytest.raises(ValueError):
        MaskingPolicy(0.15, 0.8, 0.1, 0.2)
    with pytest.raises(ValueError):
        MaskingPolicy(1.5)
    assert MaskingPolicy.from_percentages(80, 10, 10) == MaskingPolicy()
    assert MaskingPolicy().as_triple() == (80, 10, 10)


def test_batch_of_one_is_the_composition(docs, vocab):
    a = build_pretrain_batch(docs, 1, 48, MaskingPolicy(), vocab, stream_rng(0, 0, 0))[0]
    rng = stream_rng(0, 0, 0)
    pair = sample_nsp_pair(docs, rng, 48)
    b = apply_masking(encode_pair(vocab, pair.a, pair.b, 48), MaskingPolicy(), vocab, rng, pair.label)
    assert a.seq.token_ids == b.seq.token_ids
    assert a.mlm_positions == b.mlm_positions and a.nsp_label == b.nsp_label


def test_batch_deterministic(docs, vocab):
    one = build_pretrain_batch(docs, 8, 48, MaskingPolicy(), vocab, stream_rng(5, 0, 3))
    two = build_pretrain_batch(docs, 8, 48, MaskingPolicy(), vocab, stream_rng(5, 0, 3))
    assert [e.seq.token_ids for e in one] == [e.seq.token_ids for e in two]
    assert [e.mlm_positions for e in one] == [e.mlm_positions for e in two]


def test_invariant_sweep(docs, vocab):
    rng = np.random.default_rng(9)
    for _ in range(10000):
        ex = build_pretrain_example(docs, 48, MaskingPolicy(), vocab, rng)
        ids = ex.original_ids
        n = len(ids)
        assert n <= 48
        cand = [i for i, t in enumerate(ids) if t not in vocab.special_ids]
        assert len(ex.mlm_positions) == max(1, int(np.floor(0.15 * len(cand) + 0.5)))
        assert all(0 < p < n and ids[p] not in vocab.special_ids for p in ex.mlm_positions)
        assert ex.mlm_targets == [ids[p] for p in ex.mlm_positions]
        assert [t for i, t in enumerate(ex.seq.token_ids) if i not in ex.mlm_positions] == \
               [t for i, t in enumerate(ids) if i not in ex.mlm_positions]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(5, 64))
def test_pipeline_pure_in_seed(seed, max_len):
    v = load_vocab(fixture_path("vocab.txt"))
    d = [Document([[7, 8, 9], [10, 11]]), Document([[12, 13], [14, 15, 16]])]
    a = build_pretrain_example(d, max_len, MaskingPolicy(), v, np.random.default_rng(seed))
    b = build_pretrain_example(d, max_len, MaskingPolicy(), v, np.random.default_rng(seed))
    assert a.seq.token_ids == b.seq.token_ids and a.nsp_label == b.nsp_label


def test_stream_rng_independent_of_order():
    x = stream_rng(1, 2, 3).random(4)
    stream_rng(1, 2, 4).random(100)
    assert (stream_rng(1, 2, 3).random(4) == x).all()
    assert not (stream_rng(1, 2, 4).random(4) == x).all()


def test_cls_row(tmp_path, tok):
    p = tmp_path / "c.tsv"
    p.write_text("1\tgood movie\n0\tbad movie\tthe cat\n")
    rows = load_cls_dataset(p, tok, 32)
    assert rows[0].label == 1
    assert rows[0].seq.segment_ids == [0, 0, 0, 0]
    assert rows[1].seq.segment_ids[-1] == 1


def test_cls_malformed_row_reports_line(tmp_path, tok):
    p = tmp_path / "c.tsv"
    p.write_text("1\tgood movie\nnotalabel\n")
    with pytest.raises(DataError, match=":2"):
        load_cls_dataset(p, tok, 32)


def test_span_answer_is_first_passage_token(tmp_path, tok):
    p = tmp_path / "s.jsonl"
    p.write_text('{"question": "what is it ?", "context": "cat", "answers": [{"text": "cat", "answer_start": 0}]}\n')
    ex = load_span_dataset(p, tok, 32)[0]
    first = ex.seq.b_offset
    assert ex.start == ex.end == first
    assert tok.vocab.tokens[ex.seq.token_ids[first]] == "cat"


def test_span_unalignable_dropped_and_counted(tmp_path, tok):
    p = tmp_path / "s.jsonl"
    p.write_text('{"question": "what ?", "context": "the cat", "answers": [{"text": "he c", "answer_start": 1}]}\n'
                 '{"question": "what ?", "context": "the cat", "answers": [{"text": "cat", "answer_start": 4}]}\n'
                 '{"question": "what ?", "context": "the cat", "answers": []}\n')
    report = LoadReport()
    rows = load_span_dataset(p, tok, 32, report)
    assert len(rows) == 2 and report.dropped == 1
    assert rows[1].start is None and rows[1].answers == [""]


def test_new_york_first_subtoken_labels(tmp_path, tok):
    p = tmp_path / "t.txt"
    p.write_text("New\tPLACE\nYork\tPLACE\n")
    (ex,), names = load_tag_dataset(p, tok, 16)
    pieces = tok.vocab.to_tokens(ex.seq.token_ids)
    assert pieces == ["[CLS]", "new", "yo", "##rk", "[SEP]"]
    # alignment oracle: replay the tokenizer word by word
    expect = [IGNORE_INDEX]
    for word in ("New", "York"):
        n = len(tok.tokenize(word))
        expect += [names.index("PLACE")] + [IGNORE_INDEX] * (n - 1)
    expect.append(IGNORE_INDEX)
    assert ex.labels == expect
