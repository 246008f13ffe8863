import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from minibert.tokenizer import (SPECIAL_TOKENS, Vocab, VocabError, WordPieceTokenizer, basic_split, detokenize,
                                encode_pair, load_vocab, split_word, truncate_pair, wordpiece)

TOY_INITIAL = ["a", "ab", "abc", "b", "ba", "c", "ca", "cab", "bc", "d"]
TOY_CONT = ["##a", "##b", "##c", "##ab", "##bc", "##ca", "##abc", "##d", "##cd", "##bb"]


def toy_vocab():
    return Vocab(list(SPECIAL_TOKENS) + TOY_INITIAL + TOY_CONT)


def greedy_oracle(word, vocab_set):
    """Scan every prefix length and keep the longest hit at each step."""
    out, start = [], 0
    while start < len(word):
        hits = [end for end in range(start + 1, len(word) + 1)
                if (word[start:end] if start == 0 else "##" + word[start:end]) in vocab_set]
        if not hits:
            return ["[UNK]"]
        end = max(hits)
        out.append(word[start:end] if start == 0 else "##" + word[start:end])
        start = end
    return out


def all_segmentations(word, vocab_set, start=0):
    if start == len(word):
        yield []
        return
    for end in range(start + 1, len(word) + 1):
        piece = word[start:end] if start == 0 else "##" + word[start:end]
        if piece in vocab_set:
            for rest in all_segmentations(word, vocab_set, end):
                yield [piece] + rest


def test_load_vocab_file_order(tmp_path):
    p = tmp_path / "v.txt"
    p.write_text("\n".join(["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "dog"]) + "\n")
    v = load_vocab(p)
    assert len(v) == 6
    assert v.index["dog"] == 5


def test_duplicate_token_reports_both_lines(tmp_path):
    p = tmp_path / "v.txt"
    p.write_text("\n".join(list(SPECIAL_TOKENS) + ["dog", "cat", "dog"]) + "\n")
    with pytest.raises(VocabError, match="lines 6 and 8"):
        load_vocab(p)


@pytest.mark.parametrize("missing", SPECIAL_TOKENS)
def test_missing_special_token_is_named(missing):
    with pytest.raises(VocabError, match=missing.replace("[", r"\[").replace("]", r"\]")):
        Vocab([t for t in SPECIAL_TOKENS if t != missing] + ["x"])


def test_thirty_thousand_line_vocab(tmp_path):
    p = tmp_path / "big.txt"
    p.write_text("\n".join(list(SPECIAL_TOKENS) + [f"w{i}" for i in range(30000 - 5)]) + "\n")
    v = load_vocab(p)
    assert len(v) == 30000
    assert v.index["w29994"] == 29999


def test_flightless_splits_with_continuation():
    v = Vocab(list(SPECIAL_TOKENS) + ["flight", "##less"])
    assert wordpiece("flightless", v) == ["flight", "##less"]


def test_whole_word_hit_and_unknown():
    v = Vocab(list(SPECIAL_TOKENS) + ["dog"])
    assert wordpiece("dog", v) == ["dog"]
    assert wordpiece("dogs", v) == ["[UNK]"]


def test_overlong_word_is_unknown():
    v = Vocab(list(SPECIAL_TOKENS) + ["a", "##a"])
    assert split_word("a" * 100, v) == ["a"] + ["##a"] * 99
    assert split_word("a" * 101, v) == ["[UNK]"]


def test_basic_split_isolates_punctuation_and_lowercases():
    assert [w for w, _, _ in basic_split("Hi, there!")] == ["Hi", ",", "there", "!"]
    v = Vocab(list(SPECIAL_TOKENS) + ["hi", ",", "cafe"])
    tok = WordPieceTokenizer(v)
    assert tok.tokenize("HI, Café") == ["hi", ",", "cafe"]
    assert WordPieceTokenizer(v, lowercase=False, strip_accents=False).tokenize("HI") == ["[UNK]"]


def test_piece_char_spans():
    v = Vocab(list(SPECIAL_TOKENS) + ["new", "york", "##s"])
    pieces = WordPieceTokenizer(v).pieces("new yorks")
    assert [(p.text, p.word_index, p.char_start, p.char_end, p.is_first) for p in pieces] == [
        ("new", 0, 0, 3, True), ("york", 1, 4, 9, True), ("##s", 1, 4, 9, False)]


def test_random_concatenations_match_exhaustive_oracle():
    vocab = toy_vocab()
    vs = set(vocab.tokens)
    raw = TOY_INITIAL + [p[2:] for p in TOY_CONT]
    rng = np.random.default_rng(0)
    for _ in range(2000):
        word = "".join(raw[i] for i in rng.integers(len(raw), size=rng.integers(1, 6)))
        got = split_word(word, vocab)
        assert got == greedy_oracle(word, vs), word
        complete = list(all_segmentations(word, vs))
        if got != ["[UNK]"]:
            # greedy success is the lexicographically longest-first complete segmentation
            best = max(complete, key=lambda seg: [len(p.lstrip("#")) for p in seg])
            assert got == best


def test_exhaustive_short_words():
    vocab = toy_vocab()
    vs = set(vocab.tokens)
    for n in range(1, 6):
        for letters in itertools.product("abcd", repeat=n):
            word = "".join(letters)
            assert split_word(word, vocab) == greedy_oracle(word, vs)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 24), min_size=1, max_size=40))
def test_ids_tokens_round_trip(ids):
    v = toy_vocab()
    assert v.to_ids(v.to_tokens(ids)) == ids


def test_detokenize_joins_continuations():
    assert detokenize(["flight", "##less", "birds"]) == "flightless birds"


def test_single_sentence_layout():
    v = Vocab(list(SPECIAL_TOKENS) + ["hi"])
    s = encode_pair(v, ["hi"], None, 8)
    assert s.token_ids == [v.cls_id, v.index["hi"], v.sep_id]
    assert s.segment_ids == [0, 0, 0]


def test_pair_layout():
    v = Vocab(list(SPECIAL_TOKENS) + ["x", "y"])
    s = encode_pair(v, ["x"], ["y"])
    assert s.token_ids == [v.cls_id, v.index["x"], v.sep_id, v.index["y"], v.sep_id]
    assert s.segment_ids == [0, 0, 0, 1, 1]
    assert s.b_offset == 3


def truncation_oracle(la, lb, budget):
    while la + lb > budget:
        if lb >= la:
            lb -= 1
        else:
            la -= 1
    return la, lb


def test_long_pair_truncates_to_exactly_max_len():
    v = Vocab(list(SPECIAL_TOKENS) + ["t"])
    s = encode_pair(v, [5] * 300, [5] * 300, 512)
    assert len(s) == 512
    assert (s.len_a, s.len_b) == truncation_oracle(300, 300, 509) == (255, 254)


def test_too_small_max_len():
    v = Vocab(list(SPECIAL_TOKENS) + ["t"])
    with pytest.raises(ValueError):
        encode_pair(v, ["t"], None, 2)
    with pytest.raises(ValueError):
        encode_pair(v, ["t"], ["t"], 3)
    assert len(encode_pair(v, ["t"], ["t"], 4)) == 4


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 40), st.one_of(st.none(), st.integers(1, 40)), st.integers(4, 48))
def test_encode_pair_invariants(la, lb, max_len):
    v = Vocab(list(SPECIAL_TOKENS) + ["t"])
    a = [5] * la
    b = None if lb is None else [5] * lb
    s = encode_pair(v, a, b, max_len)
    assert s.token_ids[0] == v.cls_id
    assert len(s) <= max_len
    assert s.token_ids.count(v.sep_id) == (2 if b is not None else 1)
    assert all(x <= y for x, y in zip(s.segment_ids, s.segment_ids[1:]))
    assert s.segment_ids[s.len_a + 1] == 0
    if b is not None:
        assert (s.len_a, s.len_b) == truncation_oracle(la, lb, max_len - 3)
        if max_len >= 5:
            assert s.len_a >= 1 and s.len_b >= 1


def test_truncate_single():
    assert truncate_pair([1, 2, 3], None, 2) == ([1, 2], None)
