"""WordPiece tokenization and [CLS]/[SEP] sequence packing."""
from __future__ import annotations

import unicodedata
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
MAX_WORD_CHARS = 100


class VocabError(ValueError):
    pass


class Vocab:
    """Ordered token list; a token's id is its line index in the vocab file."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens: list[str] = list(tokens)
        self.index: dict[str, int] = {}
        for i, tok in enumerate(self.tokens):
            if tok in self.index:
                raise VocabError(
                    f"duplicate token {tok!r} on lines {self.index[tok] + 1} and {i + 1}"
                )
            self.index[tok] = i
        for tok in SPECIAL_TOKENS:
            if tok not in self.index:
                raise VocabError(f"vocab is missing special token {tok}")
        self.pad_id = self.index[PAD]
        self.unk_id = self.index[UNK]
        self.cls_id = self.index[CLS]
        self.sep_id = self.index[SEP]
        self.mask_id = self.index[MASK]
        self.special_ids = frozenset(self.index[t] for t in SPECIAL_TOKENS)
        # ids eligible as random MLM replacements
        self.normal_ids = [i for i in range(len(self.tokens)) if i not in self.special_ids]

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def is_continuation(self, token: str) -> bool:
        return token.startswith("##")

    def to_ids(self, tokens: Iterable[str]) -> list[int]:
        return [self.index.get(t, self.unk_id) for t in tokens]

    def to_tokens(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


def load_vocab(path: Union[str, Path]) -> Vocab:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return Vocab([ln.rstrip("\r") for ln in lines])


def _is_punctuation(ch: str) -> bool:
    cp = ord(ch)
    if 33 <= cp <= 47 or 58 <= cp <= 64 or 91 <= cp <= 96 or 123 <= cp <= 126:
        return True
    return unicodedata.category(ch).startswith("P")


def _normalize_word(word: str, lowercase: bool, strip_accents: bool) -> str:
    if lowercase:
        word = word.lower()
    if strip_accents:
        word = "".join(c for c in unicodedata.normalize("NFD", word) if unicodedata.category(c) != "Mn")
    return word


def basic_split(text: str) -> list[tuple[str, int, int]]:
    """Whitespace split with punctuation isolated; returns (word, start, end) char spans."""
    words = []
    start = None
    for i, ch in enumerate(text):
        if ch.isspace() or unicodedata.category(ch) in ("Cc", "Cf"):
            if start is not None:
                words.append((text[start:i], start, i))
                start = None
        elif _is_punctuation(ch):
            if start is not None:
                words.append((text[start:i], start, i))
                start = None
            words.append((ch, i, i + 1))
        elif start is None:
            start = i
    if start is not None:
        words.append((text[start:], start, len(text)))
    return words


def split_word(word: str, vocab: Vocab, max_chars: int = MAX_WORD_CHARS) -> list[str]:
    """Greedy longest-match-first WordPiece split of one word."""
    if len(word) > max_chars:
        return [UNK]
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        piece = None
        while end > start:
            cand = word[start:end]
            if start > 0:
                cand = "##" + cand
            if cand in vocab:
                piece = cand
                break
            end -= 1
        if piece is None:
            return [UNK]
        pieces.append(piece)
        start = end
    return pieces


@dataclass(frozen=True)
class Piece:
    text: str
    word_index: int
    char_start: int
    char_end: int

    @property
    def is_first(self) -> bool:
        return not self.text.startswith("##")


class WordPieceTokenizer:
    def __init__(self, vocab: Vocab, lowercase: bool = True, strip_accents: bool = True,
                 max_word_chars: int = MAX_WORD_CHARS):
        self.vocab = vocab
        self.lowercase = lowercase
        self.strip_accents = strip_accents
        self.max_word_chars = max_word_chars

    def words(self, text: str) -> list[tuple[str, int, int]]:
        out = []
        for w, s, e in basic_split(text):
            norm = _normalize_word(w, self.lowercase, self.strip_accents)
            if norm:
                out.append((norm, s, e))
        return out

    def pieces(self, text: str) -> list[Piece]:
        out = []
        for wi, (w, s, e) in enumerate(self.words(text)):
            for p in split_word(w, self.vocab, self.max_word_chars):
                out.append(Piece(p, wi, s, e))
        return out

    def tokenize(self, text: str) -> list[str]:
        return [p.text for p in self.pieces(text)]

    def encode(self, text: str) -> list[int]:
        return self.vocab.to_ids(self.tokenize(text))


def wordpiece(text: str, vocab: Vocab, lowercase: bool = True, strip_accents: bool = True) -> list[str]:
    return WordPieceTokenizer(vocab, lowercase, strip_accents).tokenize(text)


def detokenize(tokens: Sequence[str]) -> str:
    """Join pieces back into whitespace-separated words."""
    words: list[str] = []
    for t in tokens:
        if t.startswith("##") and words:
            words[-1] += t[2:]
        else:
            words.append(t)
    return " ".join(words)


@dataclass
class EncodedSequence:
    token_ids: list[int]
    segment_ids: list[int]
    # length of segment A content (excluding [CLS]/[SEP]) and of B, after truncation
    len_a: int = 0
    len_b: Optional[int] = None

    def __len__(self) -> int:
        return len(self.token_ids)

    def copy(self) -> "EncodedSequence":
        return EncodedSequence(list(self.token_ids), list(self.segment_ids), self.len_a, self.len_b)

    @property
    def b_offset(self) -> int:
        """Index of the first segment-B token."""
        return self.len_a + 2


def truncate_pair(a: list, b: Optional[list], budget: int) -> tuple[list, Optional[list]]:
    """Drop trailing tokens from the longer side (ties drop from B) until within budget."""
    a = list(a)
    b = None if b is None else list(b)
    if b is None:
        return a[:budget], None
    while len(a) + len(b) > budget:
        if len(b) >= len(a):
            b.pop()
        else:
            a.pop()
    return a, b


def encode_pair(vocab: Vocab, a: Sequence[Union[int, str]], b: Optional[Sequence[Union[int, str]]] = None,
                max_len: int = 512) -> EncodedSequence:
    """Pack ``[CLS] a [SEP] (b [SEP])`` with segment ids 0 then 1."""
    if not a:
        raise ValueError("encode_pair: sentence A is empty")
    if max_len < 3 or (b is not None and max_len < 4):
        raise ValueError(f"max_len={max_len} too small to hold the special tokens")

    def ids(seq):
        return [vocab.index.get(t, vocab.unk_id) if isinstance(t, str) else int(t) for t in seq]

    a_ids = ids(a)
    b_ids = None if b is None else ids(b)
    budget = max_len - (3 if b_ids is not None else 2)
    a_ids, b_ids = truncate_pair(a_ids, b_ids, budget)
    tokens = [vocab.cls_id] + a_ids + [vocab.sep_id]
    segments = [0] * len(tokens)
    if b_ids is not None:
        tokens += b_ids + [vocab.sep_id]
        segments += [1] * (len(b_ids) + 1)
    return EncodedSequence(tokens, segments, len(a_ids), None if b_ids is None else len(b_ids))
