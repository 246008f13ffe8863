"""Pre-training instance generation and fine-tuning dataset loaders."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .tokenizer import EncodedSequence, Vocab, WordPieceTokenizer, encode_pair, truncate_pair

IGNORE_INDEX = -100


class DataError(ValueError):
    """Malformed or unusable input data."""


class CorpusWarning(UserWarning):
    pass


class NspLabel(IntEnum):
    IS_NEXT = 0
    NOT_NEXT = 1


@dataclass
class Document:
    sentences: list[list[int]]

    def __len__(self) -> int:
        return len(self.sentences)


@dataclass(frozen=True)
class MaskingPolicy:
    select_rate: float = 0.15
    p_mask: float = 0.8
    p_same: float = 0.1
    p_random: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.select_rate <= 1.0:
            raise ValueError(f"select_rate must be in [0, 1], got {self.select_rate}")
        for name in ("p_mask", "p_same", "p_random"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if abs(self.p_mask + self.p_same + self.p_random - 1.0) > 1e-9:
            raise ValueError("p_mask + p_same + p_random must equal 1")

    @classmethod
    def from_percentages(cls, mask: float, same: float, rnd: float, select_rate: float = 0.15):
        return cls(select_rate, mask / 100.0, same / 100.0, rnd / 100.0)

    def as_triple(self) -> tuple[int, int, int]:
        return (round(self.p_mask * 100), round(self.p_same * 100), round(self.p_random * 100))


@dataclass
class PretrainExample:
    seq: EncodedSequence
    mlm_positions: list[int]
    mlm_targets: list[int]
    nsp_label: NspLabel
    original_ids: list[int] = field(default_factory=list)
    branches: list[str] = field(default_factory=list)


@dataclass
class NspPair:
    a: list[int]
    b: list[int]
    label: NspLabel
    doc_a: int
    doc_b: int


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------
def parse_corpus(text: str, tokenizer: WordPieceTokenizer) -> list[Document]:
    docs, current = [], []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            if current:
                docs.append(Document(current))
            current = []
            continue
        ids = tokenizer.encode(line)
        if ids:
            current.append(ids)
    if current:
        docs.append(Document(current))
    if len(docs) < 2:
        warnings.warn(f"corpus has {len(docs)} document(s); NotNext sampling needs at least 2", CorpusWarning)
    return docs


def load_corpus(path: Union[str, Path], tokenizer: WordPieceTokenizer) -> list[Document]:
    """One sentence per line, blank line between documents."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read corpus {path}: {exc}") from exc
    return parse_corpus(text, tokenizer)


# ---------------------------------------------------------------------------
# next sentence prediction pairs
# ---------------------------------------------------------------------------
def _take_run(doc: Document, start: int, budget: int, min_sentences: int) -> list[list[int]]:
    run, total = [], 0
    for s in doc.sentences[start:]:
        if len(run) >= min_sentences and total + len(s) > budget:
            break
        run.append(s)
        total += len(s)
    return run


def sample_nsp_pair(docs: Sequence[Document], rng: np.random.Generator, max_len: int,
                    force: Optional[NspLabel] = None, max_retries: int = 100) -> NspPair:
    """Sample spans A and B; B continues A half of the time, otherwise comes from another document."""
    budget = max_len - 3
    if budget < 2:
        raise ValueError(f"max_len={max_len} leaves no room for a sentence pair")
    splittable = [i for i, d in enumerate(docs) if len(d) >= 2]
    if not splittable:
        raise DataError("no document has two sentences to split")
    label = NspLabel(force) if force is not None else (
        NspLabel.IS_NEXT if rng.random() < 0.5 else NspLabel.NOT_NEXT)
    if label is NspLabel.NOT_NEXT and len(docs) < 2:
        raise DataError("NotNext sampling needs at least two documents")

    for _ in range(max_retries):
        di = splittable[int(rng.integers(len(splittable)))]
        doc = docs[di]
        start = int(rng.integers(len(doc) - 1))
        run = _take_run(doc, start, budget, 2)
        if len(run) < 2:
            continue
        split = int(rng.integers(1, len(run)))
        a = [t for s in run[:split] for t in s]
        if label is NspLabel.IS_NEXT:
            b = [t for s in run[split:] for t in s]
            dj = di
        else:
            others = [j for j in range(len(docs)) if j != di and len(docs[j]) > 0]
            dj = others[int(rng.integers(len(others)))]
            other = docs[dj]
            ostart = int(rng.integers(len(other)))
            b = [t for s in _take_run(other, ostart, max(budget - len(a), 1), 1) for t in s]
        if not a or not b:
            continue
        a, b = truncate_pair(a, b, budget)
        if a and b:
            return NspPair(a, b, label, di, dj)
    raise DataError(f"could not sample a sentence pair after {max_retries} attempts")


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------
def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def apply_masking(seq: EncodedSequence, policy: MaskingPolicy, vocab: Vocab, rng: np.random.Generator,
                  nsp_label: NspLabel = NspLabel.IS_NEXT, *, positions: Optional[Sequence[int]] = None,
                  branch: Optional[str] = None) -> PretrainExample:
    """Choose prediction positions and corrupt them per the mask/random/same branches.

    ``positions`` and ``branch`` force the random choices (used to reproduce
    hand-worked illustrations); ``branch`` is one of "mask", "random", "same".
    """
    ids = list(seq.token_ids)
    candidates = [i for i, t in enumerate(ids) if t not in vocab.special_ids]
    if positions is None:
        if not candidates:
            raise DataError("sequence has no maskable token")
        if policy.select_rate == 0.0:
            n = 0
        else:
            n = max(1, _round_half_up(policy.select_rate * len(candidates)))
        chosen = sorted(int(i) for i in rng.choice(candidates, size=n, replace=False)) if n else []
    else:
        bad = [p for p in positions if p not in candidates]
        if bad:
            raise DataError(f"positions {bad} are special tokens or out of range")
        chosen = sorted(positions)

    corrupted = list(ids)
    branches = []
    normal = vocab.normal_ids
    for pos in chosen:
        if branch is None:
            u = rng.random()
            b = "mask" if u < policy.p_mask else ("random" if u < policy.p_mask + policy.p_random else "same")
        else:
            b = branch
        if b == "mask":
            corrupted[pos] = vocab.mask_id
        elif b == "random":
            corrupted[pos] = normal[int(rng.integers(len(normal)))]
        elif b != "same":
            raise ValueError(f"unknown masking branch {b!r}")
        branches.append(b)
    out = EncodedSequence(corrupted, list(seq.segment_ids), seq.len_a, seq.len_b)
    return PretrainExample(out, chosen, [ids[p] for p in chosen], NspLabel(nsp_label), ids, branches)


def build_pretrain_example(docs: Sequence[Document], max_len: int, policy: MaskingPolicy, vocab: Vocab,
                           rng: np.random.Generator, mask: bool = True) -> PretrainExample:
    pair = sample_nsp_pair(docs, rng, max_len)
    seq = encode_pair(vocab, pair.a, pair.b, max_len)
    if not mask:
        return PretrainExample(seq, [], [], pair.label, list(seq.token_ids), [])
    return apply_masking(seq, policy, vocab, rng, pair.label)


def build_pretrain_batch(docs: Sequence[Document], batch_size: int, max_len: int, policy: MaskingPolicy,
                         vocab: Vocab, rng: np.random.Generator, mask: bool = True) -> list[PretrainExample]:
    """Independent examples drawn sequentially from one rng stream.

    ``mask=False`` skips MLM corruption (left-to-right LM objective).
    """
    return [build_pretrain_example(docs, max_len, policy, vocab, rng, mask) for _ in range(batch_size)]


def stream_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    """Generator for (base seed, stream/worker id, batch index); independent of call order."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream), int(index)]))


# ---------------------------------------------------------------------------
# fine-tuning datasets
# ---------------------------------------------------------------------------
@dataclass
class ClsExample:
    seq: EncodedSequence
    label: int


@dataclass
class SpanExample:
    seq: EncodedSequence
    start: Optional[int]
    end: Optional[int]
    answers: list[str]
    tokens: list[str]


@dataclass
class ChoiceExample:
    seqs: list[EncodedSequence]
    label: int


@dataclass
class TagExample:
    seq: EncodedSequence
    labels: list[int]  # per position; IGNORE_INDEX except first sub-tokens
    words: list[str] = field(default_factory=list)


@dataclass
class LoadReport:
    loaded: int = 0
    dropped: int = 0
    reasons: list[str] = field(default_factory=list)


def _read_lines(path) -> list[str]:
    try:
        return Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def load_cls_dataset(path, tokenizer: WordPieceTokenizer, max_len: int) -> list[ClsExample]:
    """Rows ``label<TAB>text_a[<TAB>text_b]`` with integer labels."""
    out = []
    for lineno, line in enumerate(_read_lines(path), 1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) not in (2, 3):
            raise DataError(f"{path}:{lineno}: expected 2 or 3 tab-separated columns, got {len(cols)}")
        try:
            label = int(cols[0])
        except ValueError:
            raise DataError(f"{path}:{lineno}: label {cols[0]!r} is not an integer") from None
        if label < 0:
            raise DataError(f"{path}:{lineno}: negative label")
        a = tokenizer.encode(cols[1])
        if not a:
            raise DataError(f"{path}:{lineno}: empty text_a")
        b = tokenizer.encode(cols[2]) if len(cols) == 3 else None
        out.append(ClsExample(encode_pair(tokenizer.vocab, a, b, max_len), label))
    return out


def _load_jsonl(path) -> list[tuple[int, dict]]:
    rows = []
    for lineno, line in enumerate(_read_lines(path), 1):
        if not line.strip():
            continue
        try:
            rows.append((lineno, json.loads(line)))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
    return rows


def load_span_dataset(path, tokenizer: WordPieceTokenizer, max_len: int,
                      report: Optional[LoadReport] = None) -> list[SpanExample]:
    """JSONL rows ``{"question", "context", "answers": [{"text", "answer_start"}]}``.

    An empty ``answers`` list marks an unanswerable question (start/end None).
    """
    report = report if report is not None else LoadReport()
    vocab = tokenizer.vocab
    out = []
    for lineno, row in _load_jsonl(path):
        try:
            question, context, answers = row["question"], row["context"], row.get("answers", [])
        except (KeyError, TypeError):
            raise DataError(f"{path}:{lineno}: span rows need 'question' and 'context'") from None
        q_ids = tokenizer.encode(question)
        pieces = tokenizer.pieces(context)
        if not q_ids or not pieces:
            raise DataError(f"{path}:{lineno}: empty question or context")
        seq = encode_pair(vocab, q_ids, [vocab.index.get(p.text, vocab.unk_id) for p in pieces], max_len)
        kept = pieces[: seq.len_b]
        offset = seq.b_offset
        texts = [a["text"] for a in answers]
        if not answers:
            out.append(SpanExample(seq, None, None, [""], [p.text for p in kept]))
            report.loaded += 1
            continue
        first = answers[0]
        a_start = int(first["answer_start"])
        a_end = a_start + len(first["text"])
        starts = [i for i, p in enumerate(kept) if p.char_start == a_start and p.is_first]
        ends = [i for i, p in enumerate(kept) if p.char_end == a_end
                and (i + 1 == len(kept) or kept[i + 1].is_first)]
        if not starts or not ends or ends[-1] < starts[0]:
            report.dropped += 1
            report.reasons.append(f"{path}:{lineno}: answer not alignable to tokens")
            continue
        out.append(SpanExample(seq, offset + starts[0], offset + ends[-1], texts, [p.text for p in kept]))
        report.loaded += 1
    return out


def load_choice_dataset(path, tokenizer: WordPieceTokenizer, max_len: int,
                        n_choices: int = 4) -> list[ChoiceExample]:
    """JSONL rows ``{"context", "choices": [4 strings], "label"}``."""
    out = []
    for lineno, row in _load_jsonl(path):
        try:
            context, choices, label = row["context"], row["choices"], int(row["label"])
        except (KeyError, TypeError, ValueError):
            raise DataError(f"{path}:{lineno}: choice rows need 'context', 'choices', 'label'") from None
        if len(choices) != n_choices:
            raise DataError(f"{path}:{lineno}: expected {n_choices} choices, got {len(choices)}")
        if not 0 <= label < n_choices:
            raise DataError(f"{path}:{lineno}: label {label} out of range")
        a = tokenizer.encode(context)
        seqs = [encode_pair(tokenizer.vocab, a, tokenizer.encode(c), max_len) for c in choices]
        out.append(ChoiceExample(seqs, label))
    return out


def load_tag_dataset(path, tokenizer: WordPieceTokenizer, max_len: int,
                     label_names: Optional[Sequence[str]] = None) -> tuple[list[TagExample], list[str]]:
    """CoNLL-style ``word<TAB>label`` lines, blank line between sentences.

    Labels land on each word's first sub-token; continuation pieces and
    special tokens get IGNORE_INDEX. Returns the examples and the label list.
    """
    sentences: list[list[tuple[str, str]]] = []
    current: list[tuple[str, str]] = []
    for lineno, line in enumerate(_read_lines(path), 1):
        if not line.strip():
            if current:
                sentences.append(current)
            current = []
            continue
        cols = line.split("\t")
        if len(cols) != 2 or not cols[0].strip():
            raise DataError(f"{path}:{lineno}: expected 'word<TAB>label'")
        current.append((cols[0].strip(), cols[1].strip()))
    if current:
        sentences.append(current)
    if label_names is None:
        label_names = sorted({lab for s in sentences for _, lab in s})
    label_index = {name: i for i, name in enumerate(label_names)}
    vocab = tokenizer.vocab
    out = []
    for sent in sentences:
        ids, labels, words = [], [], []
        for word, lab in sent:
            if lab not in label_index:
                raise DataError(f"{path}: unknown label {lab!r}")
            pieces = tokenizer.tokenize(word) or [vocab.tokens[vocab.unk_id]]
            ids.extend(vocab.to_ids(pieces))
            labels.extend([label_index[lab]] + [IGNORE_INDEX] * (len(pieces) - 1))
            words.append(word)
        seq = encode_pair(vocab, ids, None, max_len)
        body = labels[: seq.len_a]
        out.append(TagExample(seq, [IGNORE_INDEX] + body + [IGNORE_INDEX], words))
    return out, list(label_names)
