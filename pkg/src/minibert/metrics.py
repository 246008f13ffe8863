"""Metric functions and the report record shared by training and ablations."""
from __future__ import annotations

import collections
import hashlib
import json
import re
import string
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

_BOUNDED = ("accuracy", "em", "f1", "exact_match")


@dataclass
class MetricReport:
    task: str
    metrics: dict[str, float]
    count: int
    seed: Optional[int] = None
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, value in self.metrics.items():
            base = name.split("/")[-1]
            if base in _BOUNDED and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [0, 1]")
            if base == "perplexity" and value < 1.0:
                raise ValueError(f"perplexity {value} < 1")

    def __getitem__(self, key: str) -> float:
        return self.metrics[key]

    def to_dict(self) -> dict:
        return asdict(self)


def config_hash(obj) -> str:
    raw = json.dumps(obj, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(raw).hexdigest()[:16]


def accuracy(preds: Sequence, golds: Sequence) -> float:
    if len(preds) != len(golds):
        raise ValueError(f"{len(preds)} predictions for {len(golds)} gold labels")
    if not golds:
        raise ValueError("accuracy of an empty set is undefined")
    return sum(p == g for p, g in zip(preds, golds)) / len(golds)


_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)


def normalize_answer(text: str) -> str:
    """Lowercase, drop punctuation and English articles, collapse whitespace."""
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNCT)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def _f1(pred: str, gold: str) -> float:
    p, g = normalize_answer(pred).split(), normalize_answer(gold).split()
    if not p or not g:
        return float(p == g)
    common = collections.Counter(p) & collections.Counter(g)
    overlap = sum(common.values())
    if overlap == 0:
        return 0.0
    precision, recall = overlap / len(p), overlap / len(g)
    return 2 * precision * recall / (precision + recall)


def span_em_f1(pred: Optional[str], golds: Sequence[str]) -> tuple[float, float]:
    """Exact match and token F1, each maximized over the gold answers.

    Unanswerable questions use the empty string for both prediction and gold.
    """
    if not golds:
        raise ValueError("span_em_f1 needs at least one gold answer")
    pred = pred or ""
    em = max(float(normalize_answer(pred) == normalize_answer(g)) for g in golds)
    f1 = max(_f1(pred, g) for g in golds)
    return em, f1


def mean_em_f1(preds: Sequence[Optional[str]], golds: Sequence[Sequence[str]]) -> tuple[float, float]:
    pairs = [span_em_f1(p, g) for p, g in zip(preds, golds)]
    if not pairs:
        raise ValueError("no span predictions to score")
    return sum(e for e, _ in pairs) / len(pairs), sum(f for _, f in pairs) / len(pairs)


def select_null_threshold(diffs: Sequence[float], span_scores: Sequence[float],
                          null_scores: Sequence[float]) -> tuple[float, float]:
    """Pick tau maximizing mean F1, where an example predicts its span iff ``diff > tau``.

    ``diffs`` are best-span score minus null score; ``span_scores`` and
    ``null_scores`` are each example's F1 under a span or a null prediction.
    Mean F1 only changes at the observed diffs, so those (plus one value
    below all of them) are the complete candidate set. Ties keep the smallest tau.
    """
    if len(diffs) == 0:
        raise ValueError("no examples to calibrate the null threshold on")
    candidates = sorted(set(float(d) for d in diffs))
    candidates.insert(0, candidates[0] - 1.0)
    best_tau, best_f1 = None, -1.0
    n = len(diffs)
    for tau in candidates:
        f1 = sum(s if d > tau else z for d, s, z in zip(diffs, span_scores, null_scores)) / n
        if f1 > best_f1:
            best_tau, best_f1 = tau, f1
    return best_tau, best_f1
