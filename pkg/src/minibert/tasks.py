"""Per-task glue between datasets, heads, losses and dev metrics."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import heads as Hd
from .data import (IGNORE_INDEX, ChoiceExample, ClsExample, SpanExample, TagExample, load_choice_dataset,
                   load_cls_dataset, load_span_dataset, load_tag_dataset)
from .metrics import accuracy, mean_em_f1, select_null_threshold, span_em_f1
from .model import Batch, ModelConfig, encoder_forward
from .tensor import Tensor, cross_entropy, no_grad
from .tokenizer import WordPieceTokenizer, detokenize

HEAD_KINDS = ("classification", "span", "span_v2", "choice", "tagging")
# CLI short names
TASK_ALIASES = {"cls": "classification", "span": "span", "span_v2": "span_v2", "choice": "choice",
                "tag": "tagging"}


@dataclass
class TaskData:
    train: list
    dev: list
    num_labels: int = 2
    label_names: list = field(default_factory=list)


class Task:
    kind = ""
    primary_metric = "accuracy"

    def __init__(self, config: ModelConfig, pad_id: int, num_labels: int = 2,
                 max_span_len: int = Hd.DEFAULT_MAX_SPAN_LEN, eval_batch_size: int = 64):
        self.config = config
        self.pad_id = pad_id
        self.num_labels = num_labels
        self.max_span_len = max_span_len
        self.eval_batch_size = eval_batch_size
        self.tau = 0.0

    def create_head(self, rng) -> Hd.Head:
        raise NotImplementedError

    def loss(self, params: dict, head, examples: Sequence, training: bool, rng) -> Tensor:
        raise NotImplementedError

    def predict(self, params: dict, head, examples: Sequence) -> list:
        raise NotImplementedError

    def score(self, preds: list, examples: Sequence) -> dict:
        raise NotImplementedError

    def evaluate(self, params: dict, head, examples: Sequence) -> tuple[dict, list]:
        preds = self.predict(params, head, examples)
        return self.score(preds, examples), preds

    def _encode(self, params, seqs, training=False, rng=None):
        return encoder_forward(Batch.from_sequences(seqs, self.pad_id), params, self.config, training, rng)

    def _chunks(self, examples):
        for i in range(0, len(examples), self.eval_batch_size):
            yield examples[i: i + self.eval_batch_size]


class ClassificationTask(Task):
    kind = "classification"

    def create_head(self, rng):
        return Hd.ClsHead.create(self.config, rng, self.num_labels)

    def loss(self, params, head, examples: Sequence[ClsExample], training, rng):
        out = self._encode(params, [e.seq for e in examples], training, rng)
        logp = Hd.classify(out, head)
        labels = np.asarray([e.label for e in examples])
        return -logp[np.arange(len(examples)), labels].mean()

    def predict(self, params, head, examples):
        preds = []
        with no_grad():
            for chunk in self._chunks(examples):
                logp = Hd.classify(self._encode(params, [e.seq for e in chunk]), head)
                preds.extend(int(k) for k in np.argmax(logp.data, axis=-1))
        return preds

    def score(self, preds, examples):
        return {"accuracy": accuracy(preds, [e.label for e in examples])}


class SpanTask(Task):
    kind = "span"
    primary_metric = "f1"
    with_null = False

    def create_head(self, rng):
        return Hd.SpanHead.create(self.config, rng)

    def _targets(self, examples: Sequence[SpanExample]):
        starts = [0 if e.start is None else e.start for e in examples]
        ends = [0 if e.end is None else e.end for e in examples]
        return starts, ends

    def loss(self, params, head, examples, training, rng):
        if not self.with_null and any(e.start is None for e in examples):
            raise ValueError("unanswerable example in span (v1.1) training data; use span_v2")
        out = self._encode(params, [e.seq for e in examples], training, rng)
        starts, ends = self._targets(examples)
        return Hd.span_loss(out, head, starts, ends, include_cls=self.with_null)

    def _decode(self, params, head, examples):
        """Best passage span (relative token indices), span score and null score per example."""
        rows = []
        with no_grad():
            for chunk in self._chunks(examples):
                out = self._encode(params, [e.seq for e in chunk])
                s, e = Hd.span_logits(out, head)
                mask = Hd.passage_mask(out.batch)
                for b, ex in enumerate(chunk):
                    idx = np.nonzero(mask[b])[0]
                    i, j, score = Hd.best_span(s.data[b, idx], e.data[b, idx], self.max_span_len)
                    null = float(s.data[b, 0] + e.data[b, 0])
                    rows.append((i, j, score, null))
        return rows

    def _text(self, ex: SpanExample, i: int, j: int) -> str:
        return detokenize(ex.tokens[i: j + 1])

    def predict(self, params, head, examples):
        rows = self._decode(params, head, examples)
        preds = []
        for ex, (i, j, score, null) in zip(examples, rows):
            if self.with_null and not score > null + self.tau:
                preds.append({"text": "", "span": None, "diff": score - null})
            else:
                preds.append({"text": self._text(ex, i, j), "span": [i, j], "diff": score - null})
        return preds

    def score(self, preds, examples):
        em, f1 = mean_em_f1([p["text"] for p in preds], [e.answers for e in examples])
        return {"em": em, "f1": f1}


class SpanV2Task(SpanTask):
    kind = "span_v2"
    with_null = True

    def evaluate(self, params, head, examples):
        """Calibrate tau on these examples to maximize F1, then score at that tau."""
        rows = self._decode(params, head, examples)
        diffs, f_span, f_null = [], [], []
        for ex, (i, j, score, null) in zip(examples, rows):
            diffs.append(score - null)
            f_span.append(span_em_f1(self._text(ex, i, j), ex.answers)[1])
            f_null.append(span_em_f1("", ex.answers)[1])
        self.tau, _ = select_null_threshold(diffs, f_span, f_null)
        head.tau = self.tau
        preds = self.predict(params, head, examples)
        metrics = self.score(preds, examples)
        metrics["tau"] = self.tau
        return metrics, preds


class ChoiceTask(Task):
    kind = "choice"

    def create_head(self, rng):
        return Hd.ChoiceHead.create(self.config, rng)

    def _outs(self, params, examples: Sequence[ChoiceExample], training=False, rng=None):
        return [self._encode(params, [e.seqs[c] for e in examples], training, rng) for c in range(4)]

    def loss(self, params, head, examples, training, rng):
        logits = Hd.choice_logits(self._outs(params, examples, training, rng), head)
        labels = np.asarray([e.label for e in examples])
        return cross_entropy(logits, labels)

    def predict(self, params, head, examples):
        preds = []
        with no_grad():
            for chunk in self._chunks(examples):
                probs = Hd.choice_scores(self._outs(params, chunk), head)
                preds.extend(int(k) for k in np.argmax(probs.data, axis=-1))
        return preds

    def score(self, preds, examples):
        return {"accuracy": accuracy(preds, [e.label for e in examples])}


def _tag_labels(examples: Sequence[TagExample], n: int) -> np.ndarray:
    out = np.full((len(examples), n), IGNORE_INDEX, dtype=np.int64)
    for b, e in enumerate(examples):
        out[b, : len(e.labels)] = e.labels
    return out


class TaggingTask(Task):
    kind = "tagging"

    def create_head(self, rng):
        return Hd.TagHead.create(self.config, rng, self.num_labels)

    def loss(self, params, head, examples, training, rng):
        out = self._encode(params, [e.seq for e in examples], training, rng)
        labels = _tag_labels(examples, out.batch.length)
        return Hd.tag_loss(Hd.tag_logits(out, head), labels)

    def predict(self, params, head, examples):
        preds = []
        with no_grad():
            for chunk in self._chunks(examples):
                out = self._encode(params, [e.seq for e in chunk])
                best = np.argmax(Hd.tag_logits(out, head).data, axis=-1)
                for b, e in enumerate(chunk):
                    preds.append([int(best[b, i]) for i, lab in enumerate(e.labels) if lab != IGNORE_INDEX])
        return preds

    def score(self, preds, examples):
        flat_p = [p for ps in preds for p in ps]
        flat_g = [g for e in examples for g in e.labels if g != IGNORE_INDEX]
        return {"accuracy": accuracy(flat_p, flat_g)}


TASKS = {t.kind: t for t in (ClassificationTask, SpanTask, SpanV2Task, ChoiceTask, TaggingTask)}


def make_task(kind: str, config: ModelConfig, pad_id: int, num_labels: int = 2, **kw) -> Task:
    kind = TASK_ALIASES.get(kind, kind)
    if kind not in TASKS:
        raise ValueError(f"head_kind must be one of {HEAD_KINDS}, got {kind!r}")
    return TASKS[kind](config, pad_id, num_labels, **kw)


HEAD_CLASSES = {"classification": Hd.ClsHead, "span": Hd.SpanHead, "span_v2": Hd.SpanHead,
                "choice": Hd.ChoiceHead, "tagging": Hd.TagHead}


def head_from_weights(kind: str, weights: dict, tau: float = 0.0) -> Hd.Head:
    """Rebuild a fine-tuned head from checkpoint arrays."""
    kind = TASK_ALIASES.get(kind, kind)
    cls = HEAD_CLASSES[kind]
    params = {n: Tensor(a) for n, a in weights.items() if n.startswith(cls.prefix + ".")}
    if not params:
        raise ValueError(f"checkpoint has no {cls.prefix!r} head parameters")
    return cls(params, tau) if cls is Hd.SpanHead else cls(params)


def load_task_data(kind: str, train_path, dev_path, tokenizer: WordPieceTokenizer, max_len: int) -> TaskData:
    """Read a train/dev pair in the file format of ``kind``; ``train_path`` may be None for eval."""
    kind = TASK_ALIASES.get(kind, kind)
    if kind == "classification":
        train = load_cls_dataset(train_path, tokenizer, max_len) if train_path else []
        dev = load_cls_dataset(dev_path, tokenizer, max_len)
        labels = [e.label for e in train + dev]
        return TaskData(train, dev, max(2, max(labels) + 1))
    if kind in ("span", "span_v2"):
        train = load_span_dataset(train_path, tokenizer, max_len) if train_path else []
        return TaskData(train, load_span_dataset(dev_path, tokenizer, max_len))
    if kind == "choice":
        train = load_choice_dataset(train_path, tokenizer, max_len) if train_path else []
        return TaskData(train, load_choice_dataset(dev_path, tokenizer, max_len), 4)
    if kind == "tagging":
        train, names = load_tag_dataset(train_path, tokenizer, max_len) if train_path else ([], None)
        dev, names = load_tag_dataset(dev_path, tokenizer, max_len, names)
        return TaskData(train, dev, len(names), names)
    raise ValueError(f"head_kind must be one of {HEAD_KINDS}, got {kind!r}")
