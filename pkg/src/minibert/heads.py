"""Output heads and losses for pre-training and every fine-tuning task."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .data import IGNORE_INDEX, PretrainExample
from .model import EncoderOutput, ModelConfig, truncated_normal
from .tensor import Tensor

DEFAULT_MAX_SPAN_LEN = 30


class Head:
    """Named parameters under a common prefix."""

    prefix = ""

    def __init__(self, params: dict[str, Tensor]):
        self.params = params

    def __getitem__(self, key: str) -> Tensor:
        return self.params[f"{self.prefix}.{key}"]

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params

    @classmethod
    def _build(cls, shapes: dict, config: ModelConfig, rng: np.random.Generator) -> dict:
        out = {}
        for key, shape in shapes.items():
            name = f"{cls.prefix}.{key}"
            if key.endswith("gain"):
                data = np.ones(shape, dtype=config.np_dtype)
            elif key.endswith("bias"):
                data = np.zeros(shape, dtype=config.np_dtype)
            else:
                data = truncated_normal(rng, shape, config.init_std, config.np_dtype)
            out[name] = Tensor(data, requires_grad=True)
        return out


class MlmHead(Head):
    """gelu + layer-norm transform, then a projection onto the vocabulary.

    When tied, the projection reads the encoder's token table directly, so
    the two share one array.
    """

    prefix = "mlm"

    def __init__(self, params, config: ModelConfig, token_table: Optional[Tensor] = None):
        super().__init__(params)
        self.config = config
        self.token_table = token_table
        if config.tie_mlm and token_table is None:
            raise ValueError("tied MLM head needs the encoder token table")

    @classmethod
    def create(cls, config: ModelConfig, rng, token_table: Optional[Tensor] = None) -> "MlmHead":
        H, V = config.H, config.V
        shapes = {"transform.weight": (H, H), "transform.bias": (H,), "norm.gain": (H,), "norm.bias": (H,),
                  "output.bias": (V,)}
        if not config.tie_mlm:
            shapes["output.weight"] = (V, H)
        return cls(cls._build(shapes, config, rng), config, token_table)

    @property
    def output_weight(self) -> Tensor:
        return self.token_table if self.config.tie_mlm else self["output.weight"]

    def logits(self, hidden: Tensor) -> Tensor:
        h = T.gelu(hidden @ self["transform.weight"] + self["transform.bias"])
        h = T.layer_norm(h, self["norm.gain"], self["norm.bias"], self.config.ln_eps)
        return h @ self.output_weight.T + self["output.bias"]


class NspHead(Head):
    prefix = "nsp"

    @classmethod
    def create(cls, config: ModelConfig, rng) -> "NspHead":
        return cls(cls._build({"weight": (2, config.H), "bias": (2,)}, config, rng))

    def logits(self, C: Tensor) -> Tensor:
        return C @ self["weight"].T + self["bias"]


class ClsHead(Head):
    prefix = "cls"

    @classmethod
    def create(cls, config: ModelConfig, rng, num_labels: int) -> "ClsHead":
        if num_labels < 2:
            raise ValueError("classification needs at least 2 labels")
        return cls(cls._build({"weight": (num_labels, config.H)}, config, rng))

    @property
    def num_labels(self) -> int:
        return self["weight"].shape[0]


class SpanHead(Head):
    prefix = "span"

    def __init__(self, params, tau: float = 0.0):
        super().__init__(params)
        self.tau = tau

    @classmethod
    def create(cls, config: ModelConfig, rng) -> "SpanHead":
        return cls(cls._build({"start": (config.H,), "end": (config.H,)}, config, rng))


class ChoiceHead(Head):
    prefix = "choice"

    @classmethod
    def create(cls, config: ModelConfig, rng) -> "ChoiceHead":
        return cls(cls._build({"score": (config.H,)}, config, rng))


class TagHead(Head):
    prefix = "tag"

    @classmethod
    def create(cls, config: ModelConfig, rng, num_labels: int) -> "TagHead":
        return cls(cls._build({"weight": (num_labels, config.H), "bias": (num_labels,)}, config, rng))


# ---------------------------------------------------------------------------
# pre-training losses
# ---------------------------------------------------------------------------
def mlm_arrays(examples: Sequence[PretrainExample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows, cols, targets = [], [], []
    for b, ex in enumerate(examples):
        rows.extend([b] * len(ex.mlm_positions))
        cols.extend(ex.mlm_positions)
        targets.extend(ex.mlm_targets)
    return np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64), np.asarray(targets, dtype=np.int64)


def mlm_loss(out: EncoderOutput, examples: Sequence[PretrainExample], head: MlmHead) -> Tensor:
    """Mean cross-entropy over masked positions only."""
    rows, cols, targets = mlm_arrays(examples)
    if rows.size == 0:
        raise ValueError("mlm_loss: no masked positions")
    return T.cross_entropy(head.logits(out.T[rows, cols]), targets)


def ltr_loss(out: EncoderOutput, head: MlmHead) -> Tensor:
    """Left-to-right LM loss: position i predicts the token at i+1."""
    ids, mask = out.batch.token_ids, out.batch.pad_mask
    B, N = ids.shape
    targets = np.where(mask[:, 1:], ids[:, 1:], IGNORE_INDEX)
    hidden = out.T[:, : N - 1, :].reshape(B * (N - 1), -1)
    return T.cross_entropy(head.logits(hidden), targets.reshape(-1))


def nsp_loss(out: EncoderOutput, labels, head: NspHead) -> Tensor:
    return T.cross_entropy(head.logits(out.C), np.asarray(labels, dtype=np.int64))


def pretrain_loss(mlm: Tensor, nsp: Optional[Tensor] = None) -> Tensor:
    """Unweighted sum; without NSP the MLM loss is returned unchanged."""
    return mlm if nsp is None else mlm + nsp


# ---------------------------------------------------------------------------
# fine-tuning heads
# ---------------------------------------------------------------------------
def classify(out: EncoderOutput, head: ClsHead) -> Tensor:
    """[B, K] log-probabilities ``log_softmax(C W^T)``."""
    return T.log_softmax(out.C @ head["weight"].T, axis=-1)


def passage_mask(batch, include_cls: bool = False) -> np.ndarray:
    """Segment-B, non-special positions (optionally plus [CLS] at index 0)."""
    segs, real = batch.segment_ids, batch.pad_mask
    mask = (segs == 1) & real
    # the final token of each real sequence is [SEP]
    last = real.sum(axis=1) - 1
    mask[np.arange(len(last)), last] = False
    if include_cls:
        mask[:, 0] = True
    return mask


def _dot(x: Tensor, v: Tensor) -> Tensor:
    """Contract the last axis of ``x`` with vector ``v``."""
    return (x @ v.reshape(v.shape[0], 1)).reshape(x.shape[:-1])


def span_logits(out: EncoderOutput, head: SpanHead) -> tuple[Tensor, Tensor]:
    """Raw start/end scores ``S.T_i`` and ``E.T_i`` for every position, [B, N] each."""
    return _dot(out.T, head["start"]), _dot(out.T, head["end"])


def masked_logits(logits: Tensor, mask: np.ndarray) -> Tensor:
    if not mask.any(axis=-1).all():
        raise ValueError("no passage positions to score")
    return logits + Tensor(np.where(mask, 0.0, -np.inf).astype(logits.dtype))


def span_scores(out: EncoderOutput, head: SpanHead, include_cls: bool = False) -> tuple[Tensor, Tensor]:
    """Start and end probabilities, softmax over passage positions; 0 elsewhere."""
    mask = passage_mask(out.batch, include_cls)
    s, e = span_logits(out, head)
    return T.softmax(masked_logits(s, mask), -1), T.softmax(masked_logits(e, mask), -1)


def span_loss(out: EncoderOutput, head: SpanHead, starts, ends, include_cls: bool = False) -> Tensor:
    """Negative sum of start and end log-likelihoods, averaged over the batch."""
    mask = passage_mask(out.batch, include_cls)
    s, e = span_logits(out, head)
    ls = T.log_softmax(masked_logits(s, mask), -1)
    le = T.log_softmax(masked_logits(e, mask), -1)
    b = np.arange(len(starts))
    return -(ls[b, np.asarray(starts)] + le[b, np.asarray(ends)]).mean()


def best_span(start_logits, end_logits, max_span_len: int = DEFAULT_MAX_SPAN_LEN) -> tuple[int, int, float]:
    """argmax of start[i] + end[j] over j >= i, j - i < max_span_len.

    Ties go to the smallest i, then the smallest j.
    """
    s = np.asarray(start_logits, dtype=np.float64)
    e = np.asarray(end_logits, dtype=np.float64)
    n = len(s)
    if n == 0 or len(e) != n:
        raise ValueError("best_span needs equal-length, non-empty logit vectors")
    best = (0, 0, s[0] + e[0])
    for i in range(n):
        stop = min(n, i + max_span_len)
        cand = s[i] + e[i:stop]
        j = int(np.argmax(cand))  # first maximum = smallest j
        if cand[j] > best[2]:
            best = (i, i + j, cand[j])
    return best[0], best[1], float(best[2])


@dataclass(frozen=True)
class SpanDecision:
    span: Optional[tuple[int, int]]
    span_score: float
    null_score: float

    @property
    def is_null(self) -> bool:
        return self.span is None


def null_or_span(start_logits, end_logits, cls_start: float, cls_end: float, tau: float,
                 max_span_len: int = DEFAULT_MAX_SPAN_LEN) -> SpanDecision:
    """Null unless the best span beats ``cls_start + cls_end + tau``."""
    i, j, score = best_span(start_logits, end_logits, max_span_len)
    null = float(cls_start) + float(cls_end)
    span = (i, j) if score > null + tau else None
    return SpanDecision(span, score, null)


def choice_scores(outs: Sequence[EncoderOutput], head: ChoiceHead) -> Tensor:
    """[B, 4] softmax over the per-choice scores ``v . C``."""
    if len(outs) != 4:
        raise ValueError(f"choice_scores needs exactly 4 encoded choices, got {len(outs)}")
    return T.softmax(choice_logits(outs, head), axis=-1)


def choice_logits(outs: Sequence[EncoderOutput], head: ChoiceHead) -> Tensor:
    return T.stack([_dot(o.C, head["score"]) for o in outs], axis=1)


def tag_logits(out: EncoderOutput, head: TagHead) -> Tensor:
    """[B, N, labels] logits at every position."""
    return out.T @ head["weight"].T + head["bias"]


def tag_loss(logits: Tensor, labels: np.ndarray, first_subtoken_mask: Optional[np.ndarray] = None) -> Tensor:
    """Cross-entropy over first sub-token positions only."""
    B, N, K = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if first_subtoken_mask is not None:
        labels = np.where(first_subtoken_mask, labels, IGNORE_INDEX)
    return T.cross_entropy(logits.reshape(B * N, K), labels.reshape(-1))
