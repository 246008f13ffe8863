"""Feature-based use of a frozen encoder: layer selection strategies and a
downstream BiLSTM tagger trained on cached activations."""
from __future__ import annotations

import hashlib
import io
import math
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointFormatError, _Reader, read_magic, write_tensor_directory
from .data import IGNORE_INDEX, TagExample, stream_rng
from .metrics import accuracy
from .model import Batch, ModelConfig, EncoderOutput, encoder_forward, truncated_normal
from .tensor import Tensor, no_grad
from .training import AdamW, Schedule, lr_at_step


class FeatureStrategy(str, Enum):
    EMBEDDINGS = "embeddings-only"
    SECOND_TO_LAST = "second-to-last"
    LAST = "last"
    WEIGHTED_LAST4 = "weighted-sum-last-4"
    CONCAT_LAST4 = "concat-last-4"
    WEIGHTED_ALL = "weighted-sum-all"

    @property
    def weighted(self) -> bool:
        return self in (FeatureStrategy.WEIGHTED_LAST4, FeatureStrategy.WEIGHTED_ALL)


STRATEGY_NAMES = [s.value for s in FeatureStrategy]


def selected_layers(strategy: FeatureStrategy, L: int) -> list[int]:
    """Indices into ``hidden_states`` (0 = embeddings), most recent layer first."""
    strategy = FeatureStrategy(strategy)
    need = {FeatureStrategy.EMBEDDINGS: 0, FeatureStrategy.LAST: 1, FeatureStrategy.SECOND_TO_LAST: 2,
            FeatureStrategy.WEIGHTED_LAST4: 4, FeatureStrategy.CONCAT_LAST4: 4, FeatureStrategy.WEIGHTED_ALL: 1}
    if L < need[strategy]:
        raise ValueError(f"strategy {strategy.value} needs at least {need[strategy]} layers, model has {L}")
    if strategy is FeatureStrategy.EMBEDDINGS:
        return [0]
    if strategy is FeatureStrategy.LAST:
        return [L]
    if strategy is FeatureStrategy.SECOND_TO_LAST:
        return [L - 1]
    if strategy is FeatureStrategy.WEIGHTED_ALL:
        return list(range(L, 0, -1))
    return [L, L - 1, L - 2, L - 3]


def layer_stack(out: EncoderOutput, strategy) -> np.ndarray:
    """[k, B, N, H] copy of the selected hidden states."""
    L = len(out.hidden_states) - 1
    return np.stack([out.hidden_states[i].data for i in selected_layers(strategy, L)]).copy()


def combine(stack: np.ndarray, strategy, weights: Optional[np.ndarray] = None) -> np.ndarray:
    strategy = FeatureStrategy(strategy)
    if strategy is FeatureStrategy.CONCAT_LAST4:
        return np.concatenate(list(stack), axis=-1)
    if strategy.weighted:
        k = stack.shape[0]
        w = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=np.float64)
        if w.shape != (k,) or abs(w.sum() - 1.0) > 1e-6 or (w < 0).any():
            raise ValueError(f"mixing weights must be {k} non-negative values summing to 1")
        acc = stack[0] * stack.dtype.type(w[0])
        for i in range(1, k):
            acc = acc + stack[i] * stack.dtype.type(w[i])
        return acc
    return stack[0]


def extract_features(out: EncoderOutput, strategy, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-token vectors for ``strategy``; dim H, or 4H for concat-last-4."""
    return combine(layer_stack(out, strategy), strategy, weights)


def encode_frozen(params: dict, config: ModelConfig, seqs, pad_id: int) -> EncoderOutput:
    with no_grad():
        return encoder_forward(Batch.from_sequences(seqs, pad_id), params, config, training=False)


def feature_inputs(params: dict, config: ModelConfig, examples: Sequence[TagExample], strategy, pad_id: int,
                   batch_size: int = 64) -> list[np.ndarray]:
    """Cacheable per-example arrays: [n, D] for fixed strategies, [k, n, H] for weighted ones."""
    strategy = FeatureStrategy(strategy)
    feats = []
    for i in range(0, len(examples), batch_size):
        chunk = examples[i: i + batch_size]
        out = encode_frozen(params, config, [e.seq for e in chunk], pad_id)
        stack = layer_stack(out, strategy)
        for b, e in enumerate(chunk):
            n = len(e.seq)
            if strategy.weighted:
                feats.append(stack[:, b, :n].copy())
            else:
                feats.append(combine(stack[:, b:b + 1, :n], strategy)[0].copy())
    return feats


# ---------------------------------------------------------------------------
# feature cache
# ---------------------------------------------------------------------------
CACHE_MAGIC = b"MBRF"
CACHE_VERSION = 1


def cache_key(corpus_hash: str, checkpoint_hash: str, strategy) -> str:
    raw = f"{corpus_hash}:{checkpoint_hash}:{FeatureStrategy(strategy).value}".encode()
    return hashlib.sha256(raw).hexdigest()


class FeatureCache:
    """Directory of feature files in the checkpoint tensor-directory encoding."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, key: str) -> Path:
        return self.root / f"{key}.mbrf"

    def put(self, key: str, feats: Sequence[np.ndarray]) -> Path:
        buf = io.BytesIO()
        buf.write(CACHE_MAGIC)
        buf.write(struct.pack("<I", CACHE_VERSION))
        write_tensor_directory(buf, {f"{i:06d}": f for i, f in enumerate(feats)})
        p = self.path(key)
        tmp = p.with_suffix(".tmp")
        tmp.write_bytes(buf.getvalue())
        tmp.replace(p)
        return p

    def get(self, key: str) -> Optional[list[np.ndarray]]:
        p = self.path(key)
        if not p.exists():
            return None
        r = _Reader(p.read_bytes())
        if read_magic(r, CACHE_MAGIC) != CACHE_VERSION:
            raise CheckpointFormatError(f"unsupported feature cache version in {p}")
        d = r.tensors()
        return [d[k] for k in sorted(d)]

    def get_or_compute(self, key: str, compute) -> list[np.ndarray]:
        hit = self.get(key)
        if hit is not None:
            return hit
        feats = compute()
        self.put(key, feats)
        return feats


# ---------------------------------------------------------------------------
# downstream BiLSTM tagger
# ---------------------------------------------------------------------------
def _init(rng, shape, dtype, scale):
    return Tensor(truncated_normal(rng, shape, scale, dtype) if len(shape) > 1 else np.zeros(shape, dtype),
                  requires_grad=True)


class BiLSTMTagger:
    """Optional scalar mix, ``layers`` bidirectional LSTM layers, then a linear classifier."""

    def __init__(self, input_dim: int, num_labels: int, hidden: int, rng, layers: int = 2,
                 mix_layers: int = 0, dtype=np.float32):
        self.params: dict[str, Tensor] = {}
        self.hidden = hidden
        self.layers = layers
        if mix_layers:
            self.params["mix.logits"] = Tensor(np.zeros(mix_layers, dtype=dtype), requires_grad=True)
        dim = input_dim
        for layer in range(layers):
            for direction in ("fw", "bw"):
                p = f"lstm.{layer}.{direction}."
                self.params[p + "wx"] = _init(rng, (dim, 4 * hidden), dtype, 1.0 / math.sqrt(dim))
                self.params[p + "wh"] = _init(rng, (hidden, 4 * hidden), dtype, 1.0 / math.sqrt(hidden))
                bias = np.zeros(4 * hidden, dtype=dtype)
                bias[hidden:2 * hidden] = 1.0  # forget gate
                self.params[p + "b"] = Tensor(bias, requires_grad=True)
            dim = 2 * hidden
        self.params["out.weight"] = _init(rng, (dim, num_labels), dtype, 1.0 / math.sqrt(dim))
        self.params["out.bias"] = Tensor(np.zeros(num_labels, dtype=dtype), requires_grad=True)

    def mix_weights(self) -> Optional[np.ndarray]:
        if "mix.logits" not in self.params:
            return None
        return T.softmax(self.params["mix.logits"]).data

    def _direction(self, x: Tensor, mask: np.ndarray, prefix: str, reverse: bool) -> Tensor:
        B, N, _ = x.shape
        h_dim = self.hidden
        wx, wh, b = self.params[prefix + "wx"], self.params[prefix + "wh"], self.params[prefix + "b"]
        proj = x @ wx + b
        h = Tensor(np.zeros((B, h_dim), dtype=x.dtype))
        c = Tensor(np.zeros((B, h_dim), dtype=x.dtype))
        outs: list = [None] * N
        steps = range(N - 1, -1, -1) if reverse else range(N)
        for t in steps:
            gates = proj[:, t, :] + h @ wh
            i = T.sigmoid(gates[:, :h_dim])
            f = T.sigmoid(gates[:, h_dim:2 * h_dim])
            g = T.tanh(gates[:, 2 * h_dim:3 * h_dim])
            o = T.sigmoid(gates[:, 3 * h_dim:])
            c_new = f * c + i * g
            h_new = o * T.tanh(c_new)
            m = Tensor(mask[:, t:t + 1].astype(x.dtype))
            keep = Tensor(1.0 - mask[:, t:t + 1].astype(x.dtype))
            c = c_new * m + c * keep
            h = h_new * m + h * keep
            outs[t] = h_new * m
        return T.stack(outs, axis=1)

    def forward(self, x: Tensor, mask: np.ndarray) -> Tensor:
        """``x``: [B, N, D] (or [k, B, N, H] when mixing); returns [B, N, labels] logits."""
        if "mix.logits" in self.params:
            w = T.softmax(self.params["mix.logits"])
            x = (x * w.reshape(-1, 1, 1, 1)).sum(axis=0)
        for layer in range(self.layers):
            fw = self._direction(x, mask, f"lstm.{layer}.fw.", False)
            bw = self._direction(x, mask, f"lstm.{layer}.bw.", True)
            x = T.concat([fw, bw], axis=-1)
        return x @ self.params["out.weight"] + self.params["out.bias"]


@dataclass
class TaggerResult:
    metrics: dict
    history: list
    tagger: BiLSTMTagger
    predictions: list


def _pad_features(feats: Sequence[np.ndarray], weighted: bool) -> tuple[np.ndarray, np.ndarray]:
    n = max(f.shape[-2] for f in feats)
    if weighted:
        k, _, d = feats[0].shape
        x = np.zeros((k, len(feats), n, d), dtype=feats[0].dtype)
        for b, f in enumerate(feats):
            x[:, b, : f.shape[1]] = f
    else:
        d = feats[0].shape[-1]
        x = np.zeros((len(feats), n, d), dtype=feats[0].dtype)
        for b, f in enumerate(feats):
            x[b, : f.shape[0]] = f
    mask = np.zeros((len(feats), n), dtype=bool)
    for b, f in enumerate(feats):
        mask[b, : f.shape[-2]] = True
    return x, mask


def _pad_labels(labels: Sequence[Sequence[int]], n: int) -> np.ndarray:
    out = np.full((len(labels), n), IGNORE_INDEX, dtype=np.int64)
    for b, lab in enumerate(labels):
        out[b, : len(lab)] = lab
    return out


def frozen_tagger_train(features: Sequence[np.ndarray], labels: Sequence[Sequence[int]],
                        dev_features: Sequence[np.ndarray], dev_labels: Sequence[Sequence[int]],
                        num_labels: int, seed: int, hidden: int = 32, layers: int = 2, epochs: int = 10,
                        batch_size: int = 16, lr: float = 3e-3, weighted: bool = False) -> TaggerResult:
    """Train the BiLSTM tagger on precomputed (frozen) features.

    Labels use IGNORE_INDEX on non-first sub-tokens and special positions;
    only first sub-tokens enter the loss and the accuracy.
    """
    feats = list(features)
    dim = feats[0].shape[-1]
    mix = feats[0].shape[0] if weighted else 0
    tagger = BiLSTMTagger(dim, num_labels, hidden, stream_rng(seed, 7, 0), layers, mix, feats[0].dtype)
    opt = AdamW(tagger.params, weight_decay=0.0)
    steps_per_epoch = math.ceil(len(feats) / batch_size)
    schedule = Schedule(lr, 0, steps_per_epoch * epochs)
    history, step = [], 0
    for epoch in range(epochs):
        order = stream_rng(seed, 8, epoch).permutation(len(feats))
        for k in range(steps_per_epoch):
            idx = order[k * batch_size:(k + 1) * batch_size]
            x, mask = _pad_features([feats[i] for i in idx], weighted)
            y = _pad_labels([labels[i] for i in idx], mask.shape[1])
            opt.zero_grad()
            logits = tagger.forward(Tensor(x), mask)
            B, N, K = logits.shape
            loss = T.cross_entropy(logits.reshape(B * N, K), y.reshape(-1))
            loss.backward()
            step += 1
            opt.step(lr_at_step(schedule, step))
        history.append({"epoch": epoch + 1, "loss": float(loss.data)})
    preds = tagger_predict(tagger, dev_features, weighted)
    flat_p, flat_g = [], []
    for p, g in zip(preds, dev_labels):
        for pi, gi in zip(p, g):
            if gi != IGNORE_INDEX:
                flat_p.append(pi)
                flat_g.append(gi)
    return TaggerResult({"accuracy": accuracy(flat_p, flat_g)}, history, tagger, preds)


def tagger_predict(tagger: BiLSTMTagger, features: Sequence[np.ndarray], weighted: bool,
                   batch_size: int = 64) -> list[list[int]]:
    out = []
    with no_grad():
        for i in range(0, len(features), batch_size):
            chunk = list(features[i: i + batch_size])
            x, mask = _pad_features(chunk, weighted)
            best = np.argmax(tagger.forward(Tensor(x), mask).data, axis=-1)
            for b, f in enumerate(chunk):
                out.append([int(v) for v in best[b, : f.shape[-2]]])
    return out
