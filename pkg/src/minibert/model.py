"""Input embeddings and the L-layer Transformer encoder."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .tokenizer import EncodedSequence

ATTENTION_MODES = ("bidirectional", "causal")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Encoder hyperparameters.

    The reference sizes are L=12, H=768, A=12 (base) and L=24, H=1024, A=16
    (large), both with a 30,000 token vocabulary and 512 positions.
    """

    L: int = 2
    H: int = 64
    A: int = 4
    V: int = 30000
    max_positions: int = 512
    ffn_size: Optional[int] = None
    dropout: float = 0.1
    attention_mode: str = "bidirectional"
    type_vocab: int = 2
    tie_mlm: bool = True
    dtype: str = "float32"
    init_std: float = 0.02
    ln_eps: float = 1e-12

    def __post_init__(self):
        if self.ffn_size is None:
            object.__setattr__(self, "ffn_size", 4 * self.H)
        if self.L < 0 or self.H < 1 or self.A < 1 or self.V < 1:
            raise ConfigError(f"invalid sizes L={self.L} H={self.H} A={self.A} V={self.V}")
        if self.H % self.A:
            raise ConfigError(f"H={self.H} is not divisible by A={self.A}")
        if self.attention_mode not in ATTENTION_MODES:
            raise ConfigError(f"attention_mode must be one of {ATTENTION_MODES}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @property
    def head_dim(self) -> int:
        return self.H // self.A

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "ModelConfig":
        d = self.to_dict()
        d.update(kw)
        return ModelConfig.from_dict(d)

    def diff(self, other: "ModelConfig") -> list[str]:
        a, b = self.to_dict(), other.to_dict()
        return [k for k in a if a[k] != b[k]]


BERT_BASE = ModelConfig(L=12, H=768, A=12, V=30000, max_positions=512)
BERT_LARGE = ModelConfig(L=24, H=1024, A=16, V=30000, max_positions=512)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------
def encoder_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Name -> shape of every encoder parameter, in initialization order."""
    H, F = config.H, config.ffn_size
    shapes = {
        "embeddings.token": (config.V, H),
        "embeddings.segment": (config.type_vocab, H),
        "embeddings.position": (config.max_positions, H),
        "embeddings.norm.gain": (H,),
        "embeddings.norm.bias": (H,),
    }
    for i in range(config.L):
        p = f"layers.{i}."
        for proj in ("query", "key", "value", "output"):
            shapes[p + f"attention.{proj}.weight"] = (H, H)
            shapes[p + f"attention.{proj}.bias"] = (H,)
        shapes[p + "attention_norm.gain"] = (H,)
        shapes[p + "attention_norm.bias"] = (H,)
        shapes[p + "ffn.intermediate.weight"] = (H, F)
        shapes[p + "ffn.intermediate.bias"] = (F,)
        shapes[p + "ffn.output.weight"] = (F, H)
        shapes[p + "ffn.output.bias"] = (H,)
        shapes[p + "ffn_norm.gain"] = (H,)
        shapes[p + "ffn_norm.bias"] = (H,)
    return shapes


def is_no_decay(name: str) -> bool:
    """Biases and layer-norm parameters are excluded from weight decay."""
    return name.endswith(".bias") or name.endswith(".gain")


def truncated_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    """Normal(0, std) resampled outside two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def init_param(name: str, shape, rng: np.random.Generator, config: ModelConfig) -> np.ndarray:
    dt = config.np_dtype
    if name.endswith("gain"):
        return np.ones(shape, dtype=dt)
    if name.endswith("bias"):
        return np.zeros(shape, dtype=dt)
    return truncated_normal(rng, shape, config.init_std, dt)


def init_weights(config: ModelConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    return {
        name: Tensor(init_param(name, shape, rng, config), requires_grad=True)
        for name, shape in encoder_shapes(config).items()
    }


def head_parameter_count(config: ModelConfig, head: str, num_labels: int = 2) -> int:
    H, V = config.H, config.V
    if head == "mlm":
        n = H * H + H + 2 * H + V
        return n if config.tie_mlm else n + V * H
    if head == "nsp":
        return 2 * H + 2
    if head == "cls":
        return num_labels * H
    if head in ("span", "span_v2"):
        return 2 * H
    if head == "choice":
        return H
    if head == "tag":
        return num_labels * H + num_labels
    raise ValueError(f"unknown head {head!r}")


def count_parameters(config: ModelConfig, heads: Sequence[str] = ()) -> int:
    """Closed-form count of learned scalars; nothing is allocated."""
    H, F, L = config.H, config.ffn_size, config.L
    tables = config.V * H + config.type_vocab * H + config.max_positions * H + 2 * H
    per_layer = 4 * (H * H + H) + 2 * H + (H * F + F) + (F * H + H) + 2 * H
    return tables + L * per_layer + sum(head_parameter_count(config, h) for h in heads)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------
@dataclass
class Batch:
    token_ids: np.ndarray  # [B, N] int64
    segment_ids: np.ndarray  # [B, N] int64
    pad_mask: np.ndarray  # [B, N] bool, True for real tokens

    @classmethod
    def from_sequences(cls, seqs: Sequence[EncodedSequence], pad_id: int = 0,
                       length: Optional[int] = None) -> "Batch":
        n = length or max(len(s) for s in seqs)
        ids = np.full((len(seqs), n), pad_id, dtype=np.int64)
        segs = np.zeros((len(seqs), n), dtype=np.int64)
        mask = np.zeros((len(seqs), n), dtype=bool)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = s.token_ids
            segs[i, : len(s)] = s.segment_ids
            mask[i, : len(s)] = True
        return cls(ids, segs, mask)

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]

    @property
    def length(self) -> int:
        return self.token_ids.shape[1]


@dataclass
class EncoderOutput:
    hidden_states: list[Tensor]  # L+1 tensors of [B, N, H]; index 0 is the embedding output
    batch: Batch

    @property
    def T(self) -> Tensor:
        return self.hidden_states[-1]

    @property
    def C(self) -> Tensor:
        return self.hidden_states[-1][:, 0, :]


def attention_allowed(pad_mask: np.ndarray, mode: str) -> np.ndarray:
    """[B, 1, N, N] allowed-mask: key padding combined with the mode mask by minimum."""
    B, N = pad_mask.shape
    keys = np.broadcast_to(pad_mask[:, None, None, :], (B, 1, N, N)).astype(np.int8)
    if mode == "causal":
        mode_mask = np.tril(np.ones((N, N), dtype=np.int8))[None, None]
    else:
        mode_mask = np.ones((1, 1, N, N), dtype=np.int8)
    return np.minimum(keys, mode_mask).astype(bool)


def additive_mask(allowed: np.ndarray, dtype) -> np.ndarray:
    return np.where(allowed, 0.0, -np.inf).astype(dtype)


def _linear(x: Tensor, params: dict, name: str) -> Tensor:
    return x @ params[name + ".weight"] + params[name + ".bias"]


def attention_layer(x: Tensor, params: dict, prefix: str, config: ModelConfig, mask_add: np.ndarray,
                    training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
    """One encoder block: multi-head self-attention and the feed-forward sub-layer,
    each wrapped as ``layer_norm(x + dropout(sublayer(x)))``."""
    B, N, H = x.shape
    A, d = config.A, config.head_dim
    p = config.dropout

    def heads(t: Tensor) -> Tensor:
        return t.reshape(B, N, A, d).transpose(0, 2, 1, 3)

    q = heads(_linear(x, params, prefix + "attention.query"))
    k = heads(_linear(x, params, prefix + "attention.key"))
    v = heads(_linear(x, params, prefix + "attention.value"))
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d)) + Tensor(mask_add)
    probs = T.dropout(T.softmax(scores, axis=-1), p, training, rng)
    ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(B, N, H)
    attn = T.dropout(_linear(ctx, params, prefix + "attention.output"), p, training, rng)
    x = T.layer_norm(x + attn, params[prefix + "attention_norm.gain"], params[prefix + "attention_norm.bias"],
                     config.ln_eps)
    hidden = T.gelu(_linear(x, params, prefix + "ffn.intermediate"))
    ffn = T.dropout(_linear(hidden, params, prefix + "ffn.output"), p, training, rng)
    return T.layer_norm(x + ffn, params[prefix + "ffn_norm.gain"], params[prefix + "ffn_norm.bias"], config.ln_eps)


def embed_sum(batch: Batch, params: dict) -> Tensor:
    """Token + segment + position lookups, before normalization."""
    n = batch.length
    tok = params["embeddings.token"][batch.token_ids]
    seg = params["embeddings.segment"][batch.segment_ids]
    pos = params["embeddings.position"][np.arange(n)]
    return tok + seg + pos


def embed_inputs(batch: Batch, params: dict, config: ModelConfig, training: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
    if batch.length > config.max_positions:
        raise ValueError(f"sequence length {batch.length} exceeds max_positions={config.max_positions}")
    if batch.segment_ids.size and (batch.segment_ids.min() < 0 or batch.segment_ids.max() >= config.type_vocab):
        raise ValueError("segment ids out of range")
    x = embed_sum(batch, params)
    x = T.layer_norm(x, params["embeddings.norm.gain"], params["embeddings.norm.bias"], config.ln_eps)
    return T.dropout(x, config.dropout, training, rng)


def encoder_forward(batch, params: dict, config: ModelConfig, training: bool = False,
                    rng: Optional[np.random.Generator] = None, pad_id: int = 0) -> EncoderOutput:
    """Run the encoder, keeping every intermediate hidden state."""
    if isinstance(batch, EncodedSequence):
        batch = Batch.from_sequences([batch], pad_id)
    elif not isinstance(batch, Batch):
        batch = Batch.from_sequences(list(batch), pad_id)
    mask_add = additive_mask(attention_allowed(batch.pad_mask, config.attention_mode), config.np_dtype)
    x = embed_inputs(batch, params, config, training, rng)
    states = [x]
    for i in range(config.L):
        x = attention_layer(x, params, f"layers.{i}.", config, mask_add, training, rng)
        states.append(x)
    return EncoderOutput(states, batch)


class Encoder:
    """Config plus named parameters; the forward pass is ``encoder_forward``."""

    def __init__(self, config: ModelConfig, params: Optional[dict] = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_weights(config, seed)

    def __call__(self, batch, training: bool = False, rng=None, pad_id: int = 0) -> EncoderOutput:
        return encoder_forward(batch, self.params, self.config, training, rng, pad_id)

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params
