"""Optimizer, learning-rate schedule, and the pre-training / fine-tuning loops."""
from __future__ import annotations

import itertools
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import heads as Hd
from .checkpoint import Checkpoint, OptimizerState, save_checkpoint
from .data import Document, MaskingPolicy, build_pretrain_batch, stream_rng
from .metrics import MetricReport, config_hash
from .model import Batch, ModelConfig, encoder_forward, encoder_shapes, init_weights, is_no_decay
from .tasks import TaskData, make_task
from .tensor import Tensor, backward
from .tokenizer import Vocab

log = logging.getLogger(__name__)

# stream ids for stream_rng
DATA_STREAM, DROPOUT_STREAM, SHUFFLE_STREAM, HEAD_STREAM, HEAD_INIT_STREAM = range(5)

# Reference pre-training setting: batch 256, 1,000,000 steps, warmup 10,000, lr 1e-4.
REFERENCE_GRID = {"batch_size": (16, 32), "lr": (5e-5, 3e-5, 2e-5), "epochs": (2, 3, 4)}


class NonFiniteGradientError(FloatingPointError):
    pass


class NumericAbort(FloatingPointError):
    """Training hit a non-finite loss; ``last_checkpoint`` holds the state before that step."""

    def __init__(self, message: str, last_checkpoint: Optional[Checkpoint] = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class ConfigMismatchError(ValueError):
    def __init__(self, fields_: Sequence[str]):
        super().__init__(f"checkpoint config differs in: {', '.join(fields_)}")
        self.fields = list(fields_)


# ---------------------------------------------------------------------------
# schedule and optimizer
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Schedule:
    base_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.total_steps < 0 or self.warmup_steps < 0 or self.warmup_steps > self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")


def lr_at_step(schedule: Schedule, t: int) -> float:
    """Linear warmup to ``base_lr`` at ``warmup_steps``, then linear decay to 0 at ``total_steps``."""
    base, w, total = schedule.base_lr, schedule.warmup_steps, schedule.total_steps
    if t < 0:
        raise ValueError("step must be non-negative")
    if t > total:
        warnings.warn(f"step {t} beyond total_steps={total}; learning rate clamped to 0")
        return 0.0
    if t <= w:
        return base if w == 0 else base * t / w
    return base * (total - t) / (total - w)


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    params = [p for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            p.grad = (p.grad * scale).astype(p.dtype)
    return total


class AdamW:
    """Adam with bias correction and decoupled weight decay.

    Decay is skipped for biases and layer-norm parameters. Parameters whose
    gradient is ``None`` are left untouched entirely.
    """

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-6, weight_decay: float = 0.01,
                 no_decay: Callable[[str], bool] = is_no_decay, state: Optional[OptimizerState] = None):
        self.params = params
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.no_decay = no_decay
        self.state = state or OptimizerState()
        self.state.hyper = {"beta1": beta1, "beta2": beta2, "eps": eps, "weight_decay": weight_decay}

    def decay_groups(self) -> tuple[list[str], list[str]]:
        decay = [n for n in self.params if not self.no_decay(n)]
        return decay, [n for n in self.params if self.no_decay(n)]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(f"non-finite gradient in parameter {name}")
        st = self.state
        st.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** st.t, 1.0 - b2 ** st.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = st.m.get(name)
            if m is None:
                m = st.m[name] = np.zeros_like(p.data)
                st.v[name] = np.zeros_like(p.data)
            v = st.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and not self.no_decay(name):
                update = update + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# parameter plumbing
# ---------------------------------------------------------------------------
def params_from_arrays(arrays: dict[str, np.ndarray], names: Optional[Iterable[str]] = None) -> dict[str, Tensor]:
    names = list(arrays) if names is None else list(names)
    return {n: Tensor(np.array(arrays[n], copy=True), requires_grad=True) for n in names}


def snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {n: p.data.copy() for n, p in params.items()}


@dataclass
class PretrainModel:
    config: ModelConfig
    params: dict[str, Tensor]
    mlm: Hd.MlmHead
    nsp: Hd.NspHead

    @classmethod
    def create(cls, config: ModelConfig, seed: int) -> "PretrainModel":
        enc = init_weights(config, seed)
        rng = stream_rng(seed, HEAD_INIT_STREAM, 0)
        mlm = Hd.MlmHead.create(config, rng, enc["embeddings.token"])
        nsp = Hd.NspHead.create(config, rng)
        return cls._assemble(config, enc, mlm, nsp)

    @classmethod
    def _assemble(cls, config, enc, mlm, nsp):
        params = dict(enc)
        params.update(mlm.params)
        params.update(nsp.params)
        return cls(config, params, mlm, nsp)

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict[str, np.ndarray]) -> "PretrainModel":
        params = params_from_arrays(arrays)
        enc = {n: params[n] for n in encoder_shapes(config)}
        mlm = Hd.MlmHead({n: t for n, t in params.items() if n.startswith("mlm.")}, config,
                         enc["embeddings.token"])
        nsp = Hd.NspHead({n: t for n, t in params.items() if n.startswith("nsp.")})
        return cls._assemble(config, enc, mlm, nsp)

    def encoder_params(self) -> dict[str, Tensor]:
        return {n: self.params[n] for n in encoder_shapes(self.config)}


# ---------------------------------------------------------------------------
# pre-training
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class PretrainConfig:
    """Desk-scale defaults: batch 32 of length 48, 2,000 steps, warmup 100, peak lr 3e-3."""

    model: ModelConfig
    batch_size: int = 32
    max_len: int = 48
    total_steps: int = 2000
    warmup_steps: int = 100
    lr: float = 3e-3
    weight_decay: float = 0.01
    clip_norm: Optional[float] = 1.0
    nsp: bool = True
    objective: Optional[str] = None  # "mlm" | "ltr"; None follows the attention mode
    policy: MaskingPolicy = MaskingPolicy()
    # two-phase length schedule: first short_fraction of steps use short_max_len
    short_fraction: float = 0.0
    short_max_len: int = 128

    @property
    def resolved_objective(self) -> str:
        if self.objective is not None:
            if self.objective not in ("mlm", "ltr"):
                raise ValueError("objective must be 'mlm' or 'ltr'")
            return self.objective
        return "ltr" if self.model.attention_mode == "causal" else "mlm"

    def schedule(self) -> Schedule:
        return Schedule(self.lr, self.warmup_steps, self.total_steps)

    def max_len_at(self, step: int) -> int:
        if self.short_fraction > 0 and step < int(self.short_fraction * self.total_steps):
            return min(self.short_max_len, self.max_len)
        return self.max_len

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["policy"] = asdict(self.policy)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d["model"])
        d["policy"] = MaskingPolicy(**d["policy"])
        return cls(**d)


@dataclass
class PretrainResult:
    checkpoints: list[Checkpoint]
    history: list[dict]
    final: Checkpoint


def _pretrain_losses(model: PretrainModel, examples, cfg: PretrainConfig, vocab: Vocab, training: bool,
                     rng) -> dict:
    batch = Batch.from_sequences([ex.seq for ex in examples], vocab.pad_id)
    out = encoder_forward(batch, model.params, model.config, training, rng)
    if cfg.resolved_objective == "ltr":
        lm = Hd.ltr_loss(out, model.mlm)
    else:
        lm = Hd.mlm_loss(out, examples, model.mlm)
    nsp = Hd.nsp_loss(out, [int(ex.nsp_label) for ex in examples], model.nsp) if cfg.nsp else None
    return {"loss": Hd.pretrain_loss(lm, nsp), "mlm": lm, "nsp": nsp}


def pretrain_batch(docs, cfg: PretrainConfig, vocab: Vocab, seed: int, step: int):
    rng = stream_rng(seed, DATA_STREAM, step)
    return build_pretrain_batch(docs, cfg.batch_size, cfg.max_len_at(step), cfg.policy, vocab, rng,
                                mask=cfg.resolved_objective == "mlm")


def _make_checkpoint(model: PretrainModel, opt: AdamW, cfg: PretrainConfig, seed: int, step: int) -> Checkpoint:
    st = opt.state
    opt_state = OptimizerState(st.t, {k: v.copy() for k, v in st.m.items()},
                               {k: v.copy() for k, v in st.v.items()}, dict(st.hyper))
    return Checkpoint(
        model.config, snapshot(model.params), opt_state,
        rng={"scheme": "seed-stream", "base_seed": int(seed), "next_step": int(step)},
        step=step, meta={"kind": "pretrain", "train": cfg.to_dict(), "seed": int(seed)},
    )


def _batches(docs, cfg, vocab, seed, steps: range, workers: int):
    if workers <= 1:
        for s in steps:
            yield pretrain_batch(docs, cfg, vocab, seed, s)
        return
    # per-step seed streams make look-ahead generation order-independent
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending = [pool.submit(pretrain_batch, docs, cfg, vocab, seed, s) for s in itertools.islice(steps, 2 * workers)]
        rest = iter(steps[2 * workers:])
        while pending:
            fut = pending.pop(0)
            nxt = next(rest, None)
            if nxt is not None:
                pending.append(pool.submit(pretrain_batch, docs, cfg, vocab, seed, nxt))
            yield fut.result()


def pretrain(cfg: PretrainConfig, docs: Sequence[Document], vocab: Vocab, seed: int,
             checkpoint_steps: Iterable[int] = (), checkpoint_every: Optional[int] = None,
             out_dir: Optional[Path] = None, resume: Optional[Checkpoint] = None, stop_at: Optional[int] = None,
             workers: int = 1, log_every: int = 100) -> PretrainResult:
    """Run MLM(+NSP) or left-to-right pre-training.

    Training is a pure function of (config, corpus, seed): data and dropout
    for step ``t`` come from seed streams keyed by ``t``, so resuming from a
    checkpoint reproduces the uninterrupted run bitwise. Checkpoints are
    emitted after the update that completes each requested step count.
    """
    if cfg.model.V != len(vocab):
        raise ValueError(f"model V={cfg.model.V} but vocab has {len(vocab)} tokens")
    if resume is not None:
        diff = resume.config.diff(cfg.model)
        if diff:
            raise ConfigMismatchError(diff)
        seed = int(resume.rng.get("base_seed", seed))
        model = PretrainModel.from_arrays(resume.config, resume.weights)
        state = resume.copy().optimizer
        start = resume.step
    else:
        model = PretrainModel.create(cfg.model, seed)
        state = None
        start = 0
    opt = AdamW(model.params, weight_decay=cfg.weight_decay, state=state)
    schedule = cfg.schedule()
    stop = cfg.total_steps if stop_at is None else min(stop_at, cfg.total_steps)
    wanted = set(checkpoint_steps)
    if checkpoint_every:
        wanted.update(range(checkpoint_every, cfg.total_steps + 1, checkpoint_every))

    checkpoints: list[Checkpoint] = []
    history: list[dict] = []

    def emit(step):
        ck = _make_checkpoint(model, opt, cfg, seed, step)
        checkpoints.append(ck)
        if out_dir is not None:
            save_checkpoint(Path(out_dir) / f"step_{step:07d}.mbrt", ck)
        return ck

    if start == 0 and 0 in wanted:
        emit(0)
    for step, examples in zip(range(start, stop), _batches(docs, cfg, vocab, seed, range(start, stop), workers)):
        opt.zero_grad()
        losses = _pretrain_losses(model, examples, cfg, vocab, True, stream_rng(seed, DROPOUT_STREAM, step))
        loss = losses["loss"]
        if not np.isfinite(loss.data):
            raise NumericAbort(f"non-finite loss at step {step}", _make_checkpoint(model, opt, cfg, seed, step))
        backward(loss)
        if cfg.clip_norm:
            clip_grad_norm(model.params.values(), cfg.clip_norm)
        lr = lr_at_step(schedule, step + 1)
        opt.step(lr)
        rec = {"step": step + 1, "loss": float(loss.data), "mlm": float(losses["mlm"].data), "lr": lr}
        if losses["nsp"] is not None:
            rec["nsp"] = float(losses["nsp"].data)
        history.append(rec)
        if log_every and (step + 1) % log_every == 0:
            log.info("step %d loss %.4f mlm_ppl %.2f lr %.2e", step + 1, rec["loss"], math.exp(rec["mlm"]), lr)
        if step + 1 in wanted:
            emit(step + 1)
    final = checkpoints[-1] if checkpoints and checkpoints[-1].step == stop else _make_checkpoint(
        model, opt, cfg, seed, stop)
    return PretrainResult(checkpoints, history, final)


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class FinetuneParams:
    batch_size: int = 32
    lr: float = 5e-5
    epochs: int = 3
    warmup_frac: float = 0.1
    weight_decay: float = 0.01
    clip_norm: Optional[float] = None


@dataclass
class FinetuneResult:
    checkpoint: Checkpoint
    metrics: MetricReport
    history: list[dict]
    predictions: list

    def __iter__(self):
        yield self.checkpoint
        yield self.metrics

    @property
    def dev_score(self) -> float:
        return self.metrics.metrics[self.metrics.extra["primary"]]


def _encoder_config(ckpt: Checkpoint, attention_mode: Optional[str]) -> ModelConfig:
    return ckpt.config if attention_mode is None else ckpt.config.replace(attention_mode=attention_mode)


def finetune(checkpoint: Checkpoint, data: TaskData, head_kind: str, hp: FinetuneParams, seed: int,
             vocab: Optional[Vocab] = None, expected_config: Optional[ModelConfig] = None,
             pad_id: Optional[int] = None, max_span_len: int = Hd.DEFAULT_MAX_SPAN_LEN) -> FinetuneResult:
    """Fine-tune every encoder parameter plus a freshly initialized task head."""
    if expected_config is not None:
        diff = checkpoint.config.diff(expected_config)
        if diff:
            raise ConfigMismatchError(diff)
    config = checkpoint.config
    pad = pad_id if pad_id is not None else (vocab.pad_id if vocab is not None else 0)
    task = make_task(head_kind, config, pad, data.num_labels, max_span_len=max_span_len)
    params = params_from_arrays(checkpoint.weights, encoder_shapes(config))
    head = task.create_head(stream_rng(seed, HEAD_STREAM, 0))
    all_params = dict(params)
    all_params.update(head.params)
    opt = AdamW(all_params, weight_decay=hp.weight_decay)
    steps_per_epoch = math.ceil(len(data.train) / hp.batch_size) if data.train else 0
    total = steps_per_epoch * hp.epochs
    schedule = Schedule(hp.lr, int(hp.warmup_frac * total), total)

    history = []
    step = 0
    metrics, preds = None, []
    for epoch in range(hp.epochs):
        order = stream_rng(seed, SHUFFLE_STREAM, epoch).permutation(len(data.train))
        losses = []
        for k in range(steps_per_epoch):
            chunk = [data.train[i] for i in order[k * hp.batch_size:(k + 1) * hp.batch_size]]
            opt.zero_grad()
            loss = task.loss(params, head, chunk, True, stream_rng(seed, DROPOUT_STREAM, step))
            if not np.isfinite(loss.data):
                raise NumericAbort(f"non-finite fine-tuning loss at step {step}")
            backward(loss)
            if hp.clip_norm:
                clip_grad_norm(all_params.values(), hp.clip_norm)
            step += 1
            opt.step(lr_at_step(schedule, step))
            losses.append(float(loss.data))
        metrics, preds = task.evaluate(params, head, data.dev)
        history.append({"epoch": epoch + 1, "train_loss": float(np.mean(losses)) if losses else None, **metrics})
    if hp.epochs == 0 or metrics is None:
        metrics, preds = task.evaluate(params, head, data.dev)
        history.append({"epoch": 0, **metrics})

    weights = snapshot(all_params)
    meta = {"kind": "finetune", "head": task.kind, "num_labels": data.num_labels,
            "label_names": list(data.label_names), "tau": task.tau, "hp": asdict(hp), "seed": int(seed),
            "source_step": checkpoint.step}
    ckpt = Checkpoint(config, weights, opt.state, {"scheme": "seed-stream", "base_seed": int(seed)}, step, meta)
    report = MetricReport(task.kind, dict(metrics), len(data.dev), seed,
                          config_hash({"model": config.to_dict(), "hp": asdict(hp)}),
                          extra={"primary": task.primary_metric, "hp": asdict(hp)})
    return FinetuneResult(ckpt, report, history, preds)


@dataclass
class SelectionResult:
    runs: list[FinetuneResult]
    best_index: int
    settings: list = field(default_factory=list)

    @property
    def best(self) -> FinetuneResult:
        return self.runs[self.best_index]


def _argmax_first(values: Sequence[float]) -> int:
    best = 0
    for i, v in enumerate(values):
        if v > values[best]:
            best = i
    return best


def random_restarts(checkpoint: Checkpoint, data: TaskData, head_kind: str, hp: FinetuneParams, n: int,
                    seed: int, **kw) -> SelectionResult:
    """``n`` runs from the same checkpoint differing only in shuffling and head init (seed + i)."""
    if n < 1:
        raise ValueError("random_restarts needs n >= 1")
    runs = [finetune(checkpoint, data, head_kind, hp, seed + i, **kw) for i in range(n)]
    return SelectionResult(runs, _argmax_first([r.dev_score for r in runs]), [seed + i for i in range(n)])


def grid_settings(grid: Optional[dict] = None, **base) -> list[FinetuneParams]:
    grid = grid or REFERENCE_GRID
    return [FinetuneParams(batch_size=b, lr=lr, epochs=e, **base)
            for b, lr, e in itertools.product(grid["batch_size"], grid["lr"], grid["epochs"])]


def finetune_grid(checkpoint: Checkpoint, data: TaskData, head_kind: str, seed: int,
                  grid: Optional[dict] = None, **kw) -> SelectionResult:
    """Exhaustive search over batch size x learning rate x epochs; dev-best wins, ties to the first."""
    settings = grid_settings(grid)
    runs = [finetune(checkpoint, data, head_kind, hp, seed, **kw) for hp in settings]
    return SelectionResult(runs, _argmax_first([r.dev_score for r in runs]), settings)
