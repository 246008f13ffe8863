"""Checkpoint-level evaluations and the pre-training ablation harness."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import heads as Hd
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import Document, MaskingPolicy, build_pretrain_batch, stream_rng
from .features import FeatureStrategy, feature_inputs, frozen_tagger_train
from .metrics import MetricReport, accuracy, config_hash
from .model import Batch, encoder_forward
from .tasks import TaskData
from .tensor import no_grad
from .tokenizer import Vocab, encode_pair
from .training import FinetuneParams, PretrainConfig, PretrainModel, finetune, pretrain

log = logging.getLogger(__name__)

EVAL_STREAM = 9


# ---------------------------------------------------------------------------
# checkpoint evaluations
# ---------------------------------------------------------------------------
def _model(ckpt: Checkpoint) -> PretrainModel:
    return PretrainModel.from_arrays(ckpt.config, ckpt.weights)


def masked_lm_loss(checkpoint: Checkpoint, docs: Sequence[Document], vocab: Vocab, policy: MaskingPolicy,
                   seed: int, n_examples: int = 256, max_len: int = 64, batch_size: int = 64) -> float:
    """Mean masked-token cross-entropy over a fixed-seed masked sample."""
    model = _model(checkpoint)
    max_len = min(max_len, checkpoint.config.max_positions)
    rng = stream_rng(seed, EVAL_STREAM, 0)
    examples = build_pretrain_batch(docs, n_examples, max_len, policy, vocab, rng)
    total, count = 0.0, 0
    with no_grad():
        for i in range(0, len(examples), batch_size):
            chunk = examples[i: i + batch_size]
            out = encoder_forward(Batch.from_sequences([e.seq for e in chunk], vocab.pad_id), model.params,
                                  model.config)
            rows, cols, targets = Hd.mlm_arrays(chunk)
            if rows.size == 0:
                continue
            n = rows.size
            total += float(Hd.mlm_loss(out, chunk, model.mlm).data) * n
            count += n
    if count == 0:
        raise ValueError("held-out sample produced no masked positions")
    return total / count


def masked_lm_perplexity(checkpoint: Checkpoint, docs: Sequence[Document], vocab: Vocab,
                         policy: MaskingPolicy = MaskingPolicy(), seed: int = 0, **kw) -> float:
    return math.exp(masked_lm_loss(checkpoint, docs, vocab, policy, seed, **kw))


def nsp_accuracy(checkpoint: Checkpoint, docs: Sequence[Document], vocab: Vocab, seed: int,
                 n_examples: int = 512, max_len: int = 64, policy: MaskingPolicy = MaskingPolicy()) -> float:
    model = _model(checkpoint)
    max_len = min(max_len, checkpoint.config.max_positions)
    examples = build_pretrain_batch(docs, n_examples, max_len, policy, vocab, stream_rng(seed, EVAL_STREAM, 1))
    preds = []
    with no_grad():
        for i in range(0, len(examples), 64):
            chunk = examples[i: i + 64]
            out = encoder_forward(Batch.from_sequences([e.seq for e in chunk], vocab.pad_id), model.params,
                                  model.config)
            preds.extend(int(k) for k in np.argmax(model.nsp.logits(out.C).data, axis=-1))
    return accuracy(preds, [int(e.nsp_label) for e in examples])


def cloze_predictions(checkpoint: Checkpoint, sentences: Sequence[Sequence[int]], vocab: Vocab,
                      targets: set[int]) -> list[dict]:
    """Predict every token in ``targets`` from its context.

    Bidirectional checkpoints see the sentence with all target positions
    replaced by [MASK]; causal checkpoints predict position i from the
    hidden state at i-1 (left context only).
    """
    model = _model(checkpoint)
    causal = checkpoint.config.attention_mode == "causal"
    records = []
    with no_grad():
        for start in range(0, len(sentences), 64):
            chunk = sentences[start: start + 64]
            seqs, positions = [], []
            for ids in chunk:
                seq = encode_pair(vocab, list(ids), None, checkpoint.config.max_positions)
                pos = [i for i, t in enumerate(seq.token_ids) if t in targets]
                if not causal:
                    seq.token_ids = [vocab.mask_id if i in pos else t for i, t in enumerate(seq.token_ids)]
                seqs.append((seq, ids))
                positions.append(pos)
            batch = Batch.from_sequences([s for s, _ in seqs], vocab.pad_id)
            out = encoder_forward(batch, model.params, model.config)
            rows = np.asarray([b for b, pos in enumerate(positions) for _ in pos], dtype=np.int64)
            cols = np.asarray([p for pos in positions for p in pos], dtype=np.int64)
            if rows.size == 0:
                continue
            read = cols - 1 if causal else cols
            logits = model.mlm.logits(out.T[rows, read]).data
            pred = np.argmax(logits, axis=-1)
            for r, c, p in zip(rows, cols, pred):
                gold = seqs[r][0].token_ids[c] if causal else encode_pair(vocab, list(seqs[r][1]), None,
                                                                          checkpoint.config.max_positions).token_ids[c]
                records.append({"sentence": int(start + r), "position": int(c), "gold": int(gold), "pred": int(p)})
    return records


def cloze_accuracy(checkpoint: Checkpoint, sentences, vocab: Vocab, targets: set[int]) -> float:
    recs = cloze_predictions(checkpoint, sentences, vocab, targets)
    return accuracy([r["pred"] for r in recs], [r["gold"] for r in recs])


# ---------------------------------------------------------------------------
# ablation specs
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class AblationSpec:
    """One arm: a name plus overrides of the base pre-training setup.

    Only the declared override fields exist; ``None`` leaves the base value.
    """

    name: str
    attention_mode: Optional[str] = None
    nsp: Optional[bool] = None
    policy: Optional[MaskingPolicy] = None
    checkpoint_steps: Optional[tuple[int, ...]] = None

    @classmethod
    def with_overrides(cls, name: str, **overrides) -> "AblationSpec":
        allowed = {f.name for f in fields(cls)} - {"name"}
        unknown = set(overrides) - allowed
        if unknown:
            raise ValueError(f"ablation overrides may only touch {sorted(allowed)}; got {sorted(unknown)}")
        return cls(name, **overrides)

    def apply(self, base: PretrainConfig) -> PretrainConfig:
        cfg = base
        if self.attention_mode is not None:
            cfg = replace(cfg, model=cfg.model.replace(attention_mode=self.attention_mode), objective=None)
        if self.nsp is not None:
            cfg = replace(cfg, nsp=self.nsp)
        if self.policy is not None:
            cfg = replace(cfg, policy=self.policy)
        return cfg


# Table-8 masking arms as (mask, same, random) percentages
MASK_GRID = ((80, 10, 10), (100, 0, 0), (80, 0, 20), (80, 20, 0), (0, 20, 80), (0, 0, 100))
DEFAULT_STEPS = (500, 1000, 2000)


def preset(name: str, mask_triples: Sequence[tuple] = MASK_GRID,
           steps: Sequence[int] = DEFAULT_STEPS) -> list[AblationSpec]:
    if name == "no-nsp":
        return [AblationSpec("bert"), AblationSpec("no-nsp", nsp=False)]
    if name == "ltr-no-nsp":
        return [AblationSpec("no-nsp", nsp=False),
                AblationSpec("ltr-no-nsp", attention_mode="causal", nsp=False)]
    if name == "mask-grid":
        return [AblationSpec(f"mask-{m}-{s}-{r}", policy=MaskingPolicy.from_percentages(m, s, r))
                for m, s, r in mask_triples]
    if name == "steps":
        return [AblationSpec("steps", checkpoint_steps=tuple(steps))]
    raise ValueError(f"unknown ablation preset {name!r}")


PRESETS = ("no-nsp", "ltr-no-nsp", "mask-grid", "steps")


@dataclass
class Fixtures:
    """Downstream tasks each arm is evaluated on; any may be omitted."""

    cls: Optional[TaskData] = None
    tag: Optional[TaskData] = None
    cloze_dev: Optional[list] = None
    cloze_targets: Optional[set] = None
    finetune: FinetuneParams = FinetuneParams(batch_size=16, lr=2e-3, epochs=3)
    tagger_epochs: int = 10
    feature_strategy: str = FeatureStrategy.LAST.value


@dataclass
class AblationReport:
    kind: str
    rows: list[MetricReport] = field(default_factory=list)
    columns: list[str] = field(default_factory=list)

    def to_tsv(self) -> str:
        lines = ["\t".join(["arm"] + self.columns)]
        for r in self.rows:
            lines.append("\t".join([r.task] + [_fmt(r.metrics.get(c)) for c in self.columns]))
        return "\n".join(lines) + "\n"

    def to_grid(self) -> str:
        table = [["arm"] + self.columns] + [[r.task] + [_fmt(r.metrics.get(c)) for c in self.columns]
                                             for r in self.rows]
        widths = [max(len(row[i]) for row in table) for i in range(len(table[0]))]
        out = []
        for k, row in enumerate(table):
            out.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
            if k == 0:
                out.append("  ".join("-" * w for w in widths))
        return "\n".join(out) + "\n"

    def series(self) -> list[tuple[int, float]]:
        """(k, accuracy) points of a step ablation."""
        return [(int(r.extra["step"]), r.metrics["finetune_acc"]) for r in self.rows]


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def corpus_hash(docs: Sequence[Document]) -> str:
    h = hashlib.sha256()
    for d in docs:
        for s in d.sentences:
            h.update(np.asarray(s, dtype=np.int64).tobytes())
            h.update(b"|")
        h.update(b"#")
    return h.hexdigest()[:16]


class CheckpointStore:
    """Content-addressed pre-training checkpoints shared across arms."""

    def __init__(self, root: Optional[Path] = None):
        self.root = Path(root) if root is not None else None
        self.memory: dict[str, Checkpoint] = {}

    def key(self, cfg: PretrainConfig, corpus: str, seed: int, step: int) -> str:
        return config_hash({"cfg": cfg.to_dict(), "corpus": corpus, "seed": seed, "step": step})

    def get(self, key: str) -> Optional[Checkpoint]:
        if key in self.memory:
            return self.memory[key]
        if self.root is not None and (self.root / f"{key}.mbrt").exists():
            ck = load_checkpoint(self.root / f"{key}.mbrt")
            self.memory[key] = ck
            return ck
        return None

    def put(self, key: str, ckpt: Checkpoint) -> None:
        self.memory[key] = ckpt
        if self.root is not None:
            save_checkpoint(self.root / f"{key}.mbrt", ckpt)


def pretrained_checkpoints(cfg: PretrainConfig, docs, vocab, seed: int, steps: Sequence[int],
                           store: CheckpointStore) -> dict[int, Checkpoint]:
    corpus = corpus_hash(docs)
    keys = {k: store.key(cfg, corpus, seed, k) for k in steps}
    found = {k: store.get(key) for k, key in keys.items()}
    if all(v is not None for v in found.values()):
        return found
    res = pretrain(cfg, docs, vocab, seed, checkpoint_steps=steps, log_every=0)
    out = {ck.step: ck for ck in res.checkpoints}
    for k in steps:
        store.put(keys[k], out[k])
    return {k: out[k] for k in steps}


def _with_mode(ckpt: Checkpoint, mode: str) -> Checkpoint:
    if ckpt.config.attention_mode == mode:
        return ckpt
    c = ckpt.copy()
    c.config = c.config.replace(attention_mode=mode)
    return c


def _evaluate_arm(ckpt: Checkpoint, fixtures: Fixtures, vocab: Vocab, seed: int,
                  want_features: bool) -> tuple[dict, dict]:
    """Downstream metrics for one pre-trained checkpoint, plus persisted predictions."""
    metrics, preds = {}, {}
    if fixtures.cls is not None:
        # fine-tuning keeps the checkpoint's attention mode (left-only arms stay left-only)
        res = finetune(ckpt, fixtures.cls, "classification", fixtures.finetune, seed, vocab=vocab)
        metrics["finetune_acc"] = res.metrics["accuracy"]
        preds["finetune_cls"] = res.predictions
    if fixtures.tag is not None:
        res = finetune(ckpt, fixtures.tag, "tagging", fixtures.finetune, seed, vocab=vocab)
        metrics["finetune_tag_acc"] = res.metrics["accuracy"]
        preds["finetune_tag"] = res.predictions
        if want_features:
            params = PretrainModel.from_arrays(ckpt.config, ckpt.weights).encoder_params()
            strat = fixtures.feature_strategy
            tr = feature_inputs(params, ckpt.config, fixtures.tag.train, strat, vocab.pad_id)
            dv = feature_inputs(params, ckpt.config, fixtures.tag.dev, strat, vocab.pad_id)
            weighted = FeatureStrategy(strat).weighted
            tres = frozen_tagger_train(tr, [e.labels for e in fixtures.tag.train], dv,
                                       [e.labels for e in fixtures.tag.dev], fixtures.tag.num_labels, seed,
                                       epochs=fixtures.tagger_epochs, weighted=weighted)
            metrics["feature_tag_acc"] = tres.metrics["accuracy"]
            preds["feature_tag"] = tres.predictions
    if fixtures.cloze_dev is not None:
        recs = cloze_predictions(ckpt, fixtures.cloze_dev, vocab, fixtures.cloze_targets)
        metrics["cloze_acc"] = accuracy([r["pred"] for r in recs], [r["gold"] for r in recs])
        preds["cloze"] = recs
    return metrics, preds


def run_ablation(base: PretrainConfig, specs: Sequence[AblationSpec], docs: Sequence[Document], vocab: Vocab,
                 fixtures: Fixtures, seed: int, out_dir: Optional[Path] = None,
                 store: Optional[CheckpointStore] = None) -> AblationReport:
    """Pre-train each arm (reusing cached checkpoints) and evaluate it downstream.

    Step arms emit one row per checkpoint step; every other arm emits one
    row for its final checkpoint. With ``out_dir`` each arm's report row and
    predictions are written as soon as the arm finishes.
    """
    store = store or CheckpointStore(Path(out_dir) / "checkpoints" if out_dir else None)
    is_mask = any(s.policy is not None for s in specs)
    report = AblationReport("mask-grid" if is_mask else ("steps" if any(s.checkpoint_steps for s in specs)
                                                         else "arms"))
    for spec in specs:
        cfg = spec.apply(base)
        steps = tuple(spec.checkpoint_steps) if spec.checkpoint_steps else (cfg.total_steps,)
        if spec.checkpoint_steps:
            cfg = replace(cfg, total_steps=max(max(steps), cfg.total_steps))
        cks = pretrained_checkpoints(cfg, docs, vocab, seed, steps, store)
        for k in steps:
            metrics, preds = _evaluate_arm(cks[k], fixtures, vocab, seed, want_features=is_mask)
            name = spec.name if len(steps) == 1 else f"{spec.name}@{k}"
            extra = {"step": k, "attention_mode": cfg.model.attention_mode, "nsp": cfg.nsp,
                     "objective": cfg.resolved_objective, "policy": list(cfg.policy.as_triple())}
            row = MetricReport(name, metrics, 0, seed, config_hash(cfg.to_dict()), extra)
            report.rows.append(row)
            if out_dir is not None:
                _persist(Path(out_dir), name, row, preds)
    cols = []
    for r in report.rows:
        cols.extend(c for c in r.metrics if c not in cols)
    report.columns = cols
    if out_dir is not None:
        (Path(out_dir) / "report.tsv").write_text(report.to_tsv(), encoding="utf-8")
    return report


def _persist(out: Path, name: str, row: MetricReport, preds: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{name}.report.json").write_text(json.dumps(row.to_dict(), sort_keys=True, indent=1), encoding="utf-8")
    with open(out / f"{name}.predictions.jsonl", "w", encoding="utf-8") as f:
        for kind, items in preds.items():
            for i, p in enumerate(items):
                f.write(json.dumps({"kind": kind, "index": i, "prediction": p}, sort_keys=True) + "\n")
