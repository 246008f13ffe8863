"""``minibert`` command line: pretrain, finetune, eval, extract, ablate.

Every command reads an optional flat ``key = value`` config file, applies
``--set key=value`` and dedicated flag overrides on top, and writes a
``manifest.json`` next to its artifacts. The manifest records the effective
config, seed, source hash and a command line that reproduces the run.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shlex
import subprocess
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import ablation as ab
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import DataError, MaskingPolicy, load_corpus, load_tag_dataset
from .features import FeatureCache, FeatureStrategy, STRATEGY_NAMES, cache_key, feature_inputs
from .fixtures import fixture_path
from .metrics import MetricReport, config_hash
from .model import ConfigError, ModelConfig, encoder_shapes
from .tasks import TASK_ALIASES, load_task_data, make_task, head_from_weights
from .tokenizer import VocabError, WordPieceTokenizer, load_vocab
from .training import (ConfigMismatchError, FinetuneParams, NonFiniteGradientError, NumericAbort, PretrainConfig,
                       finetune, finetune_grid, params_from_arrays, pretrain, random_restarts)

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class CliConfigError(Exception):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_float(s: str) -> Optional[float]:
    return None if s.strip().lower() in ("", "none") else float(s)


def _opt_str(s: str) -> Optional[str]:
    return None if s.strip().lower() in ("", "none") else s.strip()


MODEL_KEYS = {"L": (int, 2), "H": (int, 64), "A": (int, 4), "max_positions": (int, 64), "ffn_size": (int, 0),
              "dropout": (float, 0.1), "attention_mode": (str, "bidirectional"), "dtype": (str, "float32")}
PRETRAIN_KEYS = {
    **MODEL_KEYS,
    "corpus": (_opt_str, None), "batch_size": (int, 32), "max_len": (int, 48), "total_steps": (int, 2000),
    "warmup_steps": (int, 100), "lr": (float, 3e-3), "weight_decay": (float, 0.01), "clip_norm": (_opt_float, 1.0),
    "nsp": (_bool, True), "objective": (_opt_str, None), "select_rate": (float, 0.15), "p_mask": (float, 0.8),
    "p_same": (float, 0.1), "p_random": (float, 0.1), "short_fraction": (float, 0.0), "short_max_len": (int, 128),
    "checkpoint_every": (int, 0),
}
FINETUNE_KEYS = {
    "train": (_opt_str, None), "dev": (_opt_str, None), "batch_size": (int, 32), "lr": (float, 5e-5),
    "epochs": (int, 3), "warmup_frac": (float, 0.1), "weight_decay": (float, 0.01),
    "clip_norm": (_opt_float, None), "max_len": (int, 64), "max_span_len": (int, 30),
}
EVAL_KEYS = {"data": (_opt_str, None), "max_len": (int, 64), "max_span_len": (int, 30),
             "examples": (int, 512)}
EXTRACT_KEYS = {"data": (_opt_str, None), "max_len": (int, 64)}
ABLATE_KEYS = {
    **PRETRAIN_KEYS,
    "finetune_batch_size": (int, 16), "finetune_lr": (float, 2e-3), "finetune_epochs": (int, 3),
    "tagger_epochs": (int, 10), "feature_strategy": (str, "last"),
    "mask_triples": (str, ",".join("/".join(map(str, t)) for t in ab.MASK_GRID)),
    "steps": (str, ",".join(map(str, ab.DEFAULT_STEPS))),
}
COMMON_KEYS = {"vocab": (_opt_str, None), "lowercase": (_bool, True), "workers": (int, 1)}
KEYSETS = {"pretrain": PRETRAIN_KEYS, "finetune": FINETUNE_KEYS, "eval": EVAL_KEYS, "extract": EXTRACT_KEYS,
           "ablate": ABLATE_KEYS}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliConfigError(f"{source}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_config(command: str, file_values: dict[str, str], overrides: dict[str, str]) -> dict:
    """Typed effective config; flag overrides win over the file, unknown keys are rejected."""
    keys = {**COMMON_KEYS, **KEYSETS[command]}
    merged = {**file_values, **overrides}
    unknown = sorted(set(merged) - set(keys))
    if unknown:
        raise CliConfigError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
    out = {}
    for k, (conv, default) in keys.items():
        if k in merged:
            try:
                out[k] = conv(merged[k])
            except ValueError as e:
                raise CliConfigError(f"bad value for {k!r}: {e}") from None
        else:
            out[k] = default
    return out


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def render_config(cfg: dict) -> str:
    return "".join(f"{k} = {_format_value(cfg[k])}\n" for k in sorted(cfg))


def source_hash() -> str:
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _git_revision() -> Optional[str]:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], cwd=Path(__file__).parent, capture_output=True,
                             text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None if out.returncode == 0 else None


class Run:
    """Output directory, effective config and artifact bookkeeping for one command."""

    def __init__(self, command: str, args, cfg: dict, seed: int):
        self.command = command
        self.args = args
        self.cfg = cfg
        self.seed = seed
        self.workdir = Path(args.workdir).resolve()
        self.out = self.path(args.out or command)
        self.out.mkdir(parents=True, exist_ok=True)
        self.artifacts: list[str] = []

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.workdir / p

    def artifact(self, name: str) -> Path:
        p = self.out / name
        self.artifacts.append(str(p.relative_to(self.workdir)) if p.is_relative_to(self.workdir) else str(p))
        return p

    def write_json(self, name: str, obj) -> Path:
        p = self.artifact(name)
        p.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")
        return p

    def finish(self, extra: Optional[dict] = None) -> Path:
        cfg_file = self.out / "effective.cfg"
        cfg_file.write_text(render_config(self.cfg), encoding="utf-8")
        argv = ["minibert", self.command, "--workdir", str(self.workdir), "--seed", str(self.seed),
                "--config", str(cfg_file), "--out", str(self.out)]
        for flag in ("checkpoint", "resume", "task", "strategy", "arm"):
            val = getattr(self.args, flag, None)
            if val is not None:
                argv += [f"--{flag}", str(val)]
        for flag in ("grid",):
            if getattr(self.args, flag, False):
                argv.append(f"--{flag}")
        if getattr(self.args, "restarts", None):
            argv += ["--restarts", str(self.args.restarts)]
        manifest = {"command": self.command, "config": self.cfg, "seed": self.seed,
                    "source_hash": source_hash(), "git_revision": _git_revision(),
                    "artifacts": self.artifacts, "reproduce": shlex.join(argv)}
        if extra:
            manifest.update(extra)
        p = self.out / "manifest.json"
        p.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")
        return p


def _tokenizer(run: Run) -> WordPieceTokenizer:
    vpath = run.path(run.cfg["vocab"]) if run.cfg["vocab"] else fixture_path("vocab.txt")
    vocab = load_vocab(vpath)
    return WordPieceTokenizer(vocab, lowercase=run.cfg["lowercase"], strip_accents=run.cfg["lowercase"])


def _data_path(run: Run, value: Optional[str], default: str) -> Path:
    return run.path(value) if value else fixture_path(default)


FIXTURE_FILES = {"classification": ("cls_train.tsv", "cls_dev.tsv"), "span": ("span_train.jsonl", "span_dev.jsonl"),
                 "span_v2": ("span_v2_train.jsonl", "span_v2_dev.jsonl"),
                 "choice": ("choice_train.jsonl", "choice_dev.jsonl"), "tagging": ("tag_train.txt", "tag_dev.txt")}


def pretrain_config(cfg: dict, vocab_size: int) -> PretrainConfig:
    model = ModelConfig(L=cfg["L"], H=cfg["H"], A=cfg["A"], V=vocab_size, max_positions=cfg["max_positions"],
                        ffn_size=cfg["ffn_size"] or None, dropout=cfg["dropout"],
                        attention_mode=cfg["attention_mode"], dtype=cfg["dtype"])
    policy = MaskingPolicy(cfg["select_rate"], cfg["p_mask"], cfg["p_same"], cfg["p_random"])
    return PretrainConfig(model, batch_size=cfg["batch_size"], max_len=cfg["max_len"],
                          total_steps=cfg["total_steps"], warmup_steps=cfg["warmup_steps"], lr=cfg["lr"],
                          weight_decay=cfg["weight_decay"], clip_norm=cfg["clip_norm"], nsp=cfg["nsp"],
                          objective=cfg["objective"], policy=policy, short_fraction=cfg["short_fraction"],
                          short_max_len=cfg["short_max_len"])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------
def cmd_pretrain(run: Run) -> int:
    tok = _tokenizer(run)
    docs = load_corpus(_data_path(run, run.cfg["corpus"], "toy_corpus.txt"), tok)
    pcfg = pretrain_config(run.cfg, len(tok.vocab))
    resume = load_checkpoint(run.path(run.args.resume)) if run.args.resume else None
    res = pretrain(pcfg, docs, tok.vocab, run.seed, checkpoint_every=run.cfg["checkpoint_every"] or None,
                   resume=resume, workers=run.cfg["workers"])
    for ck in res.checkpoints:
        save_checkpoint(run.artifact(f"step_{ck.step:07d}.mbrt"), ck)
    save_checkpoint(run.artifact("final.mbrt"), res.final)
    with open(run.artifact("history.jsonl"), "w", encoding="utf-8") as f:
        for rec in res.history:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    run.finish({"pretrain_config": pcfg.to_dict()})
    print(run.out / "final.mbrt")
    return 0


def _finetune_params(cfg: dict) -> FinetuneParams:
    return FinetuneParams(batch_size=cfg["batch_size"], lr=cfg["lr"], epochs=cfg["epochs"],
                          warmup_frac=cfg["warmup_frac"], weight_decay=cfg["weight_decay"],
                          clip_norm=cfg["clip_norm"])


def cmd_finetune(run: Run) -> int:
    kind = TASK_ALIASES[run.args.task]
    tok = _tokenizer(run)
    ckpt = load_checkpoint(run.path(run.args.checkpoint))
    tr, dv = FIXTURE_FILES[kind]
    data = load_task_data(kind, _data_path(run, run.cfg["train"], tr), _data_path(run, run.cfg["dev"], dv), tok,
                          run.cfg["max_len"])
    kw = {"vocab": tok.vocab, "max_span_len": run.cfg["max_span_len"]}
    extra = {}
    if run.args.grid:
        sel = finetune_grid(ckpt, data, kind, run.seed, **kw)
        result = sel.best
        extra["grid"] = [{"hp": asdict(hp), "dev": r.dev_score} for hp, r in zip(sel.settings, sel.runs)]
        extra["selected"] = sel.best_index
    elif run.args.restarts and run.args.restarts > 1:
        sel = random_restarts(ckpt, data, kind, _finetune_params(run.cfg), run.args.restarts, run.seed, **kw)
        result = sel.best
        extra["restarts"] = [{"seed": s, "dev": r.dev_score} for s, r in zip(sel.settings, sel.runs)]
        extra["selected"] = sel.best_index
    else:
        result = finetune(ckpt, data, kind, _finetune_params(run.cfg), run.seed, **kw)
    save_checkpoint(run.artifact("finetuned.mbrt"), result.checkpoint)
    report = result.metrics.to_dict()
    report.update(extra)
    run.write_json("report.json", report)
    _write_predictions(run, result.predictions)
    run.finish()
    print(json.dumps(result.metrics.metrics, sort_keys=True))
    return 0


def _write_predictions(run: Run, preds) -> None:
    with open(run.artifact("predictions.jsonl"), "w", encoding="utf-8") as f:
        for i, p in enumerate(preds):
            f.write(json.dumps({"index": i, "prediction": p}, sort_keys=True) + "\n")


def cmd_eval(run: Run) -> int:
    tok = _tokenizer(run)
    ckpt = load_checkpoint(run.path(run.args.checkpoint))
    head = ckpt.meta.get("head")
    if head is None:
        docs = load_corpus(_data_path(run, run.cfg["data"], "toy_corpus_dev.txt"), tok)
        max_len = min(run.cfg["max_len"], ckpt.config.max_positions)
        metrics = {"perplexity": ab.masked_lm_perplexity(ckpt, docs, tok.vocab, seed=run.seed,
                                                         n_examples=run.cfg["examples"], max_len=max_len)}
        if any(n.startswith("nsp.") for n in ckpt.weights):
            metrics["nsp_accuracy"] = ab.nsp_accuracy(ckpt, docs, tok.vocab, run.seed, run.cfg["examples"], max_len)
        report = MetricReport("pretrain", metrics, run.cfg["examples"], run.seed, config_hash(ckpt.config.to_dict()))
        preds = []
    else:
        kind = head
        dev = _data_path(run, run.cfg["data"], FIXTURE_FILES[kind][1])
        names = ckpt.meta.get("label_names") or None
        data = load_task_data(kind, None, dev, tok, run.cfg["max_len"])
        if names and kind == "tagging" and data.label_names != names:
            data.dev, _ = load_tag_dataset(dev, tok, run.cfg["max_len"], names)
        task = make_task(kind, ckpt.config, tok.vocab.pad_id, ckpt.meta.get("num_labels", 2),
                         max_span_len=run.cfg["max_span_len"])
        task.tau = float(ckpt.meta.get("tau", 0.0))
        enc = params_from_arrays(ckpt.weights, encoder_shapes(ckpt.config))
        h = head_from_weights(kind, ckpt.weights, task.tau)
        if kind == "span_v2":
            preds = task.predict(enc, h, data.dev)
            metrics = task.score(preds, data.dev)
            metrics["tau"] = task.tau
        else:
            metrics, preds = task.evaluate(enc, h, data.dev)
        report = MetricReport(task.kind, metrics, len(data.dev), run.seed, config_hash(ckpt.config.to_dict()))
    run.write_json("report.json", report.to_dict())
    _write_predictions(run, preds)
    run.finish()
    print(json.dumps(report.metrics, sort_keys=True))
    return 0


def cmd_extract(run: Run) -> int:
    tok = _tokenizer(run)
    ckpt_path = run.path(run.args.checkpoint)
    ckpt = load_checkpoint(ckpt_path)
    data_path = _data_path(run, run.cfg["data"], "tag_dev.txt")
    data = load_task_data("tagging", None, data_path, tok, run.cfg["max_len"])
    strategy = FeatureStrategy(run.args.strategy)
    params = params_from_arrays(ckpt.weights, encoder_shapes(ckpt.config))
    corpus = hashlib.sha256(Path(data_path).read_bytes()).hexdigest()
    cache = FeatureCache(run.out)
    key = cache_key(corpus, ckpt.digest(), strategy)
    feats = cache.get_or_compute(key, lambda: feature_inputs(params, ckpt.config, data.dev, strategy,
                                                             tok.vocab.pad_id))
    run.artifacts.append(str(cache.path(key)))
    run.finish({"strategy": strategy.value, "feature_shape": list(feats[0].shape) if feats else []})
    print(cache.path(key))
    return 0


def _triples(text: str) -> list[tuple[int, int, int]]:
    out = []
    for item in text.split(","):
        parts = item.strip().split("/")
        if len(parts) != 3:
            raise CliConfigError(f"mask triple {item!r} must look like mask/same/random")
        out.append(tuple(int(p) for p in parts))
    return out


def cmd_ablate(run: Run) -> int:
    tok = _tokenizer(run)
    arm = run.args.arm
    default_corpus = "cloze_train.txt" if arm == "ltr-no-nsp" else "toy_corpus.txt"
    docs = load_corpus(_data_path(run, run.cfg["corpus"], default_corpus), tok)
    base = pretrain_config(run.cfg, len(tok.vocab))
    specs = ab.preset(arm, _triples(run.cfg["mask_triples"]), [int(s) for s in run.cfg["steps"].split(",")])
    hp = FinetuneParams(batch_size=run.cfg["finetune_batch_size"], lr=run.cfg["finetune_lr"],
                        epochs=run.cfg["finetune_epochs"])
    fx = ab.Fixtures(finetune=hp, tagger_epochs=run.cfg["tagger_epochs"],
                     feature_strategy=FeatureStrategy(run.cfg["feature_strategy"]).value)
    max_len = base.max_len
    if arm == "ltr-no-nsp":
        dev = load_corpus(fixture_path("cloze_dev.txt"), tok)
        fx.cloze_dev = [s for d in dev for s in d.sentences]
        fx.cloze_targets = set(tok.vocab.to_ids([t for t in tok.vocab.tokens if t.startswith("c")
                                                 and t[1:].isdigit()]))
    else:
        fx.cls = load_task_data("classification", fixture_path("cls_train.tsv"), fixture_path("cls_dev.tsv"), tok,
                                max_len)
        if arm == "mask-grid":
            fx.tag = load_task_data("tagging", fixture_path("tag_train.txt"), fixture_path("tag_dev.txt"), tok,
                                    max_len)
    report = ab.run_ablation(base, specs, docs, tok.vocab, fx, run.seed, out_dir=run.out,
                             store=ab.CheckpointStore(run.path("ablation_cache")))
    run.artifacts += [str(run.out / "report.tsv")]
    (run.artifact("grid.txt")).write_text(report.to_grid(), encoding="utf-8")
    run.write_json("rows.json", {"kind": report.kind, "columns": report.columns,
                                 "rows": [r.to_dict() for r in report.rows]})
    run.finish({"arm": arm, "requested": [asdict(s) for s in specs]})
    sys.stdout.write(report.to_grid())
    return 0


COMMANDS: dict[str, Callable[[Run], int]] = {"pretrain": cmd_pretrain, "finetune": cmd_finetune, "eval": cmd_eval,
                                             "extract": cmd_extract, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help="run seed (falls back to $MINIBERT_SEED, then 0)")
    common.add_argument("--workdir", default=".", help="base for every relative path")
    common.add_argument("--out", help="output directory (default: the command name)")
    common.add_argument("--lowercase", dest="lowercase", action="store_true", default=None)
    common.add_argument("--no-lowercase", dest="lowercase", action="store_false")
    common.add_argument("--max-len", type=int)
    common.add_argument("--workers", type=int, help="data pipeline threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="minibert", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sp = sub.add_parser("pretrain", parents=[common], help="pre-train an encoder on a corpus")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sf = sub.add_parser("finetune", parents=[common], help="fine-tune a checkpoint on a task")
    sf.add_argument("--checkpoint", required=True)
    sf.add_argument("--task", required=True, choices=sorted(TASK_ALIASES))
    sf.add_argument("--grid", action="store_true", help="run the 18-setting hyperparameter grid")
    sf.add_argument("--restarts", type=int, help="random restarts, best dev run kept")
    se = sub.add_parser("eval", parents=[common], help="score a checkpoint on a dataset")
    se.add_argument("--checkpoint", required=True)
    sx = sub.add_parser("extract", parents=[common], help="write frozen-encoder features")
    sx.add_argument("--checkpoint", required=True)
    sx.add_argument("--strategy", required=True, choices=STRATEGY_NAMES)
    sa = sub.add_parser("ablate", parents=[common], help="run a pre-training ablation preset")
    sa.add_argument("--arm", required=True, choices=ab.PRESETS)
    return p


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise CliConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    if args.lowercase is not None:
        out["lowercase"] = str(args.lowercase)
    if args.max_len is not None:
        out["max_len"] = str(args.max_len)
    if args.workers is not None:
        out["workers"] = str(args.workers)
    return out


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("MINIBERT_SEED")
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise CliConfigError(f"MINIBERT_SEED must be an integer, got {env!r}") from None


def _fail(category: str, code: int, msg: str) -> int:
    sys.stderr.write(f"error: {category}: {' '.join(str(msg).split())}\n")
    return code


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    np.seterr(all="ignore")
    try:
        file_values = {}
        if args.config:
            cpath = Path(args.config)
            if not cpath.is_absolute():
                cpath = Path(args.workdir) / cpath
            try:
                file_values = parse_config_text(cpath.read_text(encoding="utf-8"), str(cpath))
            except OSError as e:
                raise CliConfigError(f"cannot read config {cpath}: {e.strerror}") from None
        cfg = resolve_config(args.command, file_values, _overrides(args))
        run = Run(args.command, args, cfg, _seed(args))
        return COMMANDS[args.command](run)
    except (CliConfigError, ConfigError, ConfigMismatchError) as e:
        return _fail("config", EXIT_CONFIG, e)
    except (NumericAbort, NonFiniteGradientError, FloatingPointError) as e:
        return _fail("numeric", EXIT_NUMERIC, e)
    except (DataError, VocabError, CheckpointError, FileNotFoundError) as e:
        return _fail("data", EXIT_DATA, e)
    except ValueError as e:
        return _fail("invalid", 1, e)


if __name__ == "__main__":
    sys.exit(main())
