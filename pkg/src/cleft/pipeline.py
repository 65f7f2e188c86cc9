"""Run-level orchestration behind the CLI: data generation, both stages, evaluation.

Artifact layout under ``run_dir``::

    stage1/   best.ckpt  last.ckpt  metrics.csv  config.json
    stage2/   context.ckpt  context.json  metrics.csv  config.json  [sweep.csv]
    eval/     report.json  config.json  [metrics.svg]
    ablations/<name>/...    same layout, one per ablation condition

Each directory carries the config that produced it, and writers hold a file
lock on the directory while they work.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import shutil
import tempfile
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from filelock import FileLock

from cleft.checkpoint import atomic_write_text, load_checkpoint, save_checkpoint
from cleft.config import RunConfig
from cleft.data import (
    PairDataset,
    SynthSpec,
    Vocab,
    cycle_batches,
    generate_synthetic,
    read_manifest,
    read_prompts,
    tokenize_batch,
)
from cleft.errors import CheckpointError, ConfigError, ContractError
from cleft.evaluation import (
    EvalReport,
    full_finetune,
    handcrafted_class_embeddings,
    linear_probe,
    param_ratio_report,
    published_ratio_pairs,
    vision_features,
    zero_shot_classify,
)
from cleft.model import TwoTowerModel
from cleft.peft import STAGE1, apply_freeze_policy, count_params, get_policy
from cleft.prompt_tuning import (
    CONTEXT_PARAM,
    build_prompt_context,
    context_accuracy,
    encode_class_prompts,
    prompt_tune,
)
from cleft.autograd import no_grad
from cleft.training import AdamW, MetricsWriter, pretrain_loop, read_metrics, validation_loss

log = logging.getLogger(__name__)

ABLATIONS = ("no-prompt-ft", "freeze-lm", "full-ft-lm")
_ABLATION_POLICY = {"freeze-lm": "freeze_lm", "full-ft-lm": "full_ft_lm"}


@contextmanager
def locked(directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    with FileLock(str(directory / ".lock")):
        yield directory


def write_config(directory: Path, cfg: RunConfig) -> None:
    atomic_write_text(directory / "config.json", cfg.to_json())


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write_text(path, buf.getvalue())


# --- data -------------------------------------------------------------------

def synth_spec(cfg: RunConfig) -> SynthSpec:
    return SynthSpec(cfg.n_classes, cfg.samples_per_class, cfg.image_size, cfg.patch_size, cfg.channels,
                     cfg.noise_std, cfg.class_only_fraction, cfg.seed)


def gen_data(cfg: RunConfig, data_dir: Path) -> Path:
    """Generate the synthetic corpus into a temp dir, then swap it into place."""
    data_dir = Path(data_dir)
    if data_dir.exists() and any(data_dir.iterdir()) and not (data_dir / "manifest.csv").exists():
        raise ConfigError(f"{data_dir} exists and is not a generated data directory; refusing to replace it")
    data_dir.parent.mkdir(parents=True, exist_ok=True)
    with FileLock(str(data_dir.parent / f".{data_dir.name}.lock")):
        tmp = Path(tempfile.mkdtemp(prefix=f".{data_dir.name}.", dir=data_dir.parent))
        try:
            generate_synthetic(synth_spec(cfg), tmp)
            write_config(tmp, cfg)
            if data_dir.exists():
                old = data_dir.with_name(f".{data_dir.name}.old")
                shutil.rmtree(old, ignore_errors=True)
                data_dir.rename(old)
                tmp.rename(data_dir)
                shutil.rmtree(old)
            else:
                tmp.rename(data_dir)
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
    return data_dir


@dataclass
class Corpus:
    vocab: Vocab
    prompts: dict[int, str]
    prompt_tokens: np.ndarray
    train: PairDataset
    val: PairDataset
    test: PairDataset


def load_corpus(cfg: RunConfig, data_dir: Path) -> Corpus:
    data_dir = Path(data_dir)
    if not (data_dir / "manifest.csv").is_file():
        raise ConfigError(f"data directory {data_dir} has no manifest.csv (run gen-data first)")
    manifest = read_manifest(data_dir / "manifest.csv")
    vocab = Vocab.load(data_dir / "vocab.tsv")
    prompts = read_prompts(data_dir / "prompts.tsv")
    stats = cfg.normalize_stats()
    splits = [PairDataset(manifest, s, vocab, cfg.max_caption_len, stats) for s in ("train", "val", "test")]
    tokens = tokenize_batch([prompts[c] for c in range(len(prompts))], vocab, cfg.max_caption_len)
    return Corpus(vocab, prompts, tokens, *splits)


# --- model I/O ----------------------------------------------------------------

def build_model(cfg: RunConfig, vocab: Vocab) -> TwoTowerModel:
    return TwoTowerModel(cfg.model_config(len(vocab)), cfg.seed)


def load_model(cfg: RunConfig, vocab: Vocab, checkpoint: Path) -> TwoTowerModel:
    model = build_model(cfg, vocab)
    state = load_checkpoint(checkpoint)
    try:
        model.store.load_state_dict(state)
    except ContractError as exc:
        raise ConfigError(f"checkpoint {checkpoint} does not match the configured model: {exc}") from None
    return model


def file_sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- stage 1 -------------------------------------------------------------------

@dataclass
class PretrainSummary:
    best_step: int
    best_val_loss: float
    first_train_loss: float
    last_train_loss: float
    best_checkpoint: Path
    last_checkpoint: Path
    metrics: Path


def pretrain(cfg: RunConfig, corpus: Corpus, out_dir: Path) -> PretrainSummary:
    out_dir = Path(out_dir)
    with locked(out_dir):
        write_config(out_dir, cfg)
        model = build_model(cfg, corpus.vocab)
        apply_freeze_policy(model.store, get_policy(cfg.freeze_policy))
        optimizer = AdamW(model.store, weight_decay=cfg.weight_decay)

        def validate(step):
            return validation_loss(model, corpus.val, cfg.batch_size, cfg.denominator)

        tmp_metrics = out_dir / ".metrics.csv.partial"
        tmp_metrics.unlink(missing_ok=True)
        try:
            with MetricsWriter(tmp_metrics) as metrics:
                result = pretrain_loop(model, cycle_batches(corpus.train, cfg.batch_size, cfg.seed),
                                       cfg.stage1_schedule(), optimizer, cfg.denominator,
                                       cfg.eval_interval, validate, metrics)
            save_checkpoint(out_dir / "best.ckpt", result.best_state)
            save_checkpoint(out_dir / "last.ckpt", result.last_state)
            tmp_metrics.replace(out_dir / "metrics.csv")
        finally:
            tmp_metrics.unlink(missing_ok=True)
    losses = result.train_losses
    head = float(np.mean(losses[:20]))
    tail = float(np.mean(losses[-100:]))
    return PretrainSummary(result.best_step, result.best_val_loss, head, tail,
                           out_dir / "best.ckpt", out_dir / "last.ckpt", out_dir / "metrics.csv")


# --- stage 2 -------------------------------------------------------------------

@dataclass
class PromptTuneSummary:
    length: int
    final_loss: Optional[float]
    val_accuracy: float
    test_accuracy: float


def _tune_one(cfg: RunConfig, corpus: Corpus, stage1: Path, length: int,
              metrics: Optional[MetricsWriter] = None):
    model = load_model(cfg, corpus.vocab, stage1)
    ctx = build_prompt_context(model, corpus.prompt_tokens, length, cfg.seed)
    result = prompt_tune(model, ctx, cycle_batches(corpus.train, cfg.prompt_batch_size, cfg.seed),
                         cfg.stage2_schedule(), train_temperature=cfg.prompt_train_temperature,
                         metrics=metrics)
    summary = PromptTuneSummary(length, result.losses[-1] if result.losses else None,
                                context_accuracy(model, ctx, corpus.val),
                                context_accuracy(model, ctx, corpus.test))
    return model, ctx, summary


def prompt_tune_run(cfg: RunConfig, corpus: Corpus, stage1: Path, out_dir: Path,
                    length: Optional[int] = None) -> PromptTuneSummary:
    """Tune one context; save it (context tensor only) plus a JSON metadata sidecar."""
    length = cfg.prompt_length if length is None else length
    if length < 1:
        raise ConfigError("prompt-tune needs a context length >= 1")
    out_dir = Path(out_dir)
    with locked(out_dir):
        cfg = cfg.replace(prompt_length=length)
        write_config(out_dir, cfg)
        metrics = MetricsWriter()
        model, ctx, summary = _tune_one(cfg, corpus, Path(stage1), length, metrics)
        tensors = {CONTEXT_PARAM: ctx.context.value}
        if cfg.prompt_train_temperature:
            tensors[model.temperature.log_tau.name] = model.temperature.log_tau.value
        save_checkpoint(out_dir / "context.ckpt", tensors)
        meta = {
            "length": length,
            "d_model": int(ctx.context.shape[1]),
            "n_classes": ctx.n_classes,
            "class_prompts": {str(c): p for c, p in sorted(corpus.prompts.items())},
            "stage1_checkpoint_sha256": file_sha256(stage1),
            "seed": cfg.seed,
            "final_loss": summary.final_loss,
            "val_accuracy": summary.val_accuracy,
            "test_accuracy": summary.test_accuracy,
        }
        atomic_write_text(out_dir / "context.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
        _write_csv(out_dir / "metrics.csv", ["step", "split", "loss", "lr", "tau", "acc"],
                   [[r[0], r[1], *(_fmt(v) for v in r[2:])] for r in metrics.rows])
    return summary


def _fmt(v) -> str:
    return "" if v is None else f"{float(v):.9g}"


def prompt_sweep(cfg: RunConfig, corpus: Corpus, stage1: Path, out_dir: Path,
                 lengths: Optional[list[int]] = None) -> list[PromptTuneSummary]:
    """Accuracy against context length; writes ``sweep.csv``."""
    lengths = cfg.sweep_lengths() if lengths is None else lengths
    if min(lengths) < 1:
        raise ConfigError("sweep lengths must be >= 1")
    out_dir = Path(out_dir)
    with locked(out_dir):
        write_config(out_dir, cfg)
        rows = []
        for length in lengths:
            _, _, summary = _tune_one(cfg, corpus, Path(stage1), length)
            log.info("L=%d val %.4f test %.4f", length, summary.val_accuracy, summary.test_accuracy)
            rows.append(summary)
        _write_csv(out_dir / "sweep.csv", ["length", "val_accuracy", "test_accuracy", "final_loss"],
                   [[s.length, _fmt(s.val_accuracy), _fmt(s.test_accuracy), _fmt(s.final_loss)] for s in rows])
    return rows


def load_context(model: TwoTowerModel, corpus: Corpus, path: Path):
    tensors = load_checkpoint(path)
    if CONTEXT_PARAM not in tensors:
        raise CheckpointError(f"{path} has no {CONTEXT_PARAM!r} tensor")
    context = tensors[CONTEXT_PARAM]
    if context.ndim != 2 or context.shape[1] != model.cfg.text.d_model:
        raise ConfigError(f"context {context.shape} does not fit text d_model={model.cfg.text.d_model}")
    ctx = build_prompt_context(model, corpus.prompt_tokens, context.shape[0], 0)
    ctx.context.value = context.copy()
    name = model.temperature.log_tau.name
    if name in tensors:
        model.temperature.log_tau.value = tensors[name].reshape(()).copy()
    return ctx


# --- evaluation ----------------------------------------------------------------

def zero_shot(model: TwoTowerModel, corpus: Corpus, context_path: Optional[Path]) -> EvalReport:
    if context_path is not None and Path(context_path).is_file():
        ctx = load_context(model, corpus, Path(context_path))
        with no_grad():
            class_embs = encode_class_prompts(ctx, model).value
        report = zero_shot_classify(model, corpus.test, class_embs)
        report.notes.append(f"learned prompt context, L={ctx.length}")
    else:
        report = zero_shot_classify(model, corpus.test, handcrafted_class_embeddings(model, corpus.prompt_tokens))
        report.notes.append("handcrafted prompts")
    return report


def linear_probe_eval(cfg: RunConfig, model: TwoTowerModel, corpus: Corpus) -> EvalReport:
    return linear_probe(vision_features(model, corpus.train.images), corpus.train.labels,
                        vision_features(model, corpus.test.images), corpus.test.labels,
                        cfg.probe_config(), cfg.n_classes)


def finetune_eval(cfg: RunConfig, model: TwoTowerModel, corpus: Corpus) -> EvalReport:
    return full_finetune(model, corpus.train, corpus.test, cfg.finetune_config(), cfg.n_classes)


def ablation(cfg: RunConfig, corpus: Corpus, name: str, run_dir: Path) -> EvalReport:
    """One ablation condition, evaluated zero-shot on the test split.

    ``no-prompt-ft`` reuses the main stage-1 checkpoint with handcrafted
    prompts. ``freeze-lm`` and ``full-ft-lm`` retrain stage 1 under their own
    freeze policy (reusing an earlier run when present), then prompt-tune.
    """
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; choose from {ABLATIONS}")
    run_dir = Path(run_dir)
    if name == "no-prompt-ft":
        model = load_model(cfg, corpus.vocab, require(run_dir / "stage1" / "best.ckpt"))
        report = zero_shot(model, corpus, None)
    else:
        sub = run_dir / "ablations" / name
        acfg = cfg.replace(freeze_policy=_ABLATION_POLICY[name])
        stage1 = sub / "stage1" / "best.ckpt"
        if not _matching_run(sub / "stage1", acfg):
            pretrain(acfg, corpus, sub / "stage1")
        prompt_tune_run(acfg, corpus, stage1, sub / "stage2")
        model = load_model(acfg, corpus.vocab, stage1)
        report = zero_shot(model, corpus, sub / "stage2" / "context.ckpt")
    report.protocol = f"ZS[{name}]"
    return report


def _matching_run(directory: Path, cfg: RunConfig) -> bool:
    cfg_file = directory / "config.json"
    if not (directory / "best.ckpt").is_file() or not cfg_file.is_file():
        return False
    return cfg_file.read_text(encoding="utf-8") == cfg.to_json()


def require(path: Path) -> Path:
    if not Path(path).is_file():
        raise ConfigError(f"required file {path} does not exist")
    return Path(path)


# --- parameter accounting --------------------------------------------------------

def toy_ratio_pairs(cfg: RunConfig, vocab_size: int) -> list[tuple[str, float, float]]:
    """Trainable parameter counts of the configured model: stage 1 vs training every tensor."""
    model = TwoTowerModel(cfg.model_config(vocab_size), cfg.seed)
    apply_freeze_policy(model.store, STAGE1)
    ours = count_params(model.store, trainable_only=True)
    everything = count_params(model.store)
    base_lm = everything.get("text_base") + everything.get("text_embedding")
    return [
        ("configured model: stage-1 trainable / all parameters", ours.total, everything.total),
        ("configured model: adapter / text tower", ours.adapter, base_lm),
        ("configured model: unlocked token embeddings / text tower", ours.get("text_embedding"), base_lm),
    ]


def ratio_report(cfg: Optional[RunConfig] = None, vocab_size: Optional[int] = None):
    pairs = published_ratio_pairs()
    if cfg is not None and vocab_size is not None:
        pairs += toy_ratio_pairs(cfg, vocab_size)
    return param_ratio_report(pairs)


# --- plots ---------------------------------------------------------------------

def plot_metrics(metrics_csv: Path, out_svg: Path) -> Path:
    """Static SVG line chart of the training and validation loss against step."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_metrics(metrics_csv)
    series: dict[str, tuple[list[int], list[float]]] = {}
    for r in rows:
        if r["loss"]:
            xs, ys = series.setdefault(f"{r['split']} loss", ([], []))
            xs.append(int(r["step"]))
            ys.append(float(r["loss"]))
    with matplotlib.rc_context({"svg.hashsalt": "cleft", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, (xs, ys) in sorted(series.items()):
            ax.plot(xs, ys, label=label, linewidth=1.0)
        ax.set_xlabel("step")
        ax.set_ylabel("contrastive loss")
        ax.legend()
        fig.tight_layout()
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)
    atomic_write_text(out_svg, buf.getvalue())
    return Path(out_svg)


def as_jsonable(obj):
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, dict):
        return {k: as_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [as_jsonable(v) for v in obj]
    if hasattr(obj, "__dataclass_fields__"):
        return as_jsonable(asdict(obj))
    return obj
