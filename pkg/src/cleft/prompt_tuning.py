"""Learnable prompt context shared by all classes, tuned with frozen encoders.

Each class prompt is fed to the text tower as input embeddings
``[context rows] ++ [class-name token embeddings] ++ [EOS embedding]``; the
context rows replace the shared part of the handcrafted captions.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from cleft.autograd import ParameterStore, Variable, backward, no_grad, ops
from cleft.data import EOS, PAD, PairBatch, PairDataset, load_batches
from cleft.encoders import project
from cleft.errors import ConfigError, ContractError, NumericError
from cleft.model import TwoTowerModel
from cleft.objectives import zero_shot_logits
from cleft.peft import STAGE2, STAGE2_WITH_TEMPERATURE, apply_freeze_policy
from cleft.training import MetricsWriter, ScheduleConfig, SGD, lr_at

log = logging.getLogger(__name__)

CONTEXT_PARAM = "prompt.context"
UNIFORM_BOUND = 0.05


def init_context(caption_ids: Sequence[int], embedding_table: np.ndarray, length: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Context rows initialised from a handcrafted caption.

    With a caption of ``M >= L`` tokens the first ``L`` token embeddings are
    used. Otherwise the last ``M`` rows are the caption embeddings and the
    leading ``L - M`` rows are drawn from U(-0.05, 0.05).
    """
    caption_ids = np.asarray(caption_ids, dtype=np.int64)
    m = len(caption_ids)
    if m < 1:
        raise ContractError("context initialisation needs a non-empty caption")
    if length < 1:
        raise ContractError(f"context length must be >= 1, got {length}")
    table = np.asarray(embedding_table, dtype=np.float32)
    if m >= length:
        if m > length:
            log.info("caption has %d tokens, truncated to context length %d", m, length)
        return table[caption_ids[:length]].copy()
    fill = rng.uniform(-UNIFORM_BOUND, UNIFORM_BOUND, size=(length - m, table.shape[1])).astype(np.float32)
    return np.concatenate([fill, table[caption_ids]], axis=0)


def split_prompts(prompt_tokens: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Split tokenised class prompts into the shared leading words and per-class suffixes.

    Suffixes keep their EOS. Without a shared prefix the first class caption
    serves as the initialisation caption and every full caption is a suffix.
    """
    rows = []
    for ids in np.asarray(prompt_tokens):
        eos = int(np.argmax(ids == EOS))
        rows.append(ids[:eos].tolist())
    n = 0
    shortest = min(len(r) for r in rows)
    while n < shortest - 1 and all(r[n] == rows[0][n] for r in rows):
        n += 1
    if n == 0:
        log.info("class prompts share no leading tokens; initialising from class 0's caption")
        return np.asarray(rows[0], dtype=np.int64), [np.asarray(r + [EOS], dtype=np.int64) for r in rows]
    return (np.asarray(rows[0][:n], dtype=np.int64),
            [np.asarray(r[n:] + [EOS], dtype=np.int64) for r in rows])


class PromptContext:
    """``L`` trainable rows shared by every class, plus per-class suffix ids."""

    def __init__(self, context: Optional[np.ndarray], suffixes: Sequence[np.ndarray],
                 store: Optional[ParameterStore] = None):
        if len(suffixes) < 2:
            raise ConfigError("prompt tuning needs C >= 2 classes")
        for c, s in enumerate(suffixes):
            s = np.asarray(s)
            if len(s) < 1 or s[-1] != EOS or (s[:-1] == EOS).any():
                raise ContractError(f"class {c} suffix must end with exactly one EOS")
        self.suffixes = [np.asarray(s, dtype=np.int64) for s in suffixes]
        self.context: Optional[Variable] = None
        if context is not None and len(context):
            if store is not None:
                if CONTEXT_PARAM in store:
                    store.remove(CONTEXT_PARAM)
                self.context = store.add(CONTEXT_PARAM, context, "prompt_context")
            else:
                self.context = Variable(np.asarray(context, dtype=np.float32), requires_grad=True,
                                        name=CONTEXT_PARAM)

    @property
    def length(self) -> int:
        return 0 if self.context is None else self.context.shape[0]

    @property
    def n_classes(self) -> int:
        return len(self.suffixes)

    def detach_from(self, store: ParameterStore) -> None:
        if CONTEXT_PARAM in store:
            store.remove(CONTEXT_PARAM)


def build_prompt_context(model: TwoTowerModel, prompt_tokens: np.ndarray, length: int,
                         seed: int, attach: bool = True) -> PromptContext:
    init_ids, suffixes = split_prompts(prompt_tokens)
    context = None
    if length > 0:
        rng = np.random.default_rng([seed, 7])
        context = init_context(init_ids, model.text.tok_emb.value, length, rng)
    return PromptContext(context, suffixes, model.store if attach else None)


def encode_class_prompts(ctx: PromptContext, model: TwoTowerModel,
                         class_ids: Optional[Sequence[int]] = None) -> Variable:
    """Joint embeddings ``[C, d_joint]`` of every class prompt, all sharing one context tensor."""
    classes = list(range(ctx.n_classes)) if class_ids is None else list(class_ids)
    suffixes = [ctx.suffixes[c] for c in classes]
    width = max(len(s) for s in suffixes)
    ids = np.full((len(classes), width), PAD, dtype=np.int64)
    for i, s in enumerate(suffixes):
        ids[i, :len(s)] = s
    n_ctx = ctx.length
    total = n_ctx + width
    if total > model.text.cfg.max_seq_len:
        raise ConfigError(f"prompt of {total} tokens exceeds max_seq_len={model.text.cfg.max_seq_len}")
    emb = model.text.embed_ids(ids)
    pad = ids == PAD
    if n_ctx:
        d = ctx.context.shape[1]
        shared = ops.broadcast_to(ctx.context, (len(classes), n_ctx, d))
        emb = ops.concat([shared, emb], axis=1)
        pad = np.concatenate([np.zeros((len(classes), n_ctx), dtype=bool), pad], axis=1)
    eos = n_ctx + np.array([len(s) - 1 for s in suffixes])
    hidden = model.text.hidden_states(emb, pad)
    return project(model.text.pool(hidden, eos), model.text_head).vector


def prompt_tune_step(batch: PairBatch, ctx: PromptContext, model: TwoTowerModel,
                     optimizer: SGD, lr: float) -> float:
    """One cross-entropy step on zero-shot logits; only the context moves."""
    if batch.labels.size and batch.labels.max() >= ctx.n_classes:
        raise IndexError(f"label {int(batch.labels.max())} >= number of classes {ctx.n_classes}")
    with no_grad():
        images = model.embed_images(batch.images)
    optimizer.zero_grad()
    class_embs = encode_class_prompts(ctx, model)
    loss = ops.cross_entropy(zero_shot_logits(images, class_embs, model.temperature), batch.labels)
    value = float(loss.value)
    if not math.isfinite(value):
        raise NumericError("non-finite prompt-tuning loss")
    backward(loss)
    optimizer.step(lr)
    return value


@dataclass
class PromptTuneResult:
    context: Optional[np.ndarray]
    losses: list[float] = field(default_factory=list)


def prompt_tune(model: TwoTowerModel, ctx: PromptContext, batches: Iterator[PairBatch],
                schedule: ScheduleConfig, momentum: float = 0.9, weight_decay: float = 0.0,
                train_temperature: bool = False,
                metrics: Optional[MetricsWriter] = None) -> PromptTuneResult:
    """Stage-2 loop: freeze everything but the context, SGD on zero-shot cross-entropy."""
    if ctx.context is None:
        return PromptTuneResult(None)
    if CONTEXT_PARAM not in model.store or model.store[CONTEXT_PARAM] is not ctx.context:
        raise ContractError("prompt context must be attached to the model's parameter store")
    apply_freeze_policy(model.store, STAGE2_WITH_TEMPERATURE if train_temperature else STAGE2)
    optimizer = SGD(model.store, momentum=momentum, weight_decay=weight_decay)
    result = PromptTuneResult(None)
    for step in range(1, schedule.total_steps + 1):
        lr = lr_at(step - 1, schedule)
        value = prompt_tune_step(next(batches), ctx, model, optimizer, lr)
        if train_temperature:
            model.temperature.clamp()
        result.losses.append(value)
        if metrics is not None:
            metrics.write(step, "prompt_train", value, lr, model.temperature.tau, None)
    optimizer.zero_grad()
    result.context = ctx.context.value.copy()
    return result


def context_accuracy(model: TwoTowerModel, ctx: PromptContext, data: PairDataset,
                     batch_size: int = 64) -> float:
    with no_grad():
        class_embs = encode_class_prompts(ctx, model)
        correct = 0
        for batch in load_batches(data, batch_size, seed=0, train=False):
            logits = zero_shot_logits(model.embed_images(batch.images), class_embs, model.temperature)
            correct += int((logits.value.argmax(axis=1) == batch.labels).sum())
    return correct / len(data)
