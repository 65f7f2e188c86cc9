"""LR schedule, AdamW/SGD, metrics CSV and the contrastive pretraining loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional

import numpy as np

from cleft.autograd import ParameterStore, backward, no_grad
from cleft.data import PairBatch, PairDataset, load_batches
from cleft.errors import ConfigError, NumericError
from cleft.model import TwoTowerModel
from cleft.objectives import info_nce_symmetric

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "split", "loss", "lr", "tau", "acc")


@dataclass(frozen=True)
class ScheduleConfig:
    peak_lr: float
    warmup_steps: int
    total_steps: int
    min_lr: float = 0.0

    def __post_init__(self):
        if not 0 <= self.warmup_steps < max(self.total_steps, 1):
            raise ConfigError(
                f"need 0 <= warmup_steps < total_steps, got {self.warmup_steps} / {self.total_steps}")
        if not self.peak_lr > self.min_lr >= 0:
            raise ConfigError(f"need peak_lr > min_lr >= 0, got {self.peak_lr} / {self.min_lr}")


def lr_at(step: int, cfg: ScheduleConfig) -> float:
    """Linear warm-up from 0 to ``peak_lr``, then cosine decay to ``min_lr``."""
    if step >= cfg.total_steps:
        return cfg.min_lr
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))


def _decay_matrices(name: str, value: np.ndarray) -> bool:
    return value.ndim >= 2


class Optimizer:
    def __init__(self, store: ParameterStore):
        self.store = store
        self.step_count = 0

    def _grads(self):
        for name, var in self.store.trainable_items():
            g = var.grad
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            yield name, var, g

    def zero_grad(self) -> None:
        self.store.zero_grads()


class AdamW(Optimizer):
    """Adam with decoupled weight decay; touches trainable parameters only.

    Decay applies to parameters selected by ``decay_filter`` (matrices by
    default, so biases, gains and the temperature are not shrunk).
    """

    def __init__(self, store: ParameterStore, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.2,
                 decay_filter: Callable[[str, np.ndarray], bool] = _decay_matrices):
        super().__init__(store)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay_filter = decay_filter
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, lr: float) -> None:
        grads = list(self._grads())
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for name, var, g in grads:
            p = var.value
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            if self.weight_decay and self.decay_filter(name, p):
                p = p * p.dtype.type(1.0 - lr * self.weight_decay)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            var.value = (p - lr * update).astype(p.dtype)


class SGD(Optimizer):
    def __init__(self, store: ParameterStore, momentum: float = 0.9, weight_decay: float = 0.0):
        super().__init__(store)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buf: dict[str, np.ndarray] = {}

    def step(self, lr: float) -> None:
        grads = list(self._grads())
        self.step_count += 1
        for name, var, g in grads:
            if self.weight_decay:
                g = g + self.weight_decay * var.value
            if self.momentum:
                b = self.buf.get(name)
                b = g.copy() if b is None else self.momentum * b + g
                self.buf[name] = b
                g = b
            var.value = (var.value - lr * g).astype(var.value.dtype)


# --- metrics ------------------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.9g}"


class MetricsWriter:
    """Appends ``step,split,loss,lr,tau,acc`` rows to a CSV file (or just keeps them)."""

    def __init__(self, path: Optional[Path] = None):
        self.path = Path(path) if path is not None else None
        self.rows: list[tuple] = []
        if self.path is not None and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(",".join(METRIC_FIELDS) + "\n")
        self._fh = open(self.path, "a", encoding="utf-8") if self.path is not None else None

    def write(self, step: int, split: str, loss=None, lr=None, tau=None, acc=None) -> None:
        row = (step, split, loss, lr, tau, acc)
        self.rows.append(row)
        if self._fh is not None:
            self._fh.write(",".join(_fmt(v) if i != 1 else v for i, v in enumerate(row)) + "\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list[dict[str, str]]:
    import csv
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# --- stage 1 ------------------------------------------------------------------

def contrastive_step_loss(model: TwoTowerModel, batch: PairBatch, denominator: str = "inclusive"):
    I = model.embed_images(batch.images)
    T = model.embed_text(batch.tokens)
    return info_nce_symmetric(I, T, model.temperature, denominator), I, T


def in_batch_accuracy(I: np.ndarray, T: np.ndarray) -> float:
    """Fraction of images whose most similar caption in the batch is their own."""
    S = I @ T.T
    return float(np.mean(S.argmax(axis=1) == np.arange(len(S))))


def validation_loss(model: TwoTowerModel, data: PairDataset, batch_size: int,
                    denominator: str = "inclusive") -> tuple[float, float]:
    """Sample-weighted mean contrastive loss and in-batch accuracy over a split."""
    total = acc = 0.0
    count = 0
    with no_grad():
        for batch in load_batches(data, batch_size, seed=0, train=False):
            if len(batch) < 2:
                continue
            loss, I, T = contrastive_step_loss(model, batch, denominator)
            n = len(batch)
            total += float(loss.total.value) * n
            acc += in_batch_accuracy(I.value, T.value) * n
            count += n
    if count == 0:
        raise ConfigError("validation split has fewer than 2 samples")
    return total / count, acc / count


@dataclass
class PretrainResult:
    best_state: dict[str, np.ndarray]
    last_state: dict[str, np.ndarray]
    best_step: int
    best_val_loss: float
    train_losses: list[float] = field(default_factory=list)
    val_history: list[tuple[int, float]] = field(default_factory=list)


def pretrain_loop(model: TwoTowerModel, batches: Iterator[PairBatch], schedule: ScheduleConfig,
                  optimizer: AdamW, denominator: str = "inclusive", eval_interval: int = 200,
                  validate: Optional[Callable[[int], object]] = None,
                  metrics: Optional[MetricsWriter] = None,
                  on_step: Optional[Callable[[int, TwoTowerModel], None]] = None) -> PretrainResult:
    """Contrastive pretraining with best-validation checkpoint tracking.

    ``validate(step)`` returns a validation loss, or ``(loss, acc)``; the state
    with the lowest loss (first one on ties) is kept as the best checkpoint.
    The freeze policy must already be applied to ``model.store``.
    """
    store = model.store
    best_state = store.state_dict()
    best_step, best_loss = 0, math.inf
    result = PretrainResult(best_state, best_state, 0, math.inf)

    def run_validation(step: int) -> None:
        nonlocal best_state, best_step, best_loss
        if validate is None:
            return
        out = validate(step)
        loss, acc = (out if isinstance(out, tuple) else (out, None))
        result.val_history.append((step, float(loss)))
        if metrics is not None:
            metrics.write(step, "val", loss, lr_at(step, schedule), model.temperature.tau, acc)
        if loss < best_loss:
            best_loss, best_step = float(loss), step
            best_state = store.state_dict()
        log.info("step %d val loss %.4f", step, loss)

    for step in range(1, schedule.total_steps + 1):
        batch = next(batches)
        lr = lr_at(step - 1, schedule)
        optimizer.zero_grad()
        loss, I, T = contrastive_step_loss(model, batch, denominator)
        value = float(loss.total.value)
        if not math.isfinite(value):
            raise NumericError(f"non-finite training loss at step {step}")
        backward(loss.total)
        optimizer.step(lr)
        model.temperature.clamp()
        result.train_losses.append(value)
        if metrics is not None:
            metrics.write(step, "train", value, lr, model.temperature.tau, in_batch_accuracy(I.value, T.value))
        if on_step is not None:
            on_step(step, model)
        if step % eval_interval == 0 or step == schedule.total_steps:
            run_validation(step)

    optimizer.zero_grad()
    result.best_state = best_state
    result.best_step = best_step
    result.best_val_loss = best_loss
    result.last_state = store.state_dict()
    return result
