"""Zero-shot, linear-probe and fine-tune protocols, AUC, and parameter-ratio reports."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from cleft.autograd import ParameterStore, Variable, backward, no_grad, ops
from cleft.data import PairDataset, load_batches, stratified_subset
from cleft.errors import ConfigError, ContractError
from cleft.model import TwoTowerModel
from cleft.objectives import zero_shot_logits
from cleft.peft import FULL_FINETUNE, LINEAR_PROBE, apply_freeze_policy
from cleft.training import AdamW, ScheduleConfig, lr_at

log = logging.getLogger(__name__)

AUC_VARIANT = "macro one-vs-rest"


@dataclass
class EvalReport:
    protocol: str                       # "ZS", "LP" or "FT"
    accuracy: float
    auc: Optional[float]
    n_samples: int
    per_class_accuracy: dict[int, float]
    class_counts: dict[int, int]
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "accuracy": self.accuracy,
            "auc": self.auc,
            "auc_variant": AUC_VARIANT if self.auc is not None else None,
            "n_samples": self.n_samples,
            "per_class_accuracy": {str(c): a for c, a in sorted(self.per_class_accuracy.items())},
            "class_counts": {str(c): n for c, n in sorted(self.class_counts.items())},
            "notes": list(self.notes),
        }


def auc_ovr(scores: np.ndarray, labels: np.ndarray) -> tuple[float, list[int]]:
    """Macro one-vs-rest ROC AUC via Mann-Whitney ranks (ties count one half).

    Classes without both a positive and a negative sample are skipped and
    returned in the second element.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or len(scores) != len(labels):
        raise ContractError(f"scores {scores.shape} do not match {labels.shape} labels")
    if len(np.unique(labels)) < 2:
        raise ContractError("AUC is undefined when every label is the same class")
    aucs, skipped = [], []
    for c in range(scores.shape[1]):
        pos = labels == c
        n_pos = int(pos.sum())
        n_neg = len(labels) - n_pos
        if n_pos == 0 or n_neg == 0:
            skipped.append(c)
            continue
        ranks = rankdata(scores[:, c])
        u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
        aucs.append(u / (n_pos * n_neg))
    return float(np.mean(aucs)), skipped


def make_report(protocol: str, predictions: np.ndarray, labels: np.ndarray,
                scores: Optional[np.ndarray] = None, n_classes: Optional[int] = None) -> EvalReport:
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    classes = range(n_classes) if n_classes is not None else np.unique(labels)
    per_class, counts = {}, {}
    for c in classes:
        mask = labels == c
        if mask.any():
            counts[int(c)] = int(mask.sum())
            per_class[int(c)] = float(np.mean(predictions[mask] == c))
    accuracy = float(np.mean(predictions == labels)) if len(labels) else 0.0
    auc = None
    notes = []
    if scores is not None:
        auc, skipped = auc_ovr(scores, labels)
        if skipped:
            notes.append(f"AUC skipped classes without positives or negatives: {skipped}")
    return EvalReport(protocol, accuracy, auc, int(len(labels)), per_class, counts, notes)


# --- zero-shot ----------------------------------------------------------------

def handcrafted_class_embeddings(model: TwoTowerModel, prompt_tokens: np.ndarray) -> np.ndarray:
    with no_grad():
        return model.embed_text(prompt_tokens).value


def image_embeddings(model: TwoTowerModel, data: PairDataset, batch_size: int = 64) -> np.ndarray:
    with no_grad():
        chunks = [model.embed_images(b.images).value
                  for b in load_batches(data, batch_size, seed=0, train=False)]
    return np.concatenate(chunks, axis=0)


def zero_shot_predict(img_embs: np.ndarray, class_embs: np.ndarray, tau) -> np.ndarray:
    """Argmax class per image; ``np.argmax`` breaks ties toward the lowest index."""
    with no_grad():
        logits = zero_shot_logits(img_embs, class_embs, tau).value
    return logits.argmax(axis=-1)


def zero_shot_classify(model: TwoTowerModel, data: PairDataset, class_embs: np.ndarray,
                       batch_size: int = 64) -> EvalReport:
    img = image_embeddings(model, data, batch_size)
    with no_grad():
        logits = zero_shot_logits(img, np.asarray(class_embs), model.temperature).value
    return make_report("ZS", logits.argmax(axis=-1), data.labels, _softmax_np(logits), len(class_embs))


# --- linear probe and fine-tuning ------------------------------------------------

@dataclass(frozen=True)
class ProbeConfig:
    steps: int = 8000
    batch_size: int = 36
    lr: float = 5e-4
    weight_decay: float = 1e-3
    warmup_steps: int = 0
    seed: int = 0


def vision_features(model: TwoTowerModel, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Pre-projection vision tower output."""
    with no_grad():
        chunks = [model.vision.encode(images[i:i + batch_size]).value for i in range(0, len(images), batch_size)]
    return np.concatenate(chunks, axis=0)


@dataclass(frozen=True)
class FeatureScaler:
    """Per-dimension standardisation fitted on training features, then held constant."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, feats: np.ndarray) -> "FeatureScaler":
        feats = np.asarray(feats, dtype=np.float64)
        std = feats.std(axis=0)
        return cls(feats.mean(axis=0).astype(np.float32), np.where(std > 1e-8, std, 1.0).astype(np.float32))

    def __call__(self, x):
        return (x - self.mean) * (np.float32(1.0) / self.std)


def _classifier_head(store: ParameterStore, n_classes: int, d: int, seed: int) -> tuple[Variable, Variable]:
    rng = np.random.default_rng([seed, 11])
    for name in ("probe.w", "probe.b"):
        if name in store:
            store.remove(name)
    w = store.add("probe.w", rng.normal(0.0, 0.02, size=(n_classes, d)).astype(np.float32), "probe")
    b = store.add("probe.b", np.zeros(n_classes), "probe")
    return w, b


def _softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _train_head(store: ParameterStore, forward: Callable[[np.ndarray], Variable], n_train: int,
                labels: np.ndarray, cfg: ProbeConfig) -> None:
    if cfg.steps == 0:
        return
    opt = AdamW(store, weight_decay=cfg.weight_decay)
    sched = ScheduleConfig(cfg.lr, cfg.warmup_steps, cfg.steps)
    rng = np.random.default_rng([cfg.seed, 13])
    order = rng.permutation(n_train)
    pos = 0
    for step in range(cfg.steps):
        if pos + cfg.batch_size > n_train:
            order = rng.permutation(n_train)
            pos = 0
        idx = order[pos:pos + min(cfg.batch_size, n_train)]
        pos += len(idx)
        opt.zero_grad()
        loss = ops.cross_entropy(forward(idx), labels[idx])
        backward(loss)
        opt.step(lr_at(step, sched))
    opt.zero_grad()


def linear_probe(train_feats: np.ndarray, train_labels: np.ndarray, test_feats: np.ndarray,
                 test_labels: np.ndarray, cfg: ProbeConfig = ProbeConfig(),
                 n_classes: Optional[int] = None) -> EvalReport:
    """Train a single linear layer with cross-entropy on frozen, standardised features."""
    train_labels = np.asarray(train_labels)
    if len(np.unique(train_labels)) < 2:
        raise ConfigError("linear probe needs at least two classes in the training set")
    n_classes = n_classes or int(max(train_labels.max(), np.max(test_labels)) + 1)
    scaler = FeatureScaler.fit(train_feats)
    xtr = scaler(np.asarray(train_feats, dtype=np.float32)).astype(np.float32)
    xte = scaler(np.asarray(test_feats, dtype=np.float32)).astype(np.float32)
    store = ParameterStore()
    w, b = _classifier_head(store, n_classes, xtr.shape[1], cfg.seed)
    apply_freeze_policy(store, LINEAR_PROBE)
    _train_head(store, lambda idx: Variable(xtr[idx]) @ w.T + b, len(xtr), train_labels, cfg)
    logits = xte @ w.value.T + b.value
    return make_report("LP", logits.argmax(axis=1), test_labels, _softmax_np(logits), n_classes)


def clone_model(model: TwoTowerModel) -> TwoTowerModel:
    twin = TwoTowerModel(model.cfg, model.seed)
    twin.store.load_state_dict(model.store.subset(twin.store.tags()), strict=False)
    return twin


def full_finetune(model: TwoTowerModel, train: PairDataset, test: PairDataset,
                  cfg: ProbeConfig = ProbeConfig(), n_classes: Optional[int] = None) -> EvalReport:
    """Cross-entropy fine-tuning of the vision tower plus a linear head.

    Works on a copy; ``model`` is left untouched. Features pass through a
    standardiser fitted once on the initial encoder so that zero steps
    reproduce the linear probe at the same head initialisation.
    """
    n_classes = n_classes or int(max(train.labels.max(), test.labels.max()) + 1)
    if len(np.unique(train.labels)) < 2:
        raise ConfigError("fine-tuning needs at least two classes in the training set")
    twin = clone_model(model)
    scaler = FeatureScaler.fit(vision_features(twin, train.images))
    w, b = _classifier_head(twin.store, n_classes, twin.cfg.vision.d_model, cfg.seed)
    apply_freeze_policy(twin.store, FULL_FINETUNE)

    def forward(idx):
        return scaler(twin.vision.encode(train.images[idx])) @ w.T + b

    _train_head(twin.store, forward, len(train), train.labels, cfg)
    feats = scaler(vision_features(twin, test.images))
    logits = feats @ w.value.T + b.value
    return make_report("FT", logits.argmax(axis=1), test.labels, _softmax_np(logits), n_classes)


def data_ratio_sweep(model: TwoTowerModel, train: PairDataset, test: PairDataset,
                     ratios: Sequence[float] = (0.01, 0.1, 1.0), seeds: Sequence[int] = (0, 1, 2),
                     cfg: ProbeConfig = ProbeConfig()) -> dict[float, list[EvalReport]]:
    """Full fine-tuning on class-stratified fractions of the training split."""
    out: dict[float, list[EvalReport]] = {}
    for ratio in ratios:
        reports = []
        for seed in seeds:
            subset = train.subset(stratified_subset(train.labels, ratio, seed))
            run_cfg = ProbeConfig(cfg.steps, cfg.batch_size, cfg.lr, cfg.weight_decay, cfg.warmup_steps, seed)
            reports.append(full_finetune(model, subset, test, run_cfg))
        out[ratio] = reports
    return out


# --- parameter accounting -------------------------------------------------------

# Trainable parameter counts (millions) as published for the full-scale models.
PUBLISHED_SIZES = {
    "ViT-B-14": {"total": 90.42, "vision": 90.42, "language": None},
    "CLIP-ViT-BERT": {"total": 153.59, "vision": 90.42, "language": 63.16},
    "ConVIRT-R50-BERT": {"total": 108.13, "vision": 25.08, "language": 83.05},
    "GLoRIA-R50-BERT": {"total": 108.14, "vision": 25.08, "language": 83.05},
    "MGCA-ViT": {"total": 168.86, "vision": 85.80, "language": 83.05},
    "MRM-ViT": {"total": 168.85, "vision": 85.79, "language": 83.05},
    "MedCLIP-Swin-BERT": {"total": 110.98, "vision": 27.91, "language": 83.05},
    "CLEFT-ViT-GPT2 (Prefix)": {"total": 93.04, "vision": 90.42, "language": 2.62},
    "CLEFT-ViT-GPT2 (IA3)": {"total": 90.99, "vision": 90.42, "language": 0.57},
    "CLEFT-ViT-GPT2 (LoRA)": {"total": 93.70, "vision": 90.42, "language": 3.27},
}


@dataclass(frozen=True)
class RatioRow:
    name: str
    numerator: float
    denominator: float

    @property
    def ratio(self) -> float:
        return self.numerator / self.denominator

    @property
    def reduction(self) -> float:
        return 1.0 - self.ratio


@dataclass
class RatioReport:
    rows: list[RatioRow]

    def row(self, name: str) -> RatioRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def lines(self) -> list[str]:
        out = []
        for r in self.rows:
            out.append(f"{r.name}: {r.numerator:.6g} / {r.denominator:.6g} = {r.ratio:.3g} "
                       f"({100 * r.ratio:.3g}% kept, {100 * r.reduction:.3g}% reduction)")
        return out

    def to_dict(self) -> dict:
        return {"rows": [{"name": r.name, "numerator": r.numerator, "denominator": r.denominator,
                          "ratio": r.ratio, "reduction": r.reduction} for r in self.rows]}


def param_ratio_report(pairs: Sequence[tuple[str, float, float]]) -> RatioReport:
    rows = []
    for name, num, den in pairs:
        if den == 0:
            raise ContractError(f"ratio {name!r} has a zero denominator")
        rows.append(RatioRow(name, float(num), float(den)))
    return RatioReport(rows)


PUBLISHED_TOTAL_ROW = "published total trainable: CLEFT-LoRA / CLIP-ViT-BERT"
PUBLISHED_LM_ROW = "published trainable LM: CLEFT-LoRA / BERT"


def published_ratio_pairs() -> list[tuple[str, float, float]]:
    ours = PUBLISHED_SIZES["CLEFT-ViT-GPT2 (LoRA)"]
    return [
        (PUBLISHED_TOTAL_ROW, ours["total"], PUBLISHED_SIZES["CLIP-ViT-BERT"]["total"]),
        (PUBLISHED_LM_ROW, ours["language"], PUBLISHED_SIZES["GLoRIA-R50-BERT"]["language"]),
    ]
