"""Adapter injection into the frozen text tower, freeze policies, parameter counts."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Union

import numpy as np

from cleft.autograd import COMPONENT_TAGS, ParameterStore
from cleft.encoders import INIT_STD, FeedForward, Linear, LoRA, MultiHeadAttention, TextEncoder
from cleft.errors import ConfigError

log = logging.getLogger(__name__)

LORA_TARGETS = frozenset({"q", "k", "v", "o"})
IA3_TARGETS = frozenset({"k", "v", "ffn"})


@dataclass(frozen=True)
class LoRAConfig:
    rank: int = 8
    alpha: float = 16.0
    targets: tuple[str, ...] = ("q", "v")

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError(f"LoRA rank must be >= 1, got {self.rank}")
        if not self.alpha > 0:
            raise ConfigError(f"LoRA alpha must be > 0, got {self.alpha}")
        if not self.targets:
            raise ConfigError("LoRA targets must be non-empty")
        bad = set(self.targets) - LORA_TARGETS
        if bad:
            raise ConfigError(f"unknown LoRA targets {sorted(bad)}; choose from {sorted(LORA_TARGETS)}")


@dataclass(frozen=True)
class IA3Config:
    targets: tuple[str, ...] = ("k", "v", "ffn")
    # the original IA3 leaves queries alone; opt in to scale them too
    allow_query: bool = False

    def __post_init__(self):
        if not self.targets:
            raise ConfigError("IA3 targets must be non-empty")
        allowed = IA3_TARGETS | ({"q"} if self.allow_query else set())
        bad = set(self.targets) - allowed
        if bad:
            raise ConfigError(f"unknown IA3 targets {sorted(bad)}; choose from {sorted(allowed)}")


@dataclass(frozen=True)
class PrefixConfig:
    length: int = 4

    def __post_init__(self):
        if self.length < 1:
            raise ConfigError("prefix length must be >= 1 (use no adapter for the identity baseline)")


AdapterConfig = Optional[Union[LoRAConfig, IA3Config, PrefixConfig]]


def adapter_variant(cfg: AdapterConfig) -> str:
    if cfg is None:
        return "none"
    return {LoRAConfig: "lora", IA3Config: "ia3", PrefixConfig: "prefix"}[type(cfg)]


def inject_lora(linear: Linear, cfg: LoRAConfig, store: ParameterStore, rng: np.random.Generator) -> Linear:
    """Attach ``(alpha/r) B A`` to ``linear``; A ~ N(0, 0.02), B = 0 so the output is unchanged."""
    if cfg.rank > min(linear.d_in, linear.d_out):
        raise ConfigError(f"LoRA rank {cfg.rank} exceeds min(d_in, d_out) of {linear.name}")
    A = store.add(f"{linear.name}.lora_A",
                  rng.normal(0.0, INIT_STD, size=(cfg.rank, linear.d_in)).astype(np.float32), "adapter")
    B = store.add(f"{linear.name}.lora_B", np.zeros((linear.d_out, cfg.rank)), "adapter")
    linear.lora = LoRA(A, B, cfg.alpha)
    return linear


def inject_ia3(layer: Union[MultiHeadAttention, FeedForward], target: str, store: ParameterStore,
               name: str) -> None:
    """Attach an all-ones rescaling vector to one activation of ``layer``."""
    if isinstance(layer, FeedForward):
        if target != "ffn":
            raise ConfigError(f"IA3 target {target!r} does not apply to a feed-forward layer")
        layer.ia3 = store.add(f"{name}.ia3_ffn", np.ones(layer.hidden), "adapter")
    elif isinstance(layer, MultiHeadAttention):
        if target not in ("q", "k", "v"):
            raise ConfigError(f"unknown IA3 attention target {target!r}")
        layer.ia3[target] = store.add(f"{name}.ia3_{target}", np.ones(layer.d), "adapter")
    else:
        raise ConfigError(f"cannot inject IA3 into {type(layer).__name__}")


def inject_prefix(encoder: TextEncoder, cfg: PrefixConfig, store: ParameterStore,
                  rng: np.random.Generator) -> TextEncoder:
    """Give every attention layer a trainable ``[P, 2, d]`` key/value prefix table."""
    d = encoder.cfg.d_model
    for block in encoder.blocks:
        attn = block.attn
        attn.prefix_kv = store.add(f"{attn.name}.prefix_kv",
                                   rng.normal(0.0, INIT_STD, size=(cfg.length, 2, d)).astype(np.float32),
                                   "adapter")
    return encoder


def inject_adapters(encoder: TextEncoder, cfg: AdapterConfig, store: ParameterStore,
                    rng: np.random.Generator) -> TextEncoder:
    if cfg is None:
        return encoder
    if isinstance(cfg, LoRAConfig):
        if cfg.rank > encoder.cfg.d_model:
            raise ConfigError(f"LoRA rank {cfg.rank} exceeds d_model={encoder.cfg.d_model}")
        for block in encoder.blocks:
            for target in sorted(cfg.targets):
                inject_lora(getattr(block.attn, target), cfg, store, rng)
    elif isinstance(cfg, IA3Config):
        for block in encoder.blocks:
            for target in sorted(cfg.targets):
                if target == "ffn":
                    inject_ia3(block.ffn, "ffn", store, block.attn.name.rsplit(".", 1)[0] + ".ffn")
                else:
                    inject_ia3(block.attn, target, store, block.attn.name)
    elif isinstance(cfg, PrefixConfig):
        inject_prefix(encoder, cfg, store, rng)
    else:
        raise ConfigError(f"unsupported adapter config {cfg!r}")
    return encoder


@dataclass(frozen=True)
class FreezePolicy:
    """Which component tags are trainable during one training run."""

    name: str
    rules: Mapping[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        bad = set(self.rules) - set(COMPONENT_TAGS)
        if bad:
            raise ConfigError(f"policy {self.name!r} names unknown tags {sorted(bad)}")


def _policy(name: str, trainable: Iterable[str]) -> FreezePolicy:
    trainable = set(trainable)
    return FreezePolicy(name, {tag: tag in trainable for tag in COMPONENT_TAGS})


STAGE1 = _policy("stage1", {"text_embedding", "adapter", "vision", "projection", "temperature"})
FREEZE_LM = _policy("freeze_lm", {"vision", "projection", "temperature"})
FULL_FT_LM = _policy("full_ft_lm", {"text_base", "text_embedding", "adapter", "vision", "projection",
                                    "temperature"})
STAGE2 = _policy("stage2", {"prompt_context"})
STAGE2_WITH_TEMPERATURE = _policy("stage2_temperature", {"prompt_context", "temperature"})
LINEAR_PROBE = _policy("linear_probe", {"probe"})
FULL_FINETUNE = _policy("full_finetune", {"vision", "probe"})

POLICIES = {p.name: p for p in (STAGE1, FREEZE_LM, FULL_FT_LM, STAGE2, STAGE2_WITH_TEMPERATURE,
                                LINEAR_PROBE, FULL_FINETUNE)}


def get_policy(name: str) -> FreezePolicy:
    try:
        return POLICIES[name]
    except KeyError:
        raise ConfigError(f"unknown freeze policy {name!r}; choose from {sorted(POLICIES)}") from None


def apply_freeze_policy(store: ParameterStore, policy: FreezePolicy) -> None:
    for name, entry in store.items():
        if entry.tag not in policy.rules:
            raise ConfigError(f"policy {policy.name!r} has no rule for tag {entry.tag!r} ({name})")
        entry.trainable = policy.rules[entry.tag]
    log.debug("applied freeze policy %s", policy.name)


@dataclass(frozen=True)
class ParamCounts:
    by_tag: Mapping[str, int]

    @property
    def total(self) -> int:
        return sum(self.by_tag.values())

    def get(self, tag: str) -> int:
        return self.by_tag.get(tag, 0)

    @property
    def adapter(self) -> int:
        return self.get("adapter")

    @property
    def trainable_lm(self) -> int:
        """Adapter parameters only; the unlocked token table is reported separately."""
        return self.get("adapter")


def count_params(store: ParameterStore, tags: Iterable[str] | None = None,
                 trainable_only: bool = False) -> ParamCounts:
    tags = set(tags) if tags is not None else None
    counts = {tag: 0 for tag in sorted(store.tags())}
    for _, entry in store.items():
        if tags is not None and entry.tag not in tags:
            continue
        if trainable_only and not entry.trainable:
            continue
        counts[entry.tag] += int(entry.var.value.size)
    if tags is not None or trainable_only:
        counts = {t: n for t, n in counts.items() if (tags is None or t in tags)}
    return ParamCounts(counts)
