"""Flat-JSON run configuration with the ``toy`` and ``paper-scale`` presets."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from cleft.encoders import TextEncoderConfig, VisionEncoderConfig
from cleft.errors import ConfigError
from cleft.evaluation import ProbeConfig
from cleft.model import ModelConfig
from cleft.peft import POLICIES, IA3Config, LoRAConfig, PrefixConfig
from cleft.training import ScheduleConfig

SEED_ENV = "CLEFT_SEED"
ADAPTERS = ("lora", "ia3", "prefix", "none")


@dataclass(frozen=True)
class RunConfig:
    preset: str = "toy"
    seed: int = 0

    # synthetic data
    n_classes: int = 4
    samples_per_class: int = 150
    image_size: int = 16
    patch_size: int = 4
    channels: int = 1
    noise_std: float = 0.1
    class_only_fraction: float = 0.25
    max_caption_len: int = 16
    normalize: str = ""

    # encoders
    text_d_model: int = 32
    text_heads: int = 4
    text_layers: int = 2
    max_seq_len: int = 48
    unlock_positional: bool = False
    vision_d_model: int = 32
    vision_heads: int = 4
    vision_layers: int = 2
    vision_final_ln: bool = False
    d_joint: int = 32

    # adapter
    adapter: str = "lora"
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_targets: str = "q,v"
    ia3_targets: str = "k,v,ffn"
    prefix_length: int = 4

    # objective
    tau_init: float = 0.07
    denominator: str = "inclusive"

    # stage 1
    freeze_policy: str = "stage1"
    batch_size: int = 16
    lr: float = 1e-3
    steps: int = 2000
    warmup_steps: int = 100
    weight_decay: float = 0.2
    eval_interval: int = 200

    # stage 2
    prompt_batch_size: int = 36
    prompt_lr: float = 1e-2
    prompt_steps: int = 500
    prompt_warmup_steps: int = 50
    prompt_length: int = 30
    prompt_sweep: str = "1,2,4,8,16,32"
    prompt_train_temperature: bool = False

    # probe and fine-tuning
    probe_batch_size: int = 36
    probe_lr: float = 1e-2
    probe_steps: int = 500
    probe_weight_decay: float = 1e-3
    ft_steps: int = 200
    ft_lr: float = 5e-4

    # paths, resolved relative to the config file
    data_dir: str = "data"
    run_dir: str = "run"

    def __post_init__(self):
        if self.preset not in PRESETS_NAMES:
            raise ConfigError(f"preset: unknown preset {self.preset!r}, expected one of {PRESETS_NAMES}")
        if self.adapter not in ADAPTERS:
            raise ConfigError(f"adapter: expected one of {ADAPTERS}, got {self.adapter!r}")
        if self.denominator not in ("inclusive", "exclusive"):
            raise ConfigError(f"denominator: expected 'inclusive' or 'exclusive', got {self.denominator!r}")
        if self.freeze_policy not in POLICIES:
            raise ConfigError(f"freeze_policy: expected one of {sorted(POLICIES)}, got {self.freeze_policy!r}")
        if self.batch_size < 2 or self.prompt_batch_size < 1 or self.probe_batch_size < 1:
            raise ConfigError("batch_size must be >= 2 (the contrastive loss needs N >= 2)")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval must be >= 1")
        if self.prompt_length < 0:
            raise ConfigError("prompt_length must be >= 0")
        self.sweep_lengths()
        self.normalize_stats()

    # --- derived objects ---------------------------------------------------

    def sweep_lengths(self) -> list[int]:
        try:
            values = [int(v) for v in self.prompt_sweep.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"prompt_sweep: expected comma-separated integers, got {self.prompt_sweep!r}") from None
        if not values or min(values) < 0:
            raise ConfigError("prompt_sweep: need at least one non-negative length")
        return values

    def normalize_stats(self) -> tuple[float, float] | None:
        if not self.normalize:
            return None
        try:
            mean, std = (float(v) for v in self.normalize.split(","))
        except ValueError:
            raise ConfigError(f"normalize: expected 'mean,std', got {self.normalize!r}") from None
        if not std > 0:
            raise ConfigError("normalize: std must be positive")
        return mean, std

    def adapter_config(self):
        if self.adapter == "lora":
            return LoRAConfig(self.lora_rank, self.lora_alpha, _targets(self.lora_targets))
        if self.adapter == "ia3":
            return IA3Config(_targets(self.ia3_targets))
        if self.adapter == "prefix":
            return PrefixConfig(self.prefix_length)
        return None

    def model_config(self, vocab_size: int) -> ModelConfig:
        text = TextEncoderConfig(vocab_size, self.text_d_model, self.text_heads, self.text_layers,
                                 self.max_seq_len, unlock_positional=self.unlock_positional)
        vision = VisionEncoderConfig(self.image_size, self.patch_size, self.channels, self.vision_d_model,
                                     self.vision_heads, self.vision_layers, self.vision_final_ln)
        return ModelConfig(text, vision, self.d_joint, self.adapter_config(), self.tau_init)

    def stage1_schedule(self) -> ScheduleConfig:
        return ScheduleConfig(self.lr, self.warmup_steps, self.steps)

    def stage2_schedule(self) -> ScheduleConfig:
        return ScheduleConfig(self.prompt_lr, self.prompt_warmup_steps, self.prompt_steps)

    def probe_config(self) -> ProbeConfig:
        return ProbeConfig(self.probe_steps, self.probe_batch_size, self.probe_lr,
                           self.probe_weight_decay, seed=self.seed)

    def finetune_config(self) -> ProbeConfig:
        return ProbeConfig(self.ft_steps, self.probe_batch_size, self.ft_lr,
                           self.probe_weight_decay, seed=self.seed)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # --- serialisation -----------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _targets(spec: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in spec.split(",") if t.strip())


PRESETS_NAMES = ("toy", "paper-scale")

_PAPER_SCALE = dict(
    preset="paper-scale",
    batch_size=72, lr=4e-5, steps=40_000, warmup_steps=4_000, weight_decay=0.2,
    prompt_batch_size=36, prompt_lr=1e-3, prompt_steps=4_000, prompt_warmup_steps=1_000,
    prompt_length=30,
    probe_batch_size=36, probe_lr=5e-4, probe_steps=8_000, probe_weight_decay=1e-3,
    ft_lr=5e-4, ft_steps=8_000,
)


def preset(name: str) -> RunConfig:
    if name == "toy":
        return RunConfig()
    if name == "paper-scale":
        return RunConfig(**_PAPER_SCALE)
    raise ConfigError(f"preset: unknown preset {name!r}, expected one of {PRESETS_NAMES}")


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name: str, value: Any) -> Any:
    kind = _FIELD_TYPES[name]
    ok = {
        "int": isinstance(value, int) and not isinstance(value, bool),
        "float": isinstance(value, (int, float)) and not isinstance(value, bool),
        "bool": isinstance(value, bool),
        "str": isinstance(value, str),
    }[kind]
    if not ok:
        raise ConfigError(f"field {name!r}: expected {kind}, got {type(value).__name__} {value!r}")
    return float(value) if kind == "float" else value


def config_from_dict(raw: dict[str, Any], apply_env: bool = True) -> RunConfig:
    """Start from the named preset and apply every key of ``raw`` on top."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
    base = preset(raw.get("preset", "toy")).to_dict()
    for key, value in raw.items():
        base[key] = _coerce(key, value)
    if apply_env and os.environ.get(SEED_ENV):
        try:
            base["seed"] = int(os.environ[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {os.environ[SEED_ENV]!r}") from None
    return RunConfig(**base)


def load_config(path, apply_env: bool = True) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    try:
        return config_from_dict(raw, apply_env)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def resolve_path(config_path, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else (Path(config_path).resolve().parent / p)
