"""Two-tower model: text encoder with adapters, vision encoder, projections, temperature."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cleft.autograd import ParameterStore, Variable
from cleft.encoders import (
    INIT_STD,
    JointEmbedding,
    TextEncoder,
    TextEncoderConfig,
    VisionEncoder,
    VisionEncoderConfig,
    project,
)
from cleft.objectives import Temperature
from cleft.peft import AdapterConfig, inject_adapters


@dataclass(frozen=True)
class ModelConfig:
    text: TextEncoderConfig
    vision: VisionEncoderConfig
    d_joint: int = 32
    adapter: AdapterConfig = None
    tau_init: float = 0.07


class TwoTowerModel:
    """All parameters live in one :class:`ParameterStore`.

    Parameters are created in a fixed order from a single seeded generator:
    text tower, vision tower, projection heads, temperature, then adapters. The
    base weights are therefore identical for every adapter variant.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.store = ParameterStore(dtype)
        self.text = TextEncoder(cfg.text, self.store, rng)
        self.vision = VisionEncoder(cfg.vision, self.store, rng)
        self.text_head = self.store.add(
            "proj.text.w", rng.normal(0.0, INIT_STD, (cfg.d_joint, cfg.text.d_model)).astype(np.float32),
            "projection")
        self.image_head = self.store.add(
            "proj.image.w", rng.normal(0.0, INIT_STD, (cfg.d_joint, cfg.vision.d_model)).astype(np.float32),
            "projection")
        self.temperature = Temperature(cfg.tau_init, self.store)
        inject_adapters(self.text, cfg.adapter, self.store, rng)

    def embed_text(self, ids: np.ndarray) -> Variable:
        return project(self.text.encode(ids), self.text_head).vector

    def embed_text_from_hidden(self, hidden) -> Variable:
        return project(hidden, self.text_head).vector

    def embed_images(self, images: np.ndarray) -> Variable:
        return project(self.vision.encode(images), self.image_head).vector

    def joint_text(self, ids: np.ndarray) -> JointEmbedding:
        return project(self.text.encode(ids), self.text_head)

    def joint_images(self, images: np.ndarray) -> JointEmbedding:
        return project(self.vision.encode(images), self.image_head)
