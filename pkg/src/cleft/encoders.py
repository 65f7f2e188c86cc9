"""Causal text tower, ViT-style vision tower and joint-space projection.

Both towers are pre-LN transformers built on :mod:`cleft.autograd`. Adapter
hooks (LoRA on linears, IA3 rescaling vectors, per-layer prefix K/V tables)
are plain attributes that :mod:`cleft.peft` fills in; when unset the forward
pass takes exactly the base code path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from cleft.autograd import ParameterStore, Variable, ops
from cleft.errors import ConfigError, ContractError, DimensionError

MASK_VALUE = -1e9
INIT_STD = 0.02


@dataclass(frozen=True)
class TextEncoderConfig:
    vocab_size: int
    d_model: int = 32
    n_heads: int = 4
    n_layers: int = 2
    max_seq_len: int = 48
    eos_token_id: int = 2
    pad_token_id: int = 0
    unlock_positional: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"text d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.eos_token_id == self.pad_token_id:
            raise ConfigError("eos_token_id must differ from pad_token_id")
        if max(self.eos_token_id, self.pad_token_id) >= self.vocab_size:
            raise ConfigError("special token ids must be < vocab_size")
        if self.max_seq_len < 2 or self.n_layers < 1:
            raise ConfigError("text encoder needs max_seq_len >= 2 and n_layers >= 1")


@dataclass(frozen=True)
class VisionEncoderConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 1
    d_model: int = 32
    n_heads: int = 4
    n_layers: int = 2
    final_layer_norm: bool = False

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size={self.image_size} not divisible by patch_size={self.patch_size}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"vision d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass
class JointEmbedding:
    vector: Variable
    l2_normalized: bool


def _normal(rng, shape) -> np.ndarray:
    return rng.normal(0.0, INIT_STD, size=shape).astype(np.float32)


class LoRA:
    """Low-rank delta ``(alpha / r) * B(Ax)`` attached to a frozen linear."""

    def __init__(self, A: Variable, B: Variable, alpha: float):
        self.A = A
        self.B = B
        self.rank = A.shape[0]
        self.alpha = alpha

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self, x):
        return ops.scale((x @ self.A.T) @ self.B.T, self.scaling)


class Linear:
    """``y = x W^T + b`` with ``W`` stored as ``[d_out, d_in]``."""

    def __init__(self, store: ParameterStore, name: str, d_in: int, d_out: int, tag: str,
                 rng: np.random.Generator, bias: bool = True):
        self.name = name
        self.d_in = d_in
        self.d_out = d_out
        self.tag = tag
        self.weight = store.add(f"{name}.w", _normal(rng, (d_out, d_in)), tag)
        self.bias = store.add(f"{name}.b", np.zeros(d_out), tag) if bias else None
        self.lora: Optional[LoRA] = None

    def __call__(self, x):
        y = x @ self.weight.T
        if self.bias is not None:
            y = y + self.bias
        if self.lora is not None:
            y = y + self.lora.delta(x)
        return y


class LayerNorm:
    def __init__(self, store: ParameterStore, name: str, d: int, tag: str):
        self.gain = store.add(f"{name}.g", np.ones(d), tag)
        self.shift = store.add(f"{name}.b", np.zeros(d), tag)

    def __call__(self, x):
        return ops.layer_norm(x, self.gain, self.shift)


def build_attention_mask(n_query: int, n_key: int, n_prefix: int, causal: bool,
                         key_pad: np.ndarray | None, dtype=np.float32) -> np.ndarray | None:
    """Additive mask of shape ``[B or 1, 1, S, P + S]``; prefix columns are never masked."""
    if not causal and key_pad is None:
        return None
    mask = np.zeros((1, 1, n_query, n_prefix + n_key), dtype=dtype)
    if causal:
        future = np.triu(np.ones((n_query, n_key), dtype=bool), k=1)
        mask[0, 0, :, n_prefix:][future] = MASK_VALUE
    if key_pad is not None:
        pad = np.zeros((key_pad.shape[0], 1, 1, n_prefix + n_key), dtype=dtype)
        pad[:, 0, 0, n_prefix:][key_pad] = MASK_VALUE
        mask = mask + pad
    return mask


def scaled_dot_product_attention(q, k, v, mask: np.ndarray | None):
    """Attention over ``[..., S, dh]`` queries and ``[..., T, dh]`` keys/values."""
    dh = q.shape[-1]
    scores = ops.scale(q @ ops.transpose(k), 1.0 / math.sqrt(dh))
    if mask is not None:
        scores = scores + mask
    return ops.softmax(scores, axis=-1) @ v


class MultiHeadAttention:
    def __init__(self, store: ParameterStore, name: str, d: int, n_heads: int, tag: str,
                 rng: np.random.Generator):
        self.name = name
        self.d = d
        self.n_heads = n_heads
        self.q = Linear(store, f"{name}.q", d, d, tag, rng)
        self.k = Linear(store, f"{name}.k", d, d, tag, rng)
        self.v = Linear(store, f"{name}.v", d, d, tag, rng)
        self.o = Linear(store, f"{name}.o", d, d, tag, rng)
        # IA3 rescaling vectors keyed by target ("q", "k", "v")
        self.ia3: dict[str, Variable] = {}
        # prefix key/value rows, shape [P, 2, d]
        self.prefix_kv: Optional[Variable] = None

    def _heads(self, x, batch: int, length: int):
        x = ops.reshape(x, (batch, length, self.n_heads, self.d // self.n_heads))
        return ops.transpose(x, (0, 2, 1, 3))

    def __call__(self, x, causal: bool, key_pad: np.ndarray | None = None,
                 prefix_kv: Optional[Variable] = None):
        if x.ndim != 3 or x.shape[-1] != self.d:
            raise DimensionError(f"{self.name}: expected [B, S, {self.d}] input, got {x.shape}")
        if prefix_kv is None:
            prefix_kv = self.prefix_kv
        batch, length, _ = x.shape
        q, k, v = self.q(x), self.k(x), self.v(x)
        for target, scale_vec in self.ia3.items():
            if target == "q":
                q = q * scale_vec
            elif target == "k":
                k = k * scale_vec
            elif target == "v":
                v = v * scale_vec
        q = self._heads(q, batch, length)
        k = self._heads(k, batch, length)
        v = self._heads(v, batch, length)

        n_prefix = 0
        if prefix_kv is not None and prefix_kv.shape[0] > 0:
            if prefix_kv.ndim != 3 or prefix_kv.shape[1:] != (2, self.d):
                raise DimensionError(f"{self.name}: prefix must be [P, 2, {self.d}], got {prefix_kv.shape}")
            n_prefix = prefix_kv.shape[0]
            dh = self.d // self.n_heads
            pk = ops.transpose(ops.reshape(prefix_kv[:, 0, :], (n_prefix, self.n_heads, dh)), (1, 0, 2))
            pv = ops.transpose(ops.reshape(prefix_kv[:, 1, :], (n_prefix, self.n_heads, dh)), (1, 0, 2))
            shape = (batch, self.n_heads, n_prefix, dh)
            k = ops.concat([ops.broadcast_to(pk, shape), k], axis=2)
            v = ops.concat([ops.broadcast_to(pv, shape), v], axis=2)

        mask = build_attention_mask(length, length, n_prefix, causal, key_pad, q.dtype)
        out = scaled_dot_product_attention(q, k, v, mask)
        out = ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (batch, length, self.d))
        return self.o(out)


class FeedForward:
    def __init__(self, store: ParameterStore, name: str, d: int, hidden: int, tag: str,
                 rng: np.random.Generator):
        self.fc1 = Linear(store, f"{name}.fc1", d, hidden, tag, rng)
        self.fc2 = Linear(store, f"{name}.fc2", hidden, d, tag, rng)
        self.hidden = hidden
        self.ia3: Optional[Variable] = None

    def __call__(self, x):
        h = ops.gelu(self.fc1(x))
        if self.ia3 is not None:
            h = h * self.ia3
        return self.fc2(h)


class Block:
    """Pre-LN transformer block."""

    def __init__(self, store: ParameterStore, name: str, d: int, n_heads: int, tag: str,
                 rng: np.random.Generator):
        self.ln1 = LayerNorm(store, f"{name}.ln1", d, tag)
        self.attn = MultiHeadAttention(store, f"{name}.attn", d, n_heads, tag, rng)
        self.ln2 = LayerNorm(store, f"{name}.ln2", d, tag)
        self.ffn = FeedForward(store, f"{name}.ffn", d, 4 * d, tag, rng)

    def __call__(self, x, causal: bool, key_pad: np.ndarray | None = None):
        x = x + self.attn(self.ln1(x), causal=causal, key_pad=key_pad)
        return x + self.ffn(self.ln2(x))


def first_eos_positions(ids: np.ndarray, eos_id: int) -> np.ndarray:
    ids = np.asarray(ids)
    hit = ids == eos_id
    if not hit.any(axis=-1).all():
        raise ContractError("token sequence without EOS")
    return hit.argmax(axis=-1)


class TextEncoder:
    """Causal transformer pooled at the first EOS token."""

    def __init__(self, cfg: TextEncoderConfig, store: ParameterStore, rng: np.random.Generator,
                 prefix: str = "text"):
        self.cfg = cfg
        self.store = store
        d = cfg.d_model
        self.tok_emb = store.add(f"{prefix}.tok_emb", _normal(rng, (cfg.vocab_size, d)), "text_embedding")
        pos_tag = "text_embedding" if cfg.unlock_positional else "text_base"
        self.pos_emb = store.add(f"{prefix}.pos_emb", _normal(rng, (cfg.max_seq_len, d)), pos_tag)
        self.blocks = [Block(store, f"{prefix}.layers.{i:02d}", d, cfg.n_heads, "text_base", rng)
                       for i in range(cfg.n_layers)]
        self.ln_f = LayerNorm(store, f"{prefix}.ln_f", d, "text_base")

    def embed_ids(self, ids: np.ndarray):
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise DimensionError(f"token id outside vocabulary of size {self.cfg.vocab_size}")
        return ops.embedding(self.tok_emb, ids)

    def hidden_states(self, x_emb, key_pad: np.ndarray | None = None):
        """Run the blocks on input embeddings ``[B, S, d]`` (token lookup bypassed)."""
        length = x_emb.shape[1]
        if length > self.cfg.max_seq_len:
            raise ConfigError(f"sequence length {length} exceeds max_seq_len={self.cfg.max_seq_len}")
        if key_pad is not None and not key_pad.any():
            key_pad = None
        x = x_emb + self.pos_emb[:length]
        for block in self.blocks:
            x = block(x, causal=True, key_pad=key_pad)
        return self.ln_f(x)

    def pool(self, hidden, eos_positions: np.ndarray):
        batch = hidden.shape[0]
        return hidden[np.arange(batch), np.asarray(eos_positions)]

    def encode(self, ids: np.ndarray):
        """Pre-projection embedding ``[B, d]`` of token id sequences ``[B, S]``."""
        ids = np.atleast_2d(np.asarray(ids))
        eos = first_eos_positions(ids, self.cfg.eos_token_id)
        hidden = self.hidden_states(self.embed_ids(ids), ids == self.cfg.pad_token_id)
        return self.pool(hidden, eos)


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """``[B, H, W, C]`` images to ``[B, n_patches, p*p*C]`` row-major patches."""
    b, h, w, c = images.shape
    p = patch_size
    x = images.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


class VisionEncoder:
    """ViT without class token; mean-pooled over patch tokens."""

    def __init__(self, cfg: VisionEncoderConfig, store: ParameterStore, rng: np.random.Generator,
                 prefix: str = "vision"):
        self.cfg = cfg
        d = cfg.d_model
        self.patch_embed = Linear(store, f"{prefix}.patch_embed", cfg.patch_dim, d, "vision", rng)
        self.pos_emb = store.add(f"{prefix}.pos_emb", _normal(rng, (cfg.n_patches, d)), "vision")
        self.blocks = [Block(store, f"{prefix}.layers.{i:02d}", d, cfg.n_heads, "vision", rng)
                       for i in range(cfg.n_layers)]
        self.ln_f = LayerNorm(store, f"{prefix}.ln_f", d, "vision") if cfg.final_layer_norm else None

    def tokens(self, images: np.ndarray):
        images = np.asarray(images, dtype=self.pos_emb.dtype)
        if images.ndim == 3:
            images = images[None]
        cfg = self.cfg
        if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
            raise DimensionError(
                f"expected images [B, {cfg.image_size}, {cfg.image_size}, {cfg.channels}], got {images.shape}")
        return self.tokens_from_patches(Variable(patchify(images, cfg.patch_size)))

    def tokens_from_patches(self, patches):
        """Run the tower on flattened patches ``[B, n_patches, patch_dim]``."""
        x = self.patch_embed(patches) + self.pos_emb
        for block in self.blocks:
            x = block(x, causal=False)
        if self.ln_f is not None:
            x = self.ln_f(x)
        return x

    def encode(self, images: np.ndarray):
        """Pre-projection embedding ``[B, d]``."""
        return ops.mean(self.tokens(images), axis=1)


def project(hidden, head, normalize: bool = True, eps: float = 1e-12) -> JointEmbedding:
    """Map encoder output into the joint space, then L2-normalise rows.

    ``head`` is a ``[d_joint, d_model]`` weight (Variable or array). Rows with
    zero norm stay zero and mark the result as not normalised.
    """
    hidden = hidden if isinstance(hidden, Variable) else Variable(hidden)
    head = head if isinstance(head, Variable) else Variable(head)
    if head.shape[-1] != hidden.shape[-1]:
        raise DimensionError(f"projection head {head.shape} does not accept hidden {hidden.shape}")
    z = hidden @ head.T if hidden.ndim >= 2 else ops.reshape(ops.reshape(hidden, (1, -1)) @ head.T, (-1,))
    if not normalize:
        return JointEmbedding(z, False)
    norms = np.sqrt((z.value.astype(np.float64) ** 2).sum(axis=-1))
    return JointEmbedding(ops.l2_normalize(z, axis=-1, eps=eps), bool(np.all(norms > eps)))
