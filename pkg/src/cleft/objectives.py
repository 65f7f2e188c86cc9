"""Symmetric image/text contrastive loss with a learnable temperature."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from cleft.autograd import ParameterStore, Variable, ops
from cleft.errors import ContractError, DimensionError

TAU_MIN = 1e-3
TAU_MAX = 100.0
TEMPERATURE_PARAM = "temperature.log_tau"


class Temperature:
    """Softmax temperature stored as ``log_tau`` so that ``tau > 0`` by construction."""

    def __init__(self, tau: float = 0.07, store: ParameterStore | None = None):
        if not tau > 0:
            raise ContractError(f"temperature must be positive, got {tau}")
        value = np.float32(math.log(tau)) if store is None else store.dtype.type(math.log(tau))
        if store is None:
            self.log_tau = Variable(value, requires_grad=True, name=TEMPERATURE_PARAM)
        else:
            self.log_tau = store.add(TEMPERATURE_PARAM, value, "temperature")

    @classmethod
    def attach(cls, store: ParameterStore) -> "Temperature":
        obj = cls.__new__(cls)
        obj.log_tau = store[TEMPERATURE_PARAM]
        return obj

    @property
    def tau(self) -> float:
        return float(np.exp(self.log_tau.value))

    def inverse(self) -> Variable:
        """``1 / tau`` as a differentiable scalar."""
        return ops.exp(ops.scale(self.log_tau, -1.0))

    def clamp(self) -> None:
        dt = self.log_tau.value.dtype
        self.log_tau.value = np.clip(self.log_tau.value, math.log(TAU_MIN), math.log(TAU_MAX)).astype(dt)


@dataclass
class LossBreakdown:
    l_i2t: Variable
    l_t2i: Variable
    total: Variable

    def as_floats(self) -> dict[str, float]:
        return {"l_i2t": float(self.l_i2t.value), "l_t2i": float(self.l_t2i.value),
                "total": float(self.total.value)}


def _as_var(x) -> Variable:
    return x if isinstance(x, Variable) else Variable(x)


def similarity_matrix(I, T) -> Variable:
    """``S[i, j] = I_i . T_j``."""
    I, T = _as_var(I), _as_var(T)
    if I.ndim != 2 or T.ndim != 2 or I.shape != T.shape:
        raise DimensionError(f"similarity_matrix needs equal [N, d] inputs, got {I.shape} and {T.shape}")
    return I @ T.T


def _direction_loss(logits: Variable, exclusive: bool) -> Variable:
    n = logits.shape[0]
    if not exclusive:
        return ops.cross_entropy(logits, np.arange(n))
    diag_mask = np.where(np.eye(n, dtype=bool), np.float32(-np.inf), np.float32(0.0))
    denom = ops.logsumexp(logits + diag_mask, axis=-1)
    return ops.scale(ops.mean(ops.diagonal(logits) - denom), -1.0)


def info_nce_symmetric(I, T, temp: Temperature | float, denominator: str = "inclusive") -> LossBreakdown:
    """Average of the image-to-text and text-to-image InfoNCE terms.

    ``denominator="inclusive"`` sums over every column (the positive too);
    ``"exclusive"`` drops the positive from the normaliser and is unbounded below.
    """
    if denominator not in ("inclusive", "exclusive"):
        raise ContractError(f"denominator must be 'inclusive' or 'exclusive', got {denominator!r}")
    S = similarity_matrix(I, T)
    n = S.shape[0]
    if n < 2:
        raise ContractError("contrastive loss needs N >= 2 pairs")
    inv_tau = temp.inverse() if isinstance(temp, Temperature) else Variable(S.dtype.type(1.0 / temp))
    logits = S * inv_tau
    exclusive = denominator == "exclusive"
    l_i2t = _direction_loss(logits, exclusive)
    l_t2i = _direction_loss(ops.transpose(logits), exclusive)
    return LossBreakdown(l_i2t, l_t2i, ops.scale(l_i2t + l_t2i, 0.5))


def zero_shot_logits(img_emb, class_embs, temp: Temperature | float) -> Variable:
    """``logits[c] = img . class_c / tau``; works on one embedding or a batch."""
    img_emb, class_embs = _as_var(img_emb), _as_var(class_embs)
    if class_embs.ndim != 2 or class_embs.shape[0] < 2:
        raise ContractError("zero-shot classification needs C >= 2 class embeddings")
    if img_emb.shape[-1] != class_embs.shape[-1]:
        raise DimensionError(f"embedding dims differ: {img_emb.shape} vs {class_embs.shape}")
    inv_tau = temp.inverse() if isinstance(temp, Temperature) else Variable(img_emb.dtype.type(1.0 / temp))
    if img_emb.ndim == 1:
        sims = ops.reshape(ops.reshape(img_emb, (1, -1)) @ class_embs.T, (-1,))
    else:
        sims = img_emb @ class_embs.T
    return sims * inv_tau
