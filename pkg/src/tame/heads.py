"""Trajectory and classification heads on the temporal summary token, and losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tame.errors import ContractError, DimensionError
from tame.tensor import Tensor, abs_, log_softmax, silu


@dataclass
class Prediction:
    position: Tensor  # (..., 3), volume-normalized
    logits: Tensor  # (..., C)


@dataclass
class HeadParams:
    pos_w1: Tensor
    pos_b1: Tensor
    pos_w2: Tensor
    pos_b2: Tensor
    cls_w1: Tensor
    cls_b1: Tensor
    cls_w2: Tensor
    cls_b2: Tensor

    FIELDS = ("pos_w1", "pos_b1", "pos_w2", "pos_b2", "cls_w1", "cls_b1", "cls_w2", "cls_b2")

    @classmethod
    def from_store(cls, store, prefix: str = "heads") -> "HeadParams":
        return cls(*(store[f"{prefix}.{f}"] for f in cls.FIELDS))


def init_heads(rng: np.random.Generator, prefix: str, D: int, n_classes: int, hidden: int | None = None):
    hidden = hidden or D
    return {
        f"{prefix}.pos_w1": rng.normal(0.0, D**-0.5, size=(D, hidden)),
        f"{prefix}.pos_b1": np.zeros(hidden),
        f"{prefix}.pos_w2": rng.normal(0.0, hidden**-0.5, size=(hidden, 3)),
        f"{prefix}.pos_b2": np.zeros(3),
        f"{prefix}.cls_w1": rng.normal(0.0, D**-0.5, size=(D, hidden)),
        f"{prefix}.cls_b1": np.zeros(hidden),
        f"{prefix}.cls_w2": rng.normal(0.0, hidden**-0.5, size=(hidden, n_classes)),
        f"{prefix}.cls_b2": np.zeros(n_classes),
    }


def mlp(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return silu(x @ w1 + b1) @ w2 + b2


def heads_forward(enhanced: Tensor, p: HeadParams) -> Prediction:
    """Read the summary token (last row) of ``(..., J+1, D)`` features."""
    if enhanced.ndim < 2 or enhanced.shape[-1] != p.pos_w1.shape[0]:
        raise DimensionError(f"features {enhanced.shape} do not match head input width {p.pos_w1.shape[0]}")
    token = enhanced[..., -1:, :]
    pos = mlp(token, p.pos_w1, p.pos_b1, p.pos_w2, p.pos_b2)
    logits = mlp(token, p.cls_w1, p.cls_b1, p.cls_w2, p.cls_b2)
    lead = enhanced.shape[:-2]
    return Prediction(pos.reshape(*lead, 3), logits.reshape(*lead, logits.shape[-1]))


def l1_loss(pred: Tensor, truth) -> Tensor:
    """Per-sample L1 norm of the 3D error, averaged over the batch."""
    truth = truth if isinstance(truth, Tensor) else Tensor(truth)
    if pred.shape != truth.shape:
        raise ContractError(f"l1_loss shapes differ: {pred.shape} vs {truth.shape}")
    n = pred.shape[0] if pred.ndim else 0
    if n == 0:
        raise ContractError("l1_loss needs at least one sample")
    return abs_(pred - truth).sum() * (1.0 / n)


def ce_loss(logits: Tensor, labels) -> Tensor:
    """Mean categorical cross-entropy of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ContractError(f"expected {n} labels, got shape {labels.shape}")
    if n == 0:
        raise ContractError("ce_loss needs at least one sample")
    if labels.min() < 0 or labels.max() >= c:
        raise ContractError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    picked = log_softmax(logits)[np.arange(n), labels]
    return picked.sum() * (-1.0 / n)


def total_loss(l_cls, l_pos, gamma: float):
    if gamma < 0:
        raise ContractError(f"gamma must be non-negative, got {gamma}")
    return l_cls + l_pos * gamma
