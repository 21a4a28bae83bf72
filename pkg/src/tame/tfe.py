"""Temporal feature enhancement: spectral context injected into temporal tokens.

Two chained multi-head cross-attentions read from the spectral sequence. The
first is queried by projected temporal features; its raw output is the query
of the second, whose result is projected back and added to the temporal
features as a residual.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from tame.errors import ConfigError, DimensionError
from tame.tensor import Tensor, softmax, swap_last, transpose


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, rows, width = x.shape
    x = x.reshape(*lead, rows, heads, width // heads)
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return transpose(x, axes)  # (..., heads, rows, width/heads)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, heads, rows, width = x.shape
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return transpose(x, axes).reshape(*lead, rows, heads * width)


def attention(Q: Tensor, K: Tensor, V: Tensor, heads: int = 1, full_width_scale: bool = False) -> Tensor:
    """Multi-head scaled dot-product attention.

    Scores are scaled by ``1/sqrt(d_k/heads)``, or by ``1/sqrt(d_k)`` when
    ``full_width_scale`` is set.
    """
    d_k = Q.shape[-1]
    if heads < 1 or d_k % heads:
        raise ConfigError(f"width {d_k} is not divisible into {heads} heads")
    if K.shape[-1] != d_k or V.shape[-1] != d_k or K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"attention shapes disagree: Q {Q.shape} K {K.shape} V {V.shape}")
    scale = 1.0 / math.sqrt(d_k if full_width_scale else d_k // heads)
    q, k, v = (_split_heads(t, heads) for t in (Q, K, V))
    weights = softmax((q @ swap_last(k)) * scale)
    return _merge_heads(weights @ v)


@dataclass
class TfeParams:
    wq1: Tensor  # (d_m, d_k)
    wk1: Tensor
    wv1: Tensor
    wk2: Tensor
    wv2: Tensor
    wo: Tensor  # (d_k, d_m)
    heads: int
    full_width_scale: bool = False

    FIELDS = ("wq1", "wk1", "wv1", "wk2", "wv2", "wo")

    @classmethod
    def from_store(cls, store, prefix: str, heads: int, full_width_scale: bool = False) -> "TfeParams":
        return cls(*(store[f"{prefix}.{f}"] for f in cls.FIELDS), heads=heads, full_width_scale=full_width_scale)

    def __post_init__(self):
        if self.wq1.shape[-1] % self.heads:
            raise ConfigError(f"d_k={self.wq1.shape[-1]} not divisible by n={self.heads}")


def init_tfe(rng: np.random.Generator, prefix: str, d_m: int, d_k: int) -> dict[str, np.ndarray]:
    out = {f"{prefix}.{f}": rng.normal(0.0, d_m**-0.5, size=(d_m, d_k)) for f in TfeParams.FIELDS[:-1]}
    out[f"{prefix}.wo"] = rng.normal(0.0, d_k**-0.5, size=(d_k, d_m))
    return out


def tfe(T: Tensor, S: Tensor, p: TfeParams) -> Tensor:
    """Enhance ``T (..., J_t+1, d_m)`` with context from ``S (..., J_s+1, d_m)``."""
    if T.shape[-1] != S.shape[-1] or T.shape[-1] != p.wq1.shape[0]:
        raise DimensionError(f"tfe feature widths disagree: T {T.shape}, S {S.shape}, W {p.wq1.shape}")
    q2 = attention(T @ p.wq1, S @ p.wk1, S @ p.wv1, p.heads, p.full_width_scale)
    return T + attention(q2, S @ p.wk2, S @ p.wv2, p.heads, p.full_width_scale) @ p.wo
