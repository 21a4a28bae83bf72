"""Temporal and spectral selective-SSM stacks over spectrogram patches.

The spectrogram is cut into non-overlapping patches along one axis, each
patch is linearly projected, a learnable summary token is appended last, and
position embeddings are added. A stack of pre-norm Mamba-style blocks then
scans the sequence causally, so the final (token) position sees every patch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from tame.errors import ConfigError, DimensionError, NumericError
from tame.tensor import (
    Tensor,
    broadcast_to,
    concat,
    exp,
    make_op,
    neg,
    rms_norm,
    silu,
    softplus,
)

TEMPORAL = "temporal"
SPECTRAL = "spectral"


@dataclass(frozen=True)
class PatchConfig:
    """Patch geometry and block hyper-parameters shared by both stacks.

    ``spectral_high_first`` orders spectral patches from the highest mel bin
    down to the lowest.
    """

    W: int = 4
    H: int = 1
    D: int = 192
    L: int = 12
    n_state: int = 16
    expand: int = 2
    conv_width: int = 4
    dt_rank: int | None = None
    spectral_high_first: bool = True

    @property
    def E(self) -> int:
        return self.expand * self.D

    @property
    def rank(self) -> int:
        return self.dt_rank if self.dt_rank is not None else math.ceil(self.D / 16)

    def n_patches(self, axis: str, R: int, S: int) -> int:
        if axis == TEMPORAL:
            if R % self.W:
                raise ConfigError(f"temporal extent R={R} is not a multiple of W={self.W}")
            return R // self.W
        if axis == SPECTRAL:
            if S % self.H:
                raise ConfigError(f"spectral extent S={S} is not a multiple of H={self.H}")
            return S // self.H
        raise ConfigError(f"unknown axis {axis!r}")

    def patch_len(self, axis: str, kappa: int, R: int, S: int) -> int:
        return kappa * self.W * S if axis == TEMPORAL else kappa * R * self.H


@dataclass
class TokenSequence:
    """Embedded patch sequence with the summary token in the last row."""

    tokens: Tensor  # (..., J + 1, D)
    axis: str

    @property
    def J(self) -> int:
        return self.tokens.shape[-2] - 1

    @property
    def token(self) -> Tensor:
        return self.tokens[..., -1, :]


# -- patches ----------------------------------------------------------------------
def patchify(values: np.ndarray, axis: str, cfg: PatchConfig) -> np.ndarray:
    """Split ``(..., kappa, R, S)`` spectrograms into a ``(..., J, patch_len)`` matrix.

    Temporal patches run left to right and flatten ``(kappa, W, S)``; spectral
    patches run top to bottom and flatten ``(kappa, R, H)``.
    """
    *lead, kappa, R, S = values.shape
    J = cfg.n_patches(axis, R, S)
    if axis == TEMPORAL:
        x = values.reshape(*lead, kappa, J, cfg.W, S)
        x = np.moveaxis(x, -3, -4)  # (..., J, kappa, W, S)
    else:
        if cfg.spectral_high_first:
            values = values[..., ::-1]
        x = values.reshape(*lead, kappa, R, J, cfg.H)
        x = np.moveaxis(x, -2, -4)  # (..., J, kappa, R, H)
    return np.ascontiguousarray(x).reshape(*lead, J, -1)


def unpatchify(patches: np.ndarray, axis: str, cfg: PatchConfig, kappa: int, R: int, S: int) -> np.ndarray:
    """Inverse of :func:`patchify`."""
    *lead, J, _ = patches.shape
    if axis == TEMPORAL:
        x = patches.reshape(*lead, J, kappa, cfg.W, S)
        return np.ascontiguousarray(np.moveaxis(x, -4, -3)).reshape(*lead, kappa, R, S)
    x = patches.reshape(*lead, J, kappa, R, cfg.H)
    x = np.ascontiguousarray(np.moveaxis(x, -4, -2)).reshape(*lead, kappa, R, S)
    return x[..., ::-1].copy() if cfg.spectral_high_first else x


def embed(patches, W_proj: Tensor, c_token: Tensor, E_pos: Tensor) -> Tensor:
    """Project patches, append the summary token, add position embeddings."""
    p = patches if isinstance(patches, Tensor) else Tensor(patches)
    J, plen = p.shape[-2:]
    D = W_proj.shape[-1]
    if W_proj.shape != (plen, D) or c_token.shape != (D,) or E_pos.shape != (J + 1, D):
        raise DimensionError(
            f"embed shapes disagree: patches {p.shape}, W {W_proj.shape}, token {c_token.shape}, E_pos {E_pos.shape}"
        )
    rows = p @ W_proj
    token = broadcast_to(c_token.reshape(1, D), p.shape[:-2] + (1, D))
    return concat([rows, token], axis=-2) + E_pos


# -- fused sequence ops -----------------------------------------------------------
def causal_conv1d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Depthwise causal convolution along the sequence axis.

    ``x`` is ``(..., T, E)``, ``weight`` is ``(E, K)``; output ``t`` sees inputs
    ``t-K+1 .. t``.
    """
    *lead, T, E = x.shape
    K = weight.shape[1]
    if weight.shape != (E, K) or bias.shape != (E,):
        raise DimensionError(f"conv weight {weight.shape} / bias {bias.shape} do not match channels {E}")
    xp = np.zeros((*lead, T + K - 1, E))
    xp[..., K - 1:, :] = x.data
    w = weight.data
    out = np.broadcast_to(bias.data, x.shape).copy()
    for k in range(K):
        out += xp[..., k:k + T, :] * w[:, k]

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[..., k:k + T, :] += g * w[:, k]
            gx = gxp[..., K - 1:, :]
        if weight.requires_grad:
            gw = np.empty_like(w)
            flat_g = g.reshape(-1, E)
            for k in range(K):
                gw[:, k] = (xp[..., k:k + T, :].reshape(-1, E) * flat_g).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, E).sum(axis=0)
        return gx, gw, gb

    return make_op(out, (x, weight, bias), backward)


@njit(cache=True)
def _scan_forward(u, delta, dA, B, C, D):
    M, T, E = u.shape
    N = dA.shape[3]
    y = np.empty((M, T, E))
    h = np.empty((M, T, E, N))
    for m in range(M):
        for t in range(T):
            for e in range(E):
                d = delta[m, t, e]
                du = d * u[m, t, e]
                acc = D[e] * u[m, t, e]
                for n in range(N):
                    prev = h[m, t - 1, e, n] if t > 0 else 0.0
                    state = dA[m, t, e, n] * prev + du * B[m, t, n]
                    h[m, t, e, n] = state
                    acc += C[m, t, n] * state
                y[m, t, e] = acc
    return y, h


@njit(cache=True)
def _scan_backward(gy, u, delta, A, B, C, D, h, dA):
    M, T, E = u.shape
    N = A.shape[1]
    gu = np.empty((M, T, E))
    gdelta = np.empty((M, T, E))
    gA = np.zeros((E, N))
    gB = np.zeros((M, T, N))
    gC = np.zeros((M, T, N))
    gD = np.zeros(E)
    acc = np.zeros((E, N))
    for m in range(M):
        acc[:, :] = 0.0
        for t in range(T - 1, -1, -1):
            for e in range(E):
                g = gy[m, t, e]
                d = delta[m, t, e]
                ut = u[m, t, e]
                gD[e] += g * ut
                su = g * D[e]
                sd = 0.0
                for n in range(N):
                    a = acc[e, n]
                    if t < T - 1:
                        a *= dA[m, t + 1, e, n]
                    a += g * C[m, t, n]
                    acc[e, n] = a
                    gC[m, t, n] += g * h[m, t, e, n]
                    bt = B[m, t, n]
                    if t > 0:
                        g_arg = a * h[m, t - 1, e, n] * dA[m, t, e, n]
                        sd += g_arg * A[e, n]
                        gA[e, n] += g_arg * d
                    sd += a * bt * ut
                    su += a * bt * d
                    gB[m, t, n] += a * d * ut
                gu[m, t, e] = su
                gdelta[m, t, e] = sd
    return gu, gdelta, gA, gB, gC, gD


def selective_scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor) -> Tensor:
    """Input-dependent diagonal SSM scanned left to right.

    Shapes: ``u, delta (..., T, E)``, ``A (E, N)``, ``B, C (..., T, N)``,
    ``D (E,)``. With ``dA = exp(delta*A)`` and ``dB = delta*B`` the state
    follows ``h_t = dA_t * h_{t-1} + dB_t * u_t`` from ``h_0 = 0`` and the
    output is ``y_t = C_t . h_t + D * u_t``.
    """
    *lead, T, E = u.shape
    N = A.shape[-1]
    if delta.shape != u.shape or A.shape != (E, N) or D.shape != (E,):
        raise DimensionError(f"scan shapes disagree: u {u.shape} delta {delta.shape} A {A.shape} D {D.shape}")
    if B.shape != (*lead, T, N) or C.shape != (*lead, T, N):
        raise DimensionError(f"scan B {B.shape} / C {C.shape} must be {(*lead, T, N)}")
    if not np.all(np.isfinite(delta.data)):
        raise NumericError("non-finite step size in selective scan")

    M = int(np.prod(lead)) if lead else 1
    args = (
        np.ascontiguousarray(u.data.reshape(M, T, E)),
        np.ascontiguousarray(delta.data.reshape(M, T, E)),
        A.data,
        np.ascontiguousarray(B.data.reshape(M, T, N)),
        np.ascontiguousarray(C.data.reshape(M, T, N)),
        D.data,
    )
    dA = np.exp(args[1][..., None] * A.data)
    y, h = _scan_forward(args[0], args[1], dA, *args[3:])

    def backward(g):
        grads = _scan_backward(np.ascontiguousarray(g.reshape(M, T, E)), *args, h, dA)
        shapes = (u.shape, u.shape, A.shape, B.shape, C.shape, D.shape)
        return tuple(gr.reshape(s) for gr, s in zip(grads, shapes))

    return make_op(y.reshape(*lead, T, E), (u, delta, A, B, C, D), backward)


# -- blocks -------------------------------------------------------------------------
@dataclass
class SsmBlockParams:
    norm: Tensor  # (D,)
    in_proj: Tensor  # (D, 2E)
    conv_w: Tensor  # (E, K)
    conv_b: Tensor  # (E,)
    x_proj: Tensor  # (E, rank + 2N)
    dt_proj: Tensor  # (rank, E)
    dt_bias: Tensor  # (E,)
    A_log: Tensor  # (E, N)
    D: Tensor  # (E,)
    out_proj: Tensor  # (E, D)

    FIELDS = ("norm", "in_proj", "conv_w", "conv_b", "x_proj", "dt_proj", "dt_bias", "A_log", "D", "out_proj")

    @classmethod
    def from_store(cls, store: dict[str, Tensor], prefix: str) -> "SsmBlockParams":
        return cls(**{f: store[f"{prefix}.{f}"] for f in cls.FIELDS})

    @property
    def E(self) -> int:
        return self.A_log.shape[0]

    @property
    def n_state(self) -> int:
        return self.A_log.shape[1]

    @property
    def rank(self) -> int:
        return self.dt_proj.shape[0]


def mamba_block(x: Tensor, p: SsmBlockParams) -> Tensor:
    """Pre-norm residual selective-SSM block; sequence length is preserved."""
    E, N, r = p.E, p.n_state, p.rank
    xz = rms_norm(x, p.norm) @ p.in_proj
    xs = silu(causal_conv1d(xz[..., :E], p.conv_w, p.conv_b))
    gate = silu(xz[..., E:])
    dbc = xs @ p.x_proj
    delta = softplus(dbc[..., :r] @ p.dt_proj + p.dt_bias)
    y = selective_scan(xs, delta, neg(exp(p.A_log)), dbc[..., r:r + N], dbc[..., r + N:], p.D)
    return x + (y * gate) @ p.out_proj


def init_block(rng: np.random.Generator, cfg: PatchConfig, prefix: str, n_layers: int) -> dict[str, np.ndarray]:
    D, E, N, K, r = cfg.D, cfg.E, cfg.n_state, cfg.conv_width, cfg.rank
    dt = np.exp(rng.uniform(np.log(1e-3), np.log(0.1), size=E))
    return {
        f"{prefix}.norm": np.ones(D),
        f"{prefix}.in_proj": rng.normal(0.0, D**-0.5, size=(D, 2 * E)),
        f"{prefix}.conv_w": rng.uniform(-(K**-0.5), K**-0.5, size=(E, K)),
        f"{prefix}.conv_b": np.zeros(E),
        f"{prefix}.x_proj": rng.normal(0.0, E**-0.5, size=(E, r + 2 * N)),
        f"{prefix}.dt_proj": rng.uniform(-(r**-0.5), r**-0.5, size=(r, E)),
        f"{prefix}.dt_bias": dt + np.log(-np.expm1(-dt)),  # softplus^-1(dt)
        f"{prefix}.A_log": np.log(np.tile(np.arange(1, N + 1, dtype=np.float64), (E, 1))),
        f"{prefix}.D": np.ones(E),
        f"{prefix}.out_proj": rng.normal(0.0, E**-0.5 / math.sqrt(2 * n_layers), size=(E, D)),
    }


def init_stack(
    rng: np.random.Generator, cfg: PatchConfig, prefix: str, patch_len: int, J: int
) -> dict[str, np.ndarray]:
    """Initial values of one stack: patch projection, token, positions, blocks, final norm."""
    out = {
        f"{prefix}.patch_proj": rng.normal(0.0, patch_len**-0.5, size=(patch_len, cfg.D)),
        f"{prefix}.token": rng.normal(0.0, 0.02, size=cfg.D),
        f"{prefix}.pos": np.zeros((J + 1, cfg.D)),
    }
    for i in range(cfg.L):
        out.update(init_block(rng, cfg, f"{prefix}.blocks.{i}", cfg.L))
    out[f"{prefix}.norm_f"] = np.ones(cfg.D)
    return out


def stack_forward(tokens: Tensor, store: dict[str, Tensor], prefix: str, n_blocks: int) -> Tensor:
    x = tokens
    for i in range(n_blocks):
        x = mamba_block(x, SsmBlockParams.from_store(store, f"{prefix}.blocks.{i}"))
    return rms_norm(x, store[f"{prefix}.norm_f"])


STACK_PREFIX = {TEMPORAL: "tmamba", SPECTRAL: "smamba"}


def backbone_forward(
    values: np.ndarray,
    store: dict[str, Tensor],
    cfg: PatchConfig,
    axes: tuple[str, ...] = (TEMPORAL, SPECTRAL),
) -> dict[str, TokenSequence]:
    """Run the requested stacks on ``(..., kappa, R, S)`` spectrograms.

    The two stacks share no parameters; each is embedded from its own patch
    split and returned keyed by axis.
    """
    out = {}
    for axis in axes:
        prefix = STACK_PREFIX[axis]
        patches = patchify(values, axis, cfg)
        proj = store[f"{prefix}.patch_proj"]
        if proj.shape[0] != patches.shape[-1]:
            raise DimensionError(
                f"{prefix}: patch length {patches.shape[-1]} does not match projection {proj.shape}"
            )
        x = embed(patches, proj, store[f"{prefix}.token"], store[f"{prefix}.pos"])
        out[axis] = TokenSequence(stack_forward(x, store, prefix, cfg.L), axis)
    return out
