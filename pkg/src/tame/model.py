"""Full model assembly: backbone stacks, enhancement neck, and heads."""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from tame.backbone import SPECTRAL, STACK_PREFIX, TEMPORAL, PatchConfig, backbone_forward, init_stack
from tame.errors import ConfigError
from tame.frontend import FrontendConfig
from tame.heads import HeadParams, Prediction, heads_forward, init_heads
from tame.tensor import Tensor
from tame.tfe import TfeParams, init_tfe, tfe


class Variant(str, Enum):
    TMAMBA_ONLY = "TMAMBA_ONLY"
    SMAMBA_ONLY = "SMAMBA_ONLY"
    SFE = "SFE"
    TFE = "TFE"

    @property
    def axes(self) -> tuple[str, ...]:
        if self is Variant.TMAMBA_ONLY:
            return (TEMPORAL,)
        if self is Variant.SMAMBA_ONLY:
            return (SPECTRAL,)
        return (TEMPORAL, SPECTRAL)

    @property
    def uses_neck(self) -> bool:
        return self in (Variant.SFE, Variant.TFE)


@dataclass(frozen=True)
class ModelConfig:
    kappa: int = 4
    R: int = 224
    S: int = 16
    patch: PatchConfig = field(default_factory=PatchConfig)
    heads: int = 6
    n_classes: int = 4
    variant: Variant = Variant.TFE
    full_width_scale: bool = False

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if isinstance(self.patch, dict):
            object.__setattr__(self, "patch", PatchConfig(**self.patch))
        if self.patch.D % self.heads:
            raise ConfigError(f"D={self.patch.D} is not divisible by {self.heads} heads")
        for axis in (TEMPORAL, SPECTRAL):
            self.patch.n_patches(axis, self.R, self.S)

    @classmethod
    def for_frontend(cls, fe: FrontendConfig, **kwargs) -> "ModelConfig":
        return cls(kappa=fe.channels, R=fe.n_frames, S=fe.mel_bins, **kwargs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["patch"] = PatchConfig(**d["patch"])
        return cls(**d)


class ModelParams:
    """Named parameter tensors in a fixed order."""

    def __init__(self, tensors: "OrderedDict[str, Tensor]"):
        self.tensors = tensors

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ModelParams":
        return cls(OrderedDict((k, Tensor(v, requires_grad=True, name=k)) for k, v in arrays.items()))

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors.values())

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def breakdown(self) -> "OrderedDict[str, int]":
        """Parameter counts grouped by top-level submodule."""
        out: OrderedDict[str, int] = OrderedDict()
        for name, t in self.tensors.items():
            group = name.split(".")[0]
            out[group] = out.get(group, 0) + t.size
        return out

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, t in self.tensors.items():
            h.update(name.encode())
            h.update(np.asarray(t.shape, dtype="<u8").tobytes())
            h.update(t.data.astype("<f8").tobytes())
        return h.hexdigest()


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    pc = cfg.patch
    arrays: dict[str, np.ndarray] = {}
    for axis in cfg.variant.axes:
        J = pc.n_patches(axis, cfg.R, cfg.S)
        arrays.update(init_stack(rng, pc, STACK_PREFIX[axis], pc.patch_len(axis, cfg.kappa, cfg.R, cfg.S), J))
    if cfg.variant.uses_neck:
        arrays.update(init_tfe(rng, "tfe", pc.D, pc.D))
    arrays.update(init_heads(rng, "heads", pc.D, cfg.n_classes))
    return ModelParams.from_arrays(arrays)


def forward(params: ModelParams, cfg: ModelConfig, x: np.ndarray) -> Prediction:
    """Predict normalized positions and class logits for ``(B, kappa, R, S)`` inputs."""
    if x.shape[-3:] != (cfg.kappa, cfg.R, cfg.S):
        raise ConfigError(f"input {x.shape} does not match model input {(cfg.kappa, cfg.R, cfg.S)}")
    store = params.tensors
    feats = backbone_forward(x, store, cfg.patch, cfg.variant.axes)
    v = cfg.variant
    if v is Variant.TMAMBA_ONLY:
        enhanced = feats[TEMPORAL].tokens
    elif v is Variant.SMAMBA_ONLY:
        enhanced = feats[SPECTRAL].tokens
    else:
        neck = TfeParams.from_store(store, "tfe", cfg.heads, cfg.full_width_scale)
        T, S = feats[TEMPORAL].tokens, feats[SPECTRAL].tokens
        enhanced = tfe(T, S, neck) if v is Variant.TFE else tfe(S, T, neck)
    return heads_forward(enhanced, HeadParams.from_store(store, "heads"))
