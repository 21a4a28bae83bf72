"""Adam training loop, checkpoint files, and the inference wrapper."""

from __future__ import annotations

import csv
import json
import struct
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from tame.backbone import PatchConfig
from tame.errors import ConfigError, ContractError, NumericError
from tame.frontend import FrontendConfig, MelSpectrogram, SceneLabel, preset
from tame.heads import ce_loss, l1_loss, total_loss
from tame.model import ModelConfig, ModelParams, Variant, forward, init_params
from tame.synth import Volume
from tame.tensor import zero_grad

CHECKPOINT_MAGIC = b"TAME"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-4
    epochs: int = 200
    gamma: float = 2.0
    seed: int = 0
    variant: Variant = Variant.TFE
    preset: str = "default"
    patch: PatchConfig = field(default_factory=PatchConfig)
    heads: int = 6
    n_classes: int = 4
    volume: Volume = field(default_factory=Volume)
    max_steps: int | None = None
    clip_norm: float | None = None  # off unless set

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if isinstance(self.patch, dict):
            object.__setattr__(self, "patch", PatchConfig(**self.patch))
        if isinstance(self.volume, dict):
            v = self.volume
            object.__setattr__(self, "volume", Volume(tuple(v["lo"]), tuple(v["hi"])))
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 0 or self.gamma < 0:
            raise ConfigError("epochs and gamma must be non-negative")

    @property
    def frontend(self) -> FrontendConfig:
        return preset(self.preset)

    def model_config(self) -> ModelConfig:
        return ModelConfig.for_frontend(
            self.frontend, patch=self.patch, heads=self.heads, n_classes=self.n_classes, variant=self.variant
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# -- data -----------------------------------------------------------------------
def stack_inputs(specs: Sequence[MelSpectrogram]) -> np.ndarray:
    """Standardized model inputs, shape ``(n, kappa, R, S)``."""
    return np.stack([s.standardized() for s in specs])


def prepare(samples: Sequence[tuple[MelSpectrogram, SceneLabel]], volume: Volume):
    """Arrays ``(inputs, normalized positions, class indices)`` for training."""
    specs = [s for s, _ in samples]
    X = stack_inputs(specs)
    Y = volume.normalize(np.stack([lab.array for _, lab in samples]))
    labels = np.asarray([lab.class_index for _, lab in samples], dtype=np.int64)
    return X, Y, labels


# -- optimizer --------------------------------------------------------------------
@dataclass
class AdamState:
    m: "OrderedDict[str, np.ndarray]"
    v: "OrderedDict[str, np.ndarray]"
    step: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls(
            OrderedDict((k, np.zeros_like(t.data)) for k, t in params.items()),
            OrderedDict((k, np.zeros_like(t.data)) for k, t in params.items()),
        )


def adam_step(
    params: ModelParams,
    grads: dict[str, np.ndarray | None],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter {name!r} shape {p.shape}")
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_gradients(grads: dict[str, np.ndarray | None], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values() if g is not None)))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k, g in grads.items():
            if g is not None:
                grads[k] = g * scale
    return norm


# -- checkpoints ------------------------------------------------------------------
@dataclass
class Checkpoint:
    params: ModelParams
    optimizer: AdamState
    config: dict
    version: int = CHECKPOINT_VERSION

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config["train"])

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.config["model"])


def _write_record(fh, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write the single-file little-endian checkpoint format."""
    blob = json.dumps({"config": ckpt.config, "optimizer": {"step": ckpt.optimizer.step}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", ckpt.version))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name, t in ckpt.params.items():
            _write_record(fh, name, t.data)
        for name, arr in ckpt.optimizer.m.items():
            _write_record(fh, f"adam.m/{name}", arr)
        for name, arr in ckpt.optimizer.v.items():
            _write_record(fh, f"adam.v/{name}", arr)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ContractError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    (blob_len,) = struct.unpack_from("<I", data, 8)
    meta = json.loads(data[12:12 + blob_len])
    pos = 12 + blob_len
    params: OrderedDict[str, np.ndarray] = OrderedDict()
    m: OrderedDict[str, np.ndarray] = OrderedDict()
    v: OrderedDict[str, np.ndarray] = OrderedDict()
    while pos < len(data):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", data, pos)
        pos += 8 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * count
        if name.startswith("adam.m/"):
            m[name[7:]] = arr
        elif name.startswith("adam.v/"):
            v[name[7:]] = arr
        else:
            params[name] = arr
    state = AdamState(m, v, int(meta["optimizer"]["step"]))
    return Checkpoint(ModelParams.from_arrays(params), state, meta["config"], version)


# -- inference ----------------------------------------------------------------------
class TrainedModel:
    """Parameters plus everything needed to turn spectrograms into predictions."""

    def __init__(self, params: ModelParams, model_cfg: ModelConfig, volume: Volume, batch_size: int = 64):
        self.params = params
        self.model_cfg = model_cfg
        self.volume = volume
        self.batch_size = batch_size

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "TrainedModel":
        tc = ckpt.train_config
        return cls(ckpt.params, ckpt.model_config, tc.volume, tc.batch_size)

    @property
    def n_classes(self) -> int:
        return self.model_cfg.n_classes

    def predict_inputs(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Positions in meters ``(n, 3)`` and logits ``(n, C)``."""
        pos, logits = [], []
        for i in range(0, len(X), self.batch_size):
            pred = forward(self.params, self.model_cfg, X[i:i + self.batch_size])
            pos.append(pred.position.data)
            logits.append(pred.logits.data)
        if not pos:
            return np.zeros((0, 3)), np.zeros((0, self.n_classes))
        return self.volume.denormalize(np.concatenate(pos)), np.concatenate(logits)

    def predict(self, samples: Sequence[tuple[MelSpectrogram, SceneLabel]]):
        if not samples:
            return np.zeros((0, 3)), np.zeros((0, self.n_classes))
        return self.predict_inputs(stack_inputs([s for s, _ in samples]))


# -- training ------------------------------------------------------------------------
@dataclass
class EpochMetrics:
    epoch: int
    l_total: float
    l_cls: float
    l_pos: float
    wall_seconds: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list[EpochMetrics]
    step_losses: list[float]

    @property
    def model(self) -> TrainedModel:
        return TrainedModel.from_checkpoint(self.checkpoint)


class TrainingError(NumericError):
    pass


def batch_loss(params: ModelParams, model_cfg: ModelConfig, X, Y, labels, gamma: float):
    pred = forward(params, model_cfg, X)
    l_cls = ce_loss(pred.logits, labels)
    l_pos = l1_loss(pred.position, Y)
    return total_loss(l_cls, l_pos, gamma), l_cls, l_pos


def train(
    train_set: Sequence[tuple[MelSpectrogram, SceneLabel]],
    config: TrainConfig,
    log_path=None,
    on_epoch: Callable[[EpochMetrics], None] | None = None,
) -> TrainResult:
    """Train from scratch; deterministic given ``config.seed``.

    Each epoch visits the samples in an order drawn from ``(seed, epoch)``.
    ``log_path`` receives the per-epoch metrics CSV. A truthy return from
    ``on_epoch`` stops training after that epoch.
    """
    if len(train_set) == 0:
        raise ContractError("training set is empty")
    X, Y, labels = prepare(train_set, config.volume)
    # input geometry comes from the data, so custom frontends need no preset
    model_cfg = ModelConfig(
        kappa=X.shape[1], R=X.shape[2], S=X.shape[3], patch=config.patch,
        heads=config.heads, n_classes=config.n_classes, variant=config.variant,
    )
    if labels.max() >= config.n_classes:
        raise ContractError(f"label {labels.max()} outside configured {config.n_classes} classes")
    params = init_params(model_cfg, config.seed)
    state = AdamState.zeros(params)
    metrics: list[EpochMetrics] = []
    step_losses: list[float] = []
    n = len(X)
    start = time.perf_counter()
    log = None
    if log_path is not None:
        log = open(log_path, "w", newline="")
        writer = csv.writer(log)
        writer.writerow(["epoch", "l_total", "l_cls", "l_pos", "wall_seconds"])
    try:
        for epoch in range(config.epochs):
            order = np.random.default_rng([config.seed, epoch]).permutation(n)
            sums = np.zeros(3)
            seen = 0
            for b, first in enumerate(range(0, n, config.batch_size)):
                if config.max_steps is not None and state.step >= config.max_steps:
                    break
                idx = order[first:first + config.batch_size]
                loss, l_cls, l_pos = batch_loss(params, model_cfg, X[idx], Y[idx], labels[idx], config.gamma)
                if not np.isfinite(loss.data):
                    raise TrainingError(f"loss became {float(loss.data)} at epoch {epoch}, step {b}")
                loss.backward()
                grads = {k: t.grad for k, t in params.items()}
                if config.clip_norm is not None:
                    clip_gradients(grads, config.clip_norm)
                adam_step(params, grads, state, config.learning_rate)
                zero_grad(params)
                step_losses.append(float(loss.data))
                sums += len(idx) * np.array([float(loss.data), float(l_cls.data), float(l_pos.data)])
                seen += len(idx)
            if seen == 0:
                break
            sums /= seen
            row = EpochMetrics(epoch, float(sums[0]), float(sums[1]), float(sums[2]), time.perf_counter() - start)
            metrics.append(row)
            if log is not None:
                writer.writerow([row.epoch, repr(row.l_total), repr(row.l_cls), repr(row.l_pos),
                                 f"{row.wall_seconds:.3f}"])
                log.flush()
            if on_epoch is not None and on_epoch(row):
                break
    finally:
        if log is not None:
            log.close()
    snapshot = {"train": config.to_dict(), "model": model_cfg.to_dict()}
    return TrainResult(Checkpoint(params, state, snapshot), metrics, step_losses)


def with_overrides(config: TrainConfig, **kwargs) -> TrainConfig:
    return replace(config, **kwargs)
