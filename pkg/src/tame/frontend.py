"""Multichannel audio segmentation, log-mel features, and dataset ingestion.

All DSP is plain numpy. Power spectra come from a center-padded (zeros),
periodic-Hann STFT and are pooled by a triangular HTK-scale filterbank.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from tame.errors import ConfigError, ContractError, IngestionError


@dataclass(frozen=True)
class FrontendConfig:
    """Parameters of the waveform-to-spectrogram transform.

    ``max_frames`` trims the STFT output to a fixed frame count; ``None``
    keeps every frame produced by center padding.
    """

    sample_rate: int = 48_000
    segment_seconds: float = 0.2
    fft_size: int = 1024
    hop: int = 43
    mel_bins: int = 16
    fmin: float = 20.0
    fmax: float = 24_000.0
    clamp_floor: float = 1e-10
    channels: int = 4
    max_frames: int | None = 224

    def __post_init__(self):
        if self.hop <= 0 or self.hop > self.fft_size:
            raise ConfigError(f"hop must be in (0, fft_size], got hop={self.hop} fft_size={self.fft_size}")
        if self.fmax > self.sample_rate / 2 or not 0 <= self.fmin < self.fmax:
            raise ConfigError(f"need 0 <= fmin < fmax <= sample_rate/2, got {self.fmin}, {self.fmax}")
        if self.mel_bins < 1 or self.channels < 1 or self.clamp_floor <= 0:
            raise ConfigError("mel_bins, channels and clamp_floor must be positive")

    @property
    def segment_samples(self) -> int:
        return int(round(self.sample_rate * self.segment_seconds))

    @property
    def n_frames(self) -> int:
        frames = self.segment_samples // self.hop + 1
        return frames if self.max_frames is None else min(frames, self.max_frames)

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS: dict[str, FrontendConfig] = {
    # 224 x 16 spectrogram
    "default": FrontendConfig(),
    # 64 frames, so W=4 yields 16 temporal patches
    "J16": FrontendConfig(hop=150, max_frames=64),
}


def preset(name: str) -> FrontendConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown frontend preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass
class AudioSegment:
    channels: np.ndarray  # (kappa, samples)
    sample_rate: int
    duration: float = field(init=False)

    def __post_init__(self):
        self.channels = np.atleast_2d(np.asarray(self.channels, dtype=np.float64))
        if self.channels.shape[0] < 1:
            raise ContractError("an audio segment needs at least one channel")
        self.duration = self.channels.shape[1] / self.sample_rate

    @property
    def n_channels(self) -> int:
        return self.channels.shape[0]


@dataclass
class MelSpectrogram:
    values: np.ndarray  # (kappa, R, S)
    config: FrontendConfig

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def standardized(self, eps: float = 1e-6) -> np.ndarray:
        """Zero-mean, unit-variance copy of the values (whole spectrogram)."""
        v = self.values
        return (v - v.mean()) / (v.std() + eps)


def segment(waveforms, sample_rate: int, segment_seconds: float) -> list[AudioSegment]:
    """Split equal-length channels into consecutive non-overlapping segments.

    A trailing remainder shorter than one segment is dropped.
    """
    chans = [np.asarray(w, dtype=np.float64) for w in waveforms]
    if not chans:
        raise ContractError("no channels given")
    lengths = {c.shape[0] for c in chans}
    if len(lengths) != 1:
        raise ContractError(f"channels have unequal lengths {sorted(lengths)}")
    data = np.stack(chans)
    step = int(round(sample_rate * segment_seconds))
    if step <= 0:
        raise ContractError("segment length must be at least one sample")
    count = data.shape[1] // step
    return [AudioSegment(data[:, i * step:(i + 1) * step], sample_rate) for i in range(count)]


# -- mel filterbank ---------------------------------------------------------------
def hz_to_mel(freq):
    return 2595.0 * np.log10(1.0 + np.asarray(freq, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: FrontendConfig) -> np.ndarray:
    """Peak frequency (Hz) of each triangular filter."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.mel_bins + 2))
    return edges[1:-1]


def mel_filterbank(cfg: FrontendConfig) -> np.ndarray:
    """Triangular filters with unit peak, shape ``(mel_bins, fft_size//2 + 1)``."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.mel_bins + 2))
    freqs = np.fft.rfftfreq(cfg.fft_size, d=1.0 / cfg.sample_rate)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    return np.clip(np.minimum(rising, falling), 0.0, None)


def hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def power_stft(x: np.ndarray, cfg: FrontendConfig) -> np.ndarray:
    """Power spectrogram of the last axis, shape ``(..., frames, fft_size//2 + 1)``."""
    n = x.shape[-1]
    if cfg.fft_size > n:
        raise ConfigError(f"fft_size {cfg.fft_size} exceeds segment length {n}")
    pad = cfg.fft_size // 2
    padded = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(pad, pad)])
    frames = n // cfg.hop + 1
    if cfg.max_frames is not None:
        frames = min(frames, cfg.max_frames)
    starts = np.arange(frames) * cfg.hop
    windows = padded[..., starts[:, None] + np.arange(cfg.fft_size)[None, :]] * hann(cfg.fft_size)
    spec = np.fft.rfft(windows, axis=-1)
    return spec.real**2 + spec.imag**2


def log_mel(seg: AudioSegment, cfg: FrontendConfig) -> MelSpectrogram:
    """Log-mel energies of every channel, shape ``(kappa, R, S)``."""
    if seg.sample_rate != cfg.sample_rate:
        raise ConfigError(f"segment sample rate {seg.sample_rate} != config {cfg.sample_rate}")
    power = power_stft(seg.channels, cfg)
    mel = power @ mel_filterbank(cfg).T
    return MelSpectrogram(np.log(np.maximum(mel, cfg.clamp_floor)), cfg)


# -- files --------------------------------------------------------------------
def write_wav(path, channels: np.ndarray, sample_rate: int) -> None:
    """Write ``(kappa, samples)`` as interleaved 32-bit float PCM."""
    wavfile.write(path, sample_rate, np.ascontiguousarray(np.asarray(channels, dtype=np.float32).T))


def read_wav(path) -> tuple[np.ndarray, int]:
    rate, data = wavfile.read(path)
    data = np.asarray(data)
    if data.dtype != np.float32:
        raise IngestionError(f"{path}: expected 32-bit float PCM, got {data.dtype}")
    return np.atleast_2d(data.T if data.ndim == 2 else data).astype(np.float64), int(rate)


@dataclass(frozen=True)
class SceneLabel:
    position: tuple[float, float, float]
    class_index: int

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.position, dtype=np.float64)


@dataclass(frozen=True)
class ManifestRow:
    audio: str
    label: SceneLabel
    split: str


def parse_manifest(manifest_path) -> list[ManifestRow]:
    path = Path(manifest_path)
    if not path.is_file():
        raise IngestionError(f"manifest {path} does not exist")
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            label = SceneLabel((float(obj["x"]), float(obj["y"]), float(obj["z"])), int(obj["class"]))
            split = obj["split"]
            if split not in ("train", "test"):
                raise ValueError(f"split must be 'train' or 'test', got {split!r}")
            rows.append(ManifestRow(str(obj["audio"]), label, split))
        except (ValueError, KeyError, TypeError) as exc:
            raise IngestionError(f"{path}:{lineno}: malformed manifest row ({exc})") from exc
    return rows


def _load_row(base: Path, row: ManifestRow, cfg: FrontendConfig, lineno: int) -> MelSpectrogram:
    wav = base / row.audio
    where = f"manifest entry {lineno} ({row.audio})"
    if not wav.is_file():
        raise IngestionError(f"{where}: audio file not found")
    try:
        data, rate = read_wav(wav)
    except ValueError as exc:
        raise IngestionError(f"{where}: unreadable WAV ({exc})") from exc
    if data.shape[0] != cfg.channels:
        raise IngestionError(f"{where}: {data.shape[0]} channels, config expects {cfg.channels}")
    if rate != cfg.sample_rate:
        raise IngestionError(f"{where}: sample rate {rate}, config expects {cfg.sample_rate}")
    if data.shape[1] != cfg.segment_samples:
        raise IngestionError(f"{where}: {data.shape[1]} samples, config expects {cfg.segment_samples}")
    return log_mel(AudioSegment(data, rate), cfg)


def load_dataset(
    manifest_path, cfg: FrontendConfig, split: str | None = None, workers: int | None = None
) -> list[tuple[MelSpectrogram, SceneLabel]]:
    """Load every manifest row (optionally one split) in manifest order."""
    path = Path(manifest_path)
    rows = [(i, r) for i, r in enumerate(parse_manifest(path), start=1) if split is None or r.split == split]
    if workers is None:
        workers = int(os.environ.get("TAME_THREADS", "0")) or (os.cpu_count() or 1)
    load = lambda item: _load_row(path.parent, item[1], cfg, item[0])  # noqa: E731
    if workers > 1 and len(rows) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            specs = list(pool.map(load, rows))
    else:
        specs = [load(item) for item in rows]
    return [(s, r.label) for s, (_, r) in zip(specs, rows)]


def with_overrides(cfg: FrontendConfig, **kwargs) -> FrontendConfig:
    return replace(cfg, **kwargs)
