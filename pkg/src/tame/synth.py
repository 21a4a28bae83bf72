"""Synthetic multi-microphone drone recordings.

Each rendered channel is the same rotor-like source signal, delayed by the
propagation time to that microphone, scaled by inverse distance, and low-passed
by a frequency-dependent air-absorption term, plus white sensor noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import signal as sps

from tame.errors import ConfigError, ContractError
from tame.frontend import AudioSegment, SceneLabel, write_wav

SINC_TAPS = 64


@dataclass(frozen=True)
class Volume:
    """Axis-aligned flight volume in the array frame (meters)."""

    lo: tuple[float, float, float] = (-3.5, -12.5, 1.0)
    hi: tuple[float, float, float] = (3.5, 12.5, 23.0)

    def __post_init__(self):
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ConfigError(f"flight volume must have positive extent, got lo={self.lo} hi={self.hi}")

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.hi) - np.asarray(self.lo)

    @property
    def center(self) -> np.ndarray:
        return (np.asarray(self.hi) + np.asarray(self.lo)) / 2.0

    def contains(self, p) -> bool:
        p = np.asarray(p, dtype=np.float64)
        return bool(np.all(p >= np.asarray(self.lo)) and np.all(p <= np.asarray(self.hi)))

    def normalize(self, p: np.ndarray) -> np.ndarray:
        """Map positions to [-1, 1] per axis."""
        return (np.asarray(p) - self.center) / (self.extent / 2.0)

    def denormalize(self, q: np.ndarray) -> np.ndarray:
        return np.asarray(q) * (self.extent / 2.0) + self.center


@dataclass(frozen=True)
class ArrayGeometry:
    mic_positions: tuple[tuple[float, float, float], ...]
    speed_of_sound: float = 343.0

    def __post_init__(self):
        mics = self.mics
        if mics.ndim != 2 or mics.shape[1] != 3 or mics.shape[0] < 1:
            raise ConfigError("mic_positions must be a list of 3D points")
        if len({tuple(m) for m in mics.tolist()}) != mics.shape[0]:
            raise ConfigError("mic positions must be distinct")
        if self.speed_of_sound <= 0:
            raise ConfigError("speed of sound must be positive")

    @property
    def mics(self) -> np.ndarray:
        return np.asarray(self.mic_positions, dtype=np.float64)

    @property
    def n_mics(self) -> int:
        return len(self.mic_positions)

    def distances(self, p) -> np.ndarray:
        return np.linalg.norm(self.mics - np.asarray(p, dtype=np.float64), axis=1)

    def translated(self, v) -> "ArrayGeometry":
        return ArrayGeometry(tuple(map(tuple, (self.mics + np.asarray(v)).tolist())), self.speed_of_sound)


def square_array(side: float = 0.5) -> ArrayGeometry:
    """Four microphones on the corners of a square in the z = 0 plane."""
    h = side / 2.0
    return ArrayGeometry(((h, h, 0.0), (-h, h, 0.0), (-h, -h, 0.0), (h, -h, 0.0)))


@dataclass(frozen=True)
class ClassSignature:
    """Spectral fingerprint of one drone type.

    ``broadband`` is the RMS of the rotor-wash noise floor relative to the
    harmonic part.
    """

    fundamental_hz: float
    harmonic_count: int = 8
    harmonic_decay: float = 0.75
    am_rate_hz: float = 8.0
    am_depth: float = 0.5
    broadband: float = 1.0

    def check(self, sample_rate: int) -> None:
        if self.fundamental_hz * self.harmonic_count >= sample_rate / 2:
            raise ConfigError(f"harmonics of {self.fundamental_hz} Hz exceed Nyquist")


DEFAULT_CLASSES: tuple[ClassSignature, ...] = (
    ClassSignature(110.0, am_rate_hz=6.0),
    ClassSignature(140.0, am_rate_hz=9.0),
    ClassSignature(180.0, am_rate_hz=12.0),
    ClassSignature(230.0, am_rate_hz=15.0),
)

# amplitude absorption per meter: ABSORPTION * (f / 1 kHz)**2
ABSORPTION = 4e-5


def fractional_delay_taps(mu: float, taps: int = SINC_TAPS) -> np.ndarray:
    """Blackman-windowed sinc approximating a delay of ``mu`` in [0, 1) samples.

    Tap ``k`` (0-based) multiplies ``s[n - k + taps//2 - 1]``.
    """
    k = np.arange(taps) - (taps // 2 - 1)
    t = k - mu
    window = 0.42 + 0.5 * np.cos(np.pi * t / (taps / 2)) + 0.08 * np.cos(2 * np.pi * t / (taps / 2))
    h = np.sinc(t) * window
    return h / h.sum()


def source_signal(sig: ClassSignature, n: int, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / sample_rate
    phases = rng.uniform(0.0, 2 * np.pi, size=sig.harmonic_count + 1)
    harmonics = np.zeros(n)
    for h in range(1, sig.harmonic_count + 1):
        harmonics += sig.harmonic_decay ** (h - 1) * np.sin(2 * np.pi * h * sig.fundamental_hz * t + phases[h])
    rms = np.sqrt(np.mean(harmonics**2))
    noise = rng.standard_normal(n) * (sig.broadband * rms)
    envelope = 1.0 + sig.am_depth * np.sin(2 * np.pi * sig.am_rate_hz * t + phases[0])
    return envelope * (harmonics + noise)


def _absorb(x: np.ndarray, distance: float, sample_rate: int) -> np.ndarray:
    freqs = np.fft.rfftfreq(x.shape[-1], d=1.0 / sample_rate)
    gain = np.exp(-ABSORPTION * (freqs / 1000.0) ** 2 * distance)
    return np.fft.irfft(np.fft.rfft(x) * gain, n=x.shape[-1])


def render(
    label: SceneLabel,
    geom: ArrayGeometry,
    sig: ClassSignature,
    snr_db: float,
    seed,
    sample_rate: int = 48_000,
    segment_seconds: float = 0.2,
    volume: Volume | None = None,
) -> AudioSegment:
    """Render one segment heard by every microphone of ``geom``.

    ``snr_db`` is the ratio of mean signal power (over all channels) to
    per-channel noise power; ``float('inf')`` renders noise-free.
    """
    if volume is not None and not volume.contains(label.position):
        raise ContractError(f"source {label.position} outside flight volume {volume}")
    if np.isnan(snr_db) or snr_db == -np.inf:
        raise ContractError(f"snr_db must be finite or +inf, got {snr_db}")
    sig.check(sample_rate)
    dist = geom.distances(label.position)
    if np.any(dist < 1e-9):
        raise ContractError(f"source {label.position} coincides with a microphone")

    rng = np.random.default_rng(seed)
    n = int(round(sample_rate * segment_seconds))
    delays = dist / geom.speed_of_sound * sample_rate
    whole = np.floor(delays).astype(int)
    guard = SINC_TAPS
    # absorption filter settles within the guard band on both sides
    margin = int(whole.max()) + 2 * guard
    src = source_signal(sig, n + margin + guard + SINC_TAPS, sample_rate, rng)
    # src[j] is emitted at time (j - margin) / sample_rate

    out = np.empty((geom.n_mics, n))
    offset = SINC_TAPS // 2 - 1
    for i in range(geom.n_mics):
        taps = fractional_delay_taps(delays[i] - whole[i])
        # y[m] at times m - guard .. m + n + guard
        start = margin - whole[i] - guard - (SINC_TAPS - 1 - offset)
        chunk = src[start:start + n + 2 * guard + SINC_TAPS - 1]
        delayed = np.convolve(chunk, taps, mode="valid")
        delayed = _absorb(delayed, dist[i], sample_rate)
        out[i] = delayed[guard:guard + n] / max(dist[i], 0.1)

    if np.isfinite(snr_db):
        power = np.mean(out**2)
        sigma = np.sqrt(power / 10.0 ** (snr_db / 10.0))
        out = out + rng.standard_normal(out.shape) * sigma
    return AudioSegment(out, sample_rate)


def measure_lag(a: np.ndarray, b: np.ndarray, max_lag: int) -> int:
    """Lag (samples) by which ``b`` trails ``a``, from the cross-correlation peak."""
    corr = sps.correlate(b, a, mode="full", method="fft")
    lags = sps.correlation_lags(b.size, a.size, mode="full")
    keep = np.abs(lags) <= max_lag
    return int(lags[keep][np.argmax(corr[keep])])


def geometric_lag(label_position, geom: ArrayGeometry, i: int, j: int, sample_rate: int = 48_000) -> float:
    """Arrival-time difference of mic ``j`` relative to mic ``i``, in samples."""
    d = geom.distances(label_position)
    return (d[j] - d[i]) / geom.speed_of_sound * sample_rate


def sample_label(rng: np.random.Generator, volume: Volume, n_classes: int) -> SceneLabel:
    pos = rng.uniform(volume.lo, volume.hi)
    return SceneLabel(tuple(float(v) for v in pos), int(rng.integers(n_classes)))


def make_dataset(
    n_train: int,
    n_test: int,
    classes=DEFAULT_CLASSES,
    geom: ArrayGeometry | None = None,
    snr_db: float = 10.0,
    seed: int = 0,
    out_dir="data",
    volume: Volume | None = None,
    sample_rate: int = 48_000,
    segment_seconds: float = 0.2,
) -> Path:
    """Render a labeled dataset to ``out_dir`` and return the manifest path."""
    if n_train < 0 or n_test < 0:
        raise ContractError("sample counts must be non-negative")
    geom = geom or square_array()
    volume = volume or Volume()
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(seed).spawn(n_train + n_test)
    lines = []
    for idx, child in enumerate(children):
        label_seed, render_seed = child.spawn(2)
        label = sample_label(np.random.default_rng(label_seed), volume, len(classes))
        seg = render(label, geom, classes[label.class_index], snr_db, render_seed,
                     sample_rate, segment_seconds, volume)
        rel = f"audio/{idx:06d}.wav"
        write_wav(out / rel, seg.channels, sample_rate)
        x, y, z = label.position
        lines.append(json.dumps({"audio": rel, "x": x, "y": y, "z": z, "class": label.class_index,
                                 "split": "train" if idx < n_train else "test"}))
    manifest = out / "manifest.jsonl"
    manifest.write_text("".join(line + "\n" for line in lines))
    meta = {
        "volume": asdict(volume),
        "geometry": asdict(geom),
        "classes": [asdict(c) for c in classes],
        "snr_db": snr_db,
        "seed": seed,
        "sample_rate": sample_rate,
        "segment_seconds": segment_seconds,
    }
    (out / "scene.json").write_text(json.dumps(meta, indent=2))
    return manifest
