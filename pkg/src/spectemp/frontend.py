"""Waveform loading and log-mel feature extraction."""

from __future__ import annotations

import wave
from dataclasses import dataclass, field, asdict
from functools import lru_cache
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000


class AudioFormatError(ValueError):
    """Raised when a WAV file does not meet the 16-bit mono 16 kHz contract."""


@dataclass(frozen=True)
class FrontendConfig:
    n_mels: int = 128
    win_ms: float = 25.0
    hop_ms: float = 10.0
    clip_seconds: float = 8.0
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-10
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ValueError("need 0 <= fmin < fmax <= sample_rate/2")
        if self.n_samples % self.hop_length:
            raise ValueError("clip length must be a whole number of hops")

    @property
    def win_length(self) -> int:
        return int(round(self.win_ms * self.sample_rate / 1000))

    @property
    def hop_length(self) -> int:
        return int(round(self.hop_ms * self.sample_rate / 1000))

    @property
    def n_samples(self) -> int:
        return int(round(self.clip_seconds * self.sample_rate))

    @property
    def n_frames(self) -> int:
        return self.n_samples // self.hop_length

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class WaveformClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE


@dataclass
class MelSpectrogram:
    """``values`` is (n_mels, n_frames); column t is frame t."""

    values: np.ndarray
    config: FrontendConfig = field(default_factory=FrontendConfig)

    @property
    def shape(self):
        return self.values.shape


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a 16-bit PCM mono WAV and return float samples in [-1, 1) and the rate."""
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError, OSError) as exc:
        raise AudioFormatError(f"cannot read {path}: {exc}") from exc
    if width != 2:
        raise AudioFormatError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    if n_channels != 1:
        raise AudioFormatError(f"{path}: expected mono, got {n_channels} channels")
    pcm = np.frombuffer(raw, dtype="<i2")
    return pcm.astype(np.float64) / 32768.0, rate


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """Write float samples as 16-bit PCM mono. Values are clipped to [-1, 1]."""
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


def fit_length(samples: np.ndarray, n_samples: int) -> np.ndarray:
    """Truncate from the end or zero-pad at the end to exactly ``n_samples``."""
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) >= n_samples:
        return samples[:n_samples].copy()
    out = np.zeros(n_samples)
    out[: len(samples)] = samples
    return out


def load_clip(path, config: FrontendConfig = FrontendConfig()) -> WaveformClip:
    samples, rate = read_wav(path)
    if rate != config.sample_rate:
        raise AudioFormatError(
            f"{path}: sample rate {rate} Hz, expected {config.sample_rate} Hz (no resampling)"
        )
    return WaveformClip(fit_length(samples, config.n_samples), rate)


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    lin = f / f_sp
    log = min_log_mel + np.log(np.maximum(f, min_log_hz) / min_log_hz) / logstep
    return np.where(f >= min_log_hz, log, lin)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    lin = m * f_sp
    log = min_log_hz * np.exp(logstep * (m - min_log_mel))
    return np.where(m >= min_log_mel, log, lin)


def mel_center_frequencies(config: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """Center frequency in Hz of each mel filter."""
    edges = mel_to_hz(
        np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.n_mels + 2)
    )
    return edges[1:-1]


@lru_cache(maxsize=8)
def _filterbank(n_mels, n_fft, sample_rate, fmin, fmax):
    fft_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower = edges[:-2, None]
    center = edges[1:-1, None]
    upper = edges[2:, None]
    rising = (fft_freqs[None, :] - lower) / (center - lower)
    falling = (upper - fft_freqs[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb *= (2.0 / (upper - lower))  # area normalization
    fb.setflags(write=False)
    return fb


def mel_filterbank(config: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """(n_mels, n_fft//2 + 1) Slaney-normalized triangular filterbank."""
    return _filterbank(
        config.n_mels, config.win_length, config.sample_rate, config.fmin, config.fmax
    )


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def power_frames(samples: np.ndarray, config: FrontendConfig) -> np.ndarray:
    """|STFT|^2 with reflect padding of win/2 per side; returns (n_frames, n_fft//2+1)."""
    win = config.win_length
    hop = config.hop_length
    n_frames = len(samples) // hop
    padded = np.pad(samples, (win // 2, win // 2), mode="reflect")
    idx = np.arange(n_frames)[:, None] * hop + np.arange(win)[None, :]
    frames = padded[idx] * hann(win)[None, :]
    return np.abs(np.fft.rfft(frames, axis=1)) ** 2


def compute_logmel(clip: WaveformClip, config: FrontendConfig = FrontendConfig()) -> MelSpectrogram:
    samples = np.asarray(clip.samples, dtype=np.float64)
    if clip.sample_rate != config.sample_rate:
        raise AudioFormatError(f"clip is {clip.sample_rate} Hz, expected {config.sample_rate} Hz")
    if len(samples) != config.n_samples:
        raise ValueError(f"clip has {len(samples)} samples, expected {config.n_samples}")
    power = power_frames(samples, config)
    mel = mel_filterbank(config) @ power.T
    values = np.log(mel + config.log_floor).astype(np.float32)
    return MelSpectrogram(values, config)
