"""Waveforms, STFT analysis/synthesis, FIR filtering and 16-bit PCM WAV I/O."""

from __future__ import annotations

import logging
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .tensor.spectral import frame_index, hann_window

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000


class InputError(ValueError):
    """Input data violates an operation's preconditions."""


class ConfigError(ValueError):
    """Parameters describe an invalid configuration."""


class WavFormatError(InputError):
    """A WAV file is not 16-bit mono PCM at the pipeline rate."""


@dataclass(frozen=True)
class StftConfig:
    nfft: int = 512
    window_length: int = 400
    hop_length: int = 100

    def __post_init__(self):
        if not 0 < self.hop_length <= self.window_length <= self.nfft:
            raise ConfigError(
                f"need 0 < hop ({self.hop_length}) <= window ({self.window_length}) <= nfft ({self.nfft})"
            )

    @property
    def n_bins(self) -> int:
        return self.nfft // 2 + 1

    def n_frames(self, length: int) -> int:
        return length // self.hop_length + 1

    def check_cola(self) -> None:
        if self.hop_length > self.window_length // 2:
            raise ConfigError(
                f"hop {self.hop_length} > window/2 ({self.window_length // 2}): "
                "Hann overlap-add reconstruction is not exact"
            )


PIPELINE_STFT = StftConfig()


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if not np.all(np.isfinite(self.samples)):
            raise InputError("waveform contains NaN or Inf samples")
        if self.sample_rate != SAMPLE_RATE:
            raise InputError(f"sample rate {self.sample_rate} Hz; the pipeline runs at {SAMPLE_RATE} Hz")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def ingest(samples, sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Build a Waveform from external data: reject non-finite, clip to [-1, 1]."""
    arr = np.asarray(samples, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise InputError("waveform contains NaN or Inf samples")
    peak = np.abs(arr).max(initial=0.0)
    if peak > 1.0:
        logger.warning("clipping waveform with peak %.3f to [-1, 1]", peak)
        arr = np.clip(arr, -1.0, 1.0)
    return Waveform(arr, sample_rate)


@dataclass
class ComplexSpectrogram:
    """T x F complex grid tagged with the analysis configuration."""

    values: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex64)
        if self.values.ndim != 2 or self.values.shape[1] != self.config.n_bins:
            raise ConfigError(
                f"spectrogram shape {self.values.shape} inconsistent with nfft={self.config.nfft}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def require_same_config(self, other: "ComplexSpectrogram") -> None:
        if self.config != other.config:
            raise ConfigError(f"STFT configs differ: {self.config} vs {other.config}")
        if self.shape != other.shape:
            raise ConfigError(f"spectrogram shapes differ: {self.shape} vs {other.shape}")

    def to_pairs(self) -> np.ndarray:
        """[T, F, 2] float32 (real, imaginary)."""
        return np.stack([self.values.real, self.values.imag], axis=-1).astype(np.float32)

    @classmethod
    def from_pairs(cls, pairs: np.ndarray, config: StftConfig) -> "ComplexSpectrogram":
        pairs = np.asarray(pairs)
        return cls(pairs[..., 0] + 1j * pairs[..., 1], config)


def _samples(x) -> np.ndarray:
    return x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float32)


def stft(x, cfg: StftConfig = PIPELINE_STFT) -> ComplexSpectrogram:
    """Centred, reflect-padded, Hann-windowed one-sided STFT."""
    s = _samples(x)
    if s.size < cfg.window_length:
        raise InputError(f"signal of {s.size} samples is shorter than one window ({cfg.window_length})")
    frames = s[frame_index(s.size, cfg.window_length, cfg.hop_length)] * hann_window(cfg.window_length)
    spec = np.fft.rfft(frames.astype(np.float64), n=cfg.nfft, axis=-1)
    return ComplexSpectrogram(spec, cfg)


def istft(X: ComplexSpectrogram, out_len: int) -> Waveform:
    """Overlap-add synthesis normalised by the summed squared window."""
    cfg = X.config
    cfg.check_cola()
    win = hann_window(cfg.window_length, np.float64)
    frames = np.fft.irfft(X.values.astype(np.complex128), n=cfg.nfft, axis=-1)[:, :cfg.window_length] * win
    n_frames = frames.shape[0]
    total = (n_frames - 1) * cfg.hop_length + cfg.window_length
    y = np.zeros(total)
    wsum = np.zeros(total)
    for t in range(n_frames):
        sl = slice(t * cfg.hop_length, t * cfg.hop_length + cfg.window_length)
        y[sl] += frames[t]
        wsum[sl] += win * win
    y /= np.maximum(wsum, 1e-8)
    y = y[cfg.window_length // 2:]
    out = np.zeros(out_len)
    n = min(out_len, y.size)
    out[:n] = y[:n]
    return Waveform(out)


def lowpass_fir(x, cutoff_hz: float, taps: int = 255, sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Zero-phase-aligned linear-phase windowed-sinc (Hamming) low-pass filter."""
    if not 0 < cutoff_hz < sample_rate / 2:
        raise ConfigError(f"cutoff {cutoff_hz} Hz must lie in (0, {sample_rate / 2})")
    if taps < 1 or taps % 2 == 0:
        raise ConfigError(f"tap count must be odd, got {taps}")
    h = sps.firwin(taps, cutoff_hz, fs=sample_rate)
    return Waveform(fir_filter(_samples(x), h), sample_rate)


def fir_filter(s: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Apply an odd-length linear-phase FIR with its group delay removed."""
    delay = (len(h) - 1) // 2
    full = sps.fftconvolve(np.asarray(s, dtype=np.float64), h, mode="full")
    return full[delay:delay + len(s)]


def convolve_full(x, h) -> Waveform:
    """Linear convolution truncated to len(x) and rescaled to the input's peak."""
    s = _samples(x).astype(np.float64)
    h = np.asarray(h, dtype=np.float64).reshape(-1)
    if h.size == 0:
        raise InputError("impulse response is empty")
    y = sps.fftconvolve(s, h, mode="full")[:s.size]
    peak_in = np.abs(s).max(initial=0.0)
    peak_out = np.abs(y).max(initial=0.0)
    if peak_out > 0:
        y *= peak_in / peak_out
    return Waveform(y)


def read_wav(path) -> Waveform:
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getnchannels() != 1:
                raise WavFormatError(f"{path}: {wf.getnchannels()} channels, expected mono")
            if wf.getsampwidth() != 2:
                raise WavFormatError(f"{path}: {8 * wf.getsampwidth()}-bit samples, expected 16-bit")
            if wf.getframerate() != SAMPLE_RATE:
                raise WavFormatError(f"{path}: {wf.getframerate()} Hz, expected {SAMPLE_RATE} Hz")
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise WavFormatError(f"{path}: {exc}") from exc
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float32) / 32768.0)


def write_wav(path, x) -> None:
    s = _samples(x).astype(np.float64)
    pcm = np.clip(np.round(s * 32768.0), -32768, 32767).astype("<i2")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(SAMPLE_RATE)
        wf.writeframes(pcm.tobytes())
