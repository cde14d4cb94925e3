"""WAV I/O and log-mel frontend."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import DegenerateInputError, WavFormatError

SAMPLE_RATE = 16000
LOG_FLOOR = 1e-6


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("waveform must be a non-empty mono signal")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = SAMPLE_RATE
    window: int = 400   # 25 ms
    hop: int = 160      # 10 ms
    n_fft: int = 512
    n_mels: int = 40
    fmin: float = 0.0
    fmax: float = 8000.0


@dataclass
class FeatureMatrix:
    frames: np.ndarray          # (T, n_mels) float32
    frame_hop: float
    frame_window: float

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def read_wav(path) -> Waveform:
    """Read a 16-bit PCM mono WAV file, scaling samples by 1/32768."""
    path = Path(path)
    if not path.exists():
        raise WavFormatError(f"{path}: file not found")
    try:
        with wave.open(str(path), "rb") as f:
            if f.getcomptype() != "NONE":
                raise WavFormatError(f"{path}: compression type {f.getcomptype()!r} is not PCM")
            if f.getnchannels() != 1:
                raise WavFormatError(f"{path}: nchannels={f.getnchannels()}, expected 1")
            if f.getsampwidth() != 2:
                raise WavFormatError(f"{path}: sampwidth={f.getsampwidth()} bytes, expected 2")
            rate = f.getframerate()
            raw = f.readframes(f.getnframes())
    except wave.Error as e:
        raise WavFormatError(f"{path}: format tag/header rejected ({e})") from e
    except EOFError as e:
        raise WavFormatError(f"{path}: truncated RIFF header") from e
    pcm = np.frombuffer(raw, dtype="<i2")
    if pcm.size == 0:
        raise WavFormatError(f"{path}: data chunk is empty")
    return Waveform(pcm.astype(np.float64) / 32768.0, rate)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")


def write_wav(path, wav: Waveform) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(wav.sample_rate)
        f.writeframes(to_pcm16(wav.samples).tobytes())


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers(cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Center frequency (Hz) of each triangular filter."""
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    return pts[1:-1]


@lru_cache(maxsize=8)
def mel_filterbank(cfg: MelConfig = MelConfig()) -> np.ndarray:
    """HTK-scale triangular filters, shape ``(n_fft // 2 + 1, n_mels)``, peak weight 1."""
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    freqs = np.arange(cfg.n_fft // 2 + 1) * cfg.sample_rate / cfg.n_fft
    lo, mid, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb.T


def num_frames(n_samples: int, window: int = 400, hop: int = 160) -> int:
    if n_samples < window:
        raise DegenerateInputError(f"{n_samples} samples is shorter than one {window}-sample window")
    return (n_samples - window) // hop + 1


def frame_signal(x: np.ndarray, window: int, hop: int) -> np.ndarray:
    T = num_frames(x.size, window, hop)
    idx = np.arange(window)[None, :] + hop * np.arange(T)[:, None]
    return x[idx]


def log_mel(w: Waveform, cfg: MelConfig = MelConfig()) -> FeatureMatrix:
    """Hann window, power spectrum, mel filterbank, ``log(x + 1e-6)``."""
    if w.sample_rate != cfg.sample_rate:
        raise ValueError(f"sample rate {w.sample_rate} != {cfg.sample_rate}; resampling unsupported")
    if len(w) < cfg.window:
        raise DegenerateInputError(f"input of {len(w)} samples is shorter than the {cfg.window}-sample window")
    frames = frame_signal(w.samples, cfg.window, cfg.hop) * np.hanning(cfg.window + 1)[:-1]
    power = np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1)) ** 2
    feats = np.log(power @ mel_filterbank(cfg) + LOG_FLOOR).astype(np.float32)
    return FeatureMatrix(feats, cfg.hop / cfg.sample_rate, cfg.window / cfg.sample_rate)
