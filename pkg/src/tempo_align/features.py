"""Log-Mel filterbank front end: raw normalisation, FBANK extraction,
frame-count fitting and corpus-level standardisation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import InvalidInputError

STD_FLOOR = 1e-8


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise InvalidInputError("waveform must be a non-empty 1-D signal")
        if self.sample_rate <= 0:
            raise InvalidInputError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise InvalidInputError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.size


@dataclass(frozen=True)
class FbankConfig:
    n_mels: int = 128
    frame_shift_ms: float = 10.0
    frame_length_ms: float = 25.0
    window: str = "hanning"
    target_frames: int = 1000
    energy_floor: float = 1e-10
    low_freq: float = 20.0

    def __post_init__(self):
        if self.frame_length_ms < self.frame_shift_ms:
            raise InvalidInputError("frame_length must be >= frame_shift")
        if self.n_mels < 1 or self.target_frames < 1:
            raise InvalidInputError("n_mels and target_frames must be >= 1")
        if self.energy_floor <= 0:
            raise InvalidInputError("energy_floor must be positive")
        if self.window != "hanning":
            raise InvalidInputError(f"unsupported window {self.window!r}")

    def window_samples(self, sample_rate: int) -> int:
        return int(round(sample_rate * self.frame_length_ms / 1000.0))

    def shift_samples(self, sample_rate: int) -> int:
        return int(round(sample_rate * self.frame_shift_ms / 1000.0))


@dataclass(frozen=True)
class CorpusStats:
    mean: float
    std: float


def normalize_raw(w: Waveform) -> Waveform:
    """Remove the DC offset of a clip."""
    return Waveform(w.samples - w.samples.mean(), w.sample_rate)


def _mel(hz):
    return 1127.0 * np.log1p(np.asarray(hz, dtype=np.float64) / 700.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, low_freq: float = 20.0) -> np.ndarray:
    """Triangular filters equally spaced on the mel scale, shape (n_mels, n_fft//2 + 1)."""
    nyquist = sample_rate / 2.0
    mel_lo, mel_hi = _mel(low_freq), _mel(nyquist)
    edges = np.linspace(mel_lo, mel_hi, n_mels + 2)
    bin_mel = _mel(np.arange(n_fft // 2 + 1) * sample_rate / n_fft)
    left, centre, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bin_mel[None, :] - left) / (centre - left)
    down = (right - bin_mel[None, :]) / (right - centre)
    return np.clip(np.minimum(up, down), 0.0, None)


def frame_count(n_samples: int, window: int, shift: int) -> int:
    """Number of full frames; partial trailing frames are dropped."""
    if n_samples < window:
        return 0
    return 1 + (n_samples - window) // shift


def fbank(w: Waveform, cfg: FbankConfig = FbankConfig()) -> np.ndarray:
    """Log-Mel energies, shape (T, n_mels), before frame fitting."""
    win = cfg.window_samples(w.sample_rate)
    shift = cfg.shift_samples(w.sample_rate)
    n_frames = frame_count(len(w), win, shift)
    if n_frames == 0:
        raise InvalidInputError(
            f"waveform of {len(w)} samples is shorter than one {win}-sample window")
    n_fft = 1 << (win - 1).bit_length()
    idx = np.arange(win)[None, :] + shift * np.arange(n_frames)[:, None]
    frames = w.samples[idx] * np.hanning(win)[None, :]
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    mel_energy = power @ mel_filterbank(cfg.n_mels, n_fft, w.sample_rate, cfg.low_freq).T
    return np.log(np.maximum(mel_energy, cfg.energy_floor))


def fit_frames(m: np.ndarray, target_frames: int) -> np.ndarray:
    """Center-crop or tail-zero-pad the time axis to ``target_frames`` rows."""
    t = m.shape[0]
    if t == target_frames:
        return m.copy()
    if t > target_frames:
        start = (t - target_frames) // 2
        return m[start:start + target_frames].copy()
    pad = np.zeros((target_frames - t, m.shape[1]), dtype=m.dtype)
    return np.concatenate([m, pad], axis=0)


def compute_corpus_stats(dataset: Iterable[np.ndarray]) -> CorpusStats:
    """Pooled population mean/std over every entry of every matrix.

    Per-matrix moments are merged with Chan's pairwise update so the
    result does not depend on how the corpus is chunked.
    """
    count, mean, m2 = 0, 0.0, 0.0
    for m in dataset:
        x = np.asarray(m, dtype=np.float64).ravel()
        if x.size == 0:
            continue
        n_b, mean_b = x.size, float(x.mean())
        m2_b = float(((x - mean_b) ** 2).sum())
        total = count + n_b
        delta = mean_b - mean
        mean += delta * n_b / total
        m2 += m2_b + delta * delta * count * n_b / total
        count = total
    if count == 0:
        raise InvalidInputError("corpus statistics need at least one non-empty matrix")
    return CorpusStats(mean=mean, std=float(np.sqrt(max(m2, 0.0) / count)))


def normalize_fbank(m: np.ndarray, stats: CorpusStats) -> np.ndarray:
    return (m - stats.mean) / max(stats.std, STD_FLOOR)


def extract(w: Waveform, cfg: FbankConfig = FbankConfig()) -> np.ndarray:
    """Raw normalisation, FBANK and frame fitting in one call (unstandardised)."""
    return fit_frames(fbank(normalize_raw(w), cfg), cfg.target_frames)
