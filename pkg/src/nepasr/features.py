"""MFCC front end: 13 cepstra every 40 samples, stacked four at a time into
52-dimensional frames (about 100 frames per second at 16 kHz)."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct

from .ingest import SUPPORTED_SAMPLE_RATE, AudioSignal

LOG_FLOOR = 1e-10
FEATURE_MAGIC = b"NPFEAT01"


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class MfccConfig:
    pre_emphasis: float = 0.97
    sub_hop: int = 40
    sub_window: int = 160
    fft_size: int = 256
    n_mels: int = 13
    n_coeffs: int = 13
    stack: int = 4
    f_min: float = 0.0
    f_max: float = 8000.0

    def __post_init__(self):
        if not 0 <= self.pre_emphasis < 1:
            raise ValueError(f"pre_emphasis must be in [0, 1), got {self.pre_emphasis}")
        if self.n_coeffs > self.n_mels:
            raise ValueError("n_coeffs must not exceed n_mels")
        if self.fft_size < self.sub_window:
            raise ValueError("fft_size must be >= sub_window")
        if min(self.sub_hop, self.sub_window, self.n_mels, self.n_coeffs, self.stack) < 1:
            raise ValueError("counts and lengths must be positive")
        if not 0 <= self.f_min < self.f_max:
            raise ValueError("need 0 <= f_min < f_max")

    @property
    def feature_dim(self) -> int:
        return self.n_coeffs * self.stack

    @property
    def min_samples(self) -> int:
        return self.stack * self.sub_hop + self.sub_window - self.sub_hop


@dataclass(frozen=True)
class FeatureMatrix:
    frames: np.ndarray
    frame_rate: float

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def mel(f):
    """Hz to mel, ``2595 * log10(1 + f / 700)``."""
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise ValueError("frequency must be non-negative")
    out = 2595.0 * np.log10(1.0 + f / 700.0)
    return float(out) if out.ndim == 0 else out


def inverse_mel(m):
    m = np.asarray(m, dtype=np.float64)
    out = 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    return float(out) if out.ndim == 0 else out


def pre_emphasize(signal: AudioSignal, alpha: float) -> np.ndarray:
    """First-order high-pass ``y[t] = x[t] - alpha * x[t-1]`` with ``y[0] = x[0]``.

    Returns a bare array: the output can leave [-1, 1] and so is no longer an
    `AudioSignal`.
    """
    if not 0 <= alpha < 1:
        raise ValueError(f"alpha must be in [0, 1), got {alpha}")
    x = signal.samples if isinstance(signal, AudioSignal) else np.asarray(signal, dtype=np.float64)
    y = x.copy()
    y[1:] -= alpha * x[:-1]
    return y


def frame_and_window(samples, config: MfccConfig = MfccConfig()) -> np.ndarray:
    """Cut Hamming-windowed sub-frames every ``sub_hop`` samples.

    Only sub-frames that fit entirely inside the signal are produced, so the
    count is ``(N - sub_window) // sub_hop + 1``.
    """
    x = samples.samples if isinstance(samples, AudioSignal) else np.asarray(samples, dtype=np.float64)
    if x.shape[0] < config.sub_window:
        raise FeatureError(
            f"signal has {x.shape[0]} samples, shorter than one {config.sub_window}-sample window"
        )
    frames = np.lib.stride_tricks.sliding_window_view(x, config.sub_window)[:: config.sub_hop]
    return frames * np.hamming(config.sub_window)


def power_spectrum(sub_frames, fft_size: int) -> np.ndarray:
    """``|DFT_k|^2 / fft_size`` for ``k = 0 .. fft_size/2`` of zero-padded frames."""
    sub_frames = np.asarray(sub_frames, dtype=np.float64)
    if sub_frames.shape[-1] > fft_size:
        raise FeatureError("sub-frame longer than fft_size")
    spectrum = np.fft.rfft(sub_frames, n=fft_size, axis=-1)
    return (spectrum.real**2 + spectrum.imag**2) / fft_size


def mel_edge_frequencies(config: MfccConfig) -> np.ndarray:
    """The ``n_mels + 2`` filter edge frequencies in Hz, equally spaced in mel."""
    points = np.linspace(mel(config.f_min), mel(config.f_max), config.n_mels + 2)
    return inverse_mel(points)


def mel_filterbank(config: MfccConfig = MfccConfig(), sample_rate: int = SUPPORTED_SAMPLE_RATE) -> np.ndarray:
    """Triangular filters, shape ``(n_mels, fft_size // 2 + 1)``.

    Edge frequencies are snapped to bins with ``floor((fft_size + 1) * f / sr)``.
    """
    if config.f_max > sample_rate / 2:
        raise ValueError(f"f_max {config.f_max} exceeds Nyquist {sample_rate / 2}")
    n_bins = config.fft_size // 2 + 1
    edges = mel_edge_frequencies(config)
    bins = np.floor((config.fft_size + 1) * edges / sample_rate).astype(int)
    bins = np.minimum(bins, n_bins - 1)

    fb = np.zeros((config.n_mels, n_bins))
    for m in range(1, config.n_mels + 1):
        left, center, right = bins[m - 1], bins[m], bins[m + 1]
        for k in range(left, center):
            fb[m - 1, k] = (k - left) / (center - left)
        for k in range(center, right):
            fb[m - 1, k] = (right - k) / (right - center)
        if not fb[m - 1].any():
            raise ValueError(
                f"mel filter {m - 1} is empty; fft_size {config.fft_size} is too coarse "
                f"for {config.n_mels} filters"
            )
    return fb


def log_mel_and_dct(power, filterbank, n_coeffs: int) -> np.ndarray:
    """Orthonormal DCT-II of ``log(filterbank @ power + 1e-10)``, first `n_coeffs` kept.

    `power` may be a single spectrum or a stack of spectra (last axis = bins).
    """
    energies = np.asarray(power, dtype=np.float64) @ filterbank.T
    return dct(np.log(energies + LOG_FLOOR), type=2, norm="ortho", axis=-1)[..., :n_coeffs]


def normalize_features(matrix):
    """Per-column z-score over the utterance; constant columns become zero."""
    frames = matrix.frames if isinstance(matrix, FeatureMatrix) else np.asarray(matrix, dtype=np.float64)
    mean = frames.mean(axis=0)
    std = frames.std(axis=0)
    flat = std <= 1e-10 * np.maximum(1.0, np.abs(mean))
    safe = np.where(flat, 1.0, std)
    out = np.where(flat, 0.0, (frames - mean) / safe)
    if isinstance(matrix, FeatureMatrix):
        return FeatureMatrix(out, matrix.frame_rate)
    return out


def extract_features(signal: AudioSignal, config: MfccConfig = MfccConfig(),
                     filterbank: np.ndarray | None = None) -> FeatureMatrix:
    if signal.sample_rate != SUPPORTED_SAMPLE_RATE:
        raise FeatureError(
            f"sample rate {signal.sample_rate} Hz unsupported; resample to {SUPPORTED_SAMPLE_RATE} Hz"
        )
    if len(signal) < config.min_samples:
        raise FeatureError(
            f"signal has {len(signal)} samples; at least {config.min_samples} are needed for one frame"
        )
    if filterbank is None:
        filterbank = mel_filterbank(config, signal.sample_rate)
    emphasized = pre_emphasize(signal, config.pre_emphasis)
    sub = frame_and_window(emphasized, config)
    ceps = log_mel_and_dct(power_spectrum(sub, config.fft_size), filterbank, config.n_coeffs)
    n_frames = ceps.shape[0] // config.stack
    stacked = ceps[: n_frames * config.stack].reshape(n_frames, config.feature_dim)
    rate = signal.sample_rate / (config.sub_hop * config.stack)
    return normalize_features(FeatureMatrix(stacked, rate))


def save_features(matrix: FeatureMatrix, path) -> None:
    frames = np.ascontiguousarray(matrix.frames, dtype="<f4")
    rows, cols = frames.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", rows, cols))
        fh.write(frames.tobytes())


def load_features(path, frame_rate: float = 100.0) -> FeatureMatrix:
    data = Path(path).read_bytes()
    if data[:8] != FEATURE_MAGIC:
        raise FeatureError(f"{path}: bad magic, not a feature cache file")
    if len(data) < 16:
        raise FeatureError(f"{path}: truncated header")
    rows, cols = struct.unpack("<II", data[8:16])
    expected = 16 + 4 * rows * cols
    if len(data) != expected:
        raise FeatureError(f"{path}: expected {expected} bytes, found {len(data)}")
    frames = np.frombuffer(data, dtype="<f4", offset=16).reshape(rows, cols)
    return FeatureMatrix(frames.astype(np.float64), frame_rate)
