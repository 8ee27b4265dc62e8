"""Trimming of leading and trailing silence by windowed mean amplitude."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ingest import AudioSignal


@dataclass(frozen=True)
class ClipConfig:
    window_length: int = 500

    def __post_init__(self):
        if self.window_length < 1:
            raise ValueError(f"window_length must be >= 1, got {self.window_length}")


def clip_bounds(samples: np.ndarray, window_length: int) -> tuple[int, int]:
    """Return the ``[start, end)`` range kept by `clip_silence`.

    Windows are laid on the grids ``0, d, 2d, ...`` (head scan) and
    ``N-d, N-2d, ...`` (tail scan). A window is speech when its mean absolute
    amplitude is strictly greater than that of the whole signal. Both scans
    run against the original samples and the original global mean.
    """
    n = samples.shape[0]
    d = window_length
    if n < d:
        return 0, n
    mag = np.abs(samples.astype(np.float64))
    global_mean = mag.mean()

    start = 0
    for idx in range(0, n - d + 1, d):
        if mag[idx:idx + d].mean() > global_mean:
            start = idx
            break

    end = n
    for idx in range(n - d, -1, -d):
        if mag[idx:idx + d].mean() > global_mean:
            end = idx + d
            break
    if end <= start:
        # head and tail grids disagree (speech straddling a head-grid boundary)
        return 0, n
    return start, end


def clip_silence(signal: AudioSignal, config: ClipConfig = ClipConfig()) -> AudioSignal:
    start, end = clip_bounds(signal.samples, config.window_length)
    if (start, end) == (0, len(signal)):
        return signal
    return AudioSignal(signal.samples[start:end], signal.sample_rate)
