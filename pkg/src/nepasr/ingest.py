"""WAV input/output, corpus manifests and the numeric-transcription filter."""

from __future__ import annotations

import re
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SUPPORTED_SAMPLE_RATE = 16000

_PCM16_SCALE = 32768.0
_DIGITS = re.compile(r"[0-9०-९]")


class WavFormatError(ValueError):
    """Raised when a WAV file is not mono 16-bit PCM RIFF/WAVE."""


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class AudioSignal:
    """Mono waveform with samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"samples must be 1-D, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if samples.size and np.max(np.abs(samples)) > 1.0:
            raise ValueError("samples must lie in [-1, 1]")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    speaker_id: str
    transcription: str


def load_wav(path) -> AudioSignal:
    """Read a mono PCM16 WAV file, scaling integer samples by 1/32768."""
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        msg = str(exc)
        if msg.startswith("unknown format"):
            raise WavFormatError(f"{path}: audio_format is not PCM ({msg})") from exc
        raise WavFormatError(f"{path}: malformed header ({msg})") from exc
    except EOFError as exc:
        raise WavFormatError(f"{path}: malformed header (truncated file)") from exc
    if channels != 1:
        raise WavFormatError(f"{path}: channel count is {channels}, expected 1")
    if width != 2:
        raise WavFormatError(f"{path}: bit depth is {8 * width}, expected 16")
    ints = np.frombuffer(raw, dtype="<i2")
    return AudioSignal(ints.astype(np.float64) / _PCM16_SCALE, rate)


def save_wav(signal: AudioSignal, path) -> None:
    """Write `signal` as mono PCM16; +1.0 saturates to 32767."""
    ints = np.clip(np.round(signal.samples * _PCM16_SCALE), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(signal.sample_rate))
        wf.writeframes(ints.tobytes())


def parse_manifest(path) -> list[ManifestEntry]:
    """Parse a UTF-8 TSV manifest of ``utterance_id [speaker_id] transcription``.

    Two-column lines carry no speaker and get an empty ``speaker_id``.
    Blank lines are ignored.
    """
    entries = []
    seen = set()
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.split("\n"), start=1):
        line = line.rstrip("\r")
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) < 2:
            raise ManifestError(f"{path}:{lineno}: expected at least 2 tab-separated columns")
        if len(cols) == 2:
            uid, speaker, transcription = cols[0], "", cols[1]
        else:
            uid, speaker, transcription = cols[0], cols[1], "\t".join(cols[2:])
        if not uid:
            raise ManifestError(f"{path}:{lineno}: empty utterance_id")
        if uid in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate utterance_id {uid!r}")
        seen.add(uid)
        entries.append(ManifestEntry(uid, speaker, transcription))
    return entries


def write_manifest(entries, path) -> None:
    lines = [f"{e.utterance_id}\t{e.speaker_id}\t{e.transcription}\n" for e in entries]
    Path(path).write_text("".join(lines), encoding="utf-8")


def has_digit(text: str) -> bool:
    return _DIGITS.search(text) is not None


def filter_numeric(entries):
    """Drop entries whose transcription contains an ASCII or Devanagari digit."""
    return [e for e in entries if not has_digit(e.transcription)]
