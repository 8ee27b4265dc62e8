"""Binary checkpoint format.

Layout (all integers 32-bit little-endian unsigned)::

    b"NPASR001"
    len, network config as UTF-8 ``key=value`` lines
    len, vocabulary as UTF-8, one token per line
    repeated until EOF:
        len, array name (UTF-8)
        rank, dims...
        values as little-endian float32, row-major

Arrays are the trainable parameters followed by batchnorm running
statistics (when set).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .network import AcousticModel, NetworkConfig
from .textcodec import Vocabulary, vocab_from_text, vocab_to_text

MAGIC = b"NPASR001"


class CheckpointError(ValueError):
    pass


def _blob(data: bytes) -> bytes:
    return struct.pack("<I", len(data)) + data


def save_checkpoint(model: AcousticModel, vocab: Vocabulary, path) -> None:
    if len(vocab) != model.config.vocab_size:
        raise CheckpointError(
            f"vocabulary has {len(vocab)} tokens but the model outputs {model.config.vocab_size}"
        )
    parts = [MAGIC, _blob(model.config.to_text().encode()), _blob(vocab_to_text(vocab).encode())]
    for name, value in model.state_arrays().items():
        parts.append(_blob(name.encode()))
        parts.append(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def blob(self) -> bytes:
        return self.take(self.u32())

    @property
    def done(self) -> bool:
        return self.pos == len(self.data)


def load_checkpoint(path, vocab: Vocabulary | None = None):
    """Return ``(model, vocab)``.

    If `vocab` is given the stored vocabulary must match it exactly.
    """
    reader = _Reader(Path(path).read_bytes(), path)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not an NPASR001 checkpoint")
    try:
        config = NetworkConfig.from_text(reader.blob().decode())
        stored_vocab = vocab_from_text(reader.blob().decode())
    except (UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    if len(stored_vocab) != config.vocab_size:
        raise CheckpointError(
            f"{path}: vocabulary has {len(stored_vocab)} tokens, config says {config.vocab_size}"
        )
    if vocab is not None and vocab.tokens != stored_vocab.tokens:
        raise CheckpointError(
            f"{path}: checkpoint vocabulary ({len(stored_vocab)} tokens) does not match "
            f"the expected vocabulary ({len(vocab)} tokens)"
        )

    arrays = {}
    while not reader.done:
        name = reader.blob().decode()
        rank = reader.u32()
        dims = struct.unpack(f"<{rank}I", reader.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(dims)
        arrays[name] = values.astype(np.float64)

    model = AcousticModel(config)
    try:
        model.load_state_arrays(arrays)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return model, stored_vocab
