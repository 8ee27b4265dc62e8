"""Character vocabulary: ``<pad>``, ``<unk>``, corpus characters by code point, ``<blank>``."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

PAD = "<pad>"
UNK = "<unk>"
BLANK = "<blank>"
_SPECIALS = (PAD, UNK, BLANK)


class VocabularyError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        tokens = tuple(self.tokens)
        if len(tokens) < 3 or tokens[0] != PAD or tokens[1] != UNK or tokens[-1] != BLANK:
            raise VocabularyError("vocabulary must be <pad>, <unk>, characters..., <blank>")
        if len(set(tokens)) != len(tokens):
            raise VocabularyError("vocabulary tokens must be unique")
        for tok in tokens[2:-1]:
            if len(tok) != 1:
                raise VocabularyError(f"character token {tok!r} is not a single code point")
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(tokens[2:-1], start=2)})

    pad_id = 0
    unk_id = 1

    @property
    def blank_id(self) -> int:
        return len(self.tokens) - 1

    def __len__(self):
        return len(self.tokens)

    def id_of(self, char: str) -> int:
        return self._index.get(char, self.unk_id)

    @property
    def characters(self) -> tuple[str, ...]:
        return self.tokens[2:-1]


def build_vocab(corpus) -> Vocabulary:
    corpus = list(corpus)
    if not corpus:
        raise VocabularyError("cannot build a vocabulary from an empty corpus")
    chars = sorted(set("".join(corpus)))
    return Vocabulary((PAD, UNK, *chars, BLANK))


def encode(text: str, vocab: Vocabulary) -> list[int]:
    return [vocab.id_of(ch) for ch in text]


def decode_ids(ids, vocab: Vocabulary) -> str:
    n = len(vocab)
    out = []
    for i in ids:
        i = int(i)
        if not 0 <= i < n:
            raise VocabularyError(f"token id {i} out of range for vocabulary of size {n}")
        if i == vocab.pad_id or i == vocab.blank_id:
            continue
        out.append("�" if i == vocab.unk_id else vocab.tokens[i])
    return "".join(out)


def vocab_to_text(vocab: Vocabulary) -> str:
    return "".join(tok + "\n" for tok in vocab.tokens)


def vocab_from_text(text: str) -> Vocabulary:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return Vocabulary(tuple(lines))


def save_vocab(vocab: Vocabulary, path) -> None:
    Path(path).write_text(vocab_to_text(vocab), encoding="utf-8")


def load_vocab(path) -> Vocabulary:
    return vocab_from_text(Path(path).read_text(encoding="utf-8"))
