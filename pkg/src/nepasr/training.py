"""Dataset split, batching, Adam, the epoch loop and evaluation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ctc import (beam_search_decode, ctc_loss_and_grad, greedy_decode,
                  log_softmax, min_frames)
from .metrics import aggregate_cer, score
from .network import AcousticModel, ParameterStore
from .textcodec import Vocabulary, decode_ids

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "train_loss", "test_loss", "test_cer")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 80
    max_epochs: int = 58
    seed: int = 1234

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")


@dataclass(frozen=True)
class TrainingExample:
    features: np.ndarray
    labels: tuple
    utterance_id: str
    transcription: str = ""

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class Batch:
    features: np.ndarray  # (B, T_max, D), zero rows past each true length
    lengths: np.ndarray
    labels: tuple
    utterance_ids: tuple

    def __len__(self):
        return len(self.lengths)


def split_dataset(entries, train_fraction: float = 0.95, seed: int = 1234, by_speaker: bool = False):
    """Seeded shuffle, then cut at ``floor(n * train_fraction)``.

    With ``by_speaker`` whole speakers are assigned to one side, cutting the
    shuffled speaker list so that roughly `train_fraction` of the utterances
    land in training.
    """
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must be in (0, 1)")
    entries = list(entries)
    if len(entries) < 2:
        raise ValueError("need at least 2 entries to split")
    rng = np.random.default_rng(seed)
    if not by_speaker:
        order = rng.permutation(len(entries))
        n_train = min(max(int(math.floor(len(entries) * train_fraction)), 1), len(entries) - 1)
        return [entries[i] for i in order[:n_train]], [entries[i] for i in order[n_train:]]

    speakers = sorted({e.speaker_id for e in entries})
    if len(speakers) < 2:
        raise ValueError("speaker-disjoint split needs at least 2 speakers")
    speakers = [speakers[i] for i in rng.permutation(len(speakers))]
    target = len(entries) * train_fraction
    chosen, count = set(), 0
    counts = {s: 0 for s in speakers}
    for e in entries:
        counts[e.speaker_id] += 1
    for s in speakers[:-1]:
        if count >= target:
            break
        chosen.add(s)
        count += counts[s]
    train = [e for e in entries if e.speaker_id in chosen]
    test = [e for e in entries if e.speaker_id not in chosen]
    return train, test


def adam_step(params: ParameterStore, config: TrainConfig, step_count: int) -> None:
    """In-place Adam update with bias correction, using each parameter's moment buffers."""
    if step_count < 1:
        raise ValueError("step_count must be >= 1")
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** step_count
    c2 = 1.0 - b2 ** step_count
    for p in params.values():
        g = p.grad
        if config.weight_decay:
            g = g + config.weight_decay * p.value
        p.m *= b1
        p.m += (1.0 - b1) * g
        p.v *= b2
        p.v += (1.0 - b2) * g * g
        p.value -= config.learning_rate * (p.m / c1) / (np.sqrt(p.v / c2) + config.epsilon)


def filter_feasible(examples, stride: int = 1):
    """Drop examples whose audio is too short for their label sequence."""
    kept = []
    for ex in examples:
        frames = -(-ex.num_frames // stride)
        if frames < min_frames(ex.labels):
            log.warning("dropping %s: %d frames cannot align %d labels",
                        ex.utterance_id, frames, len(ex.labels))
            continue
        kept.append(ex)
    return kept


def pad_batch(examples) -> Batch:
    lengths = np.array([ex.num_frames for ex in examples])
    dim = examples[0].features.shape[1]
    feats = np.zeros((len(examples), int(lengths.max()), dim))
    for i, ex in enumerate(examples):
        feats[i, : ex.num_frames] = ex.features
    return Batch(feats, lengths, tuple(tuple(ex.labels) for ex in examples),
                 tuple(ex.utterance_id for ex in examples))


def make_batches(examples, batch_size: int, seed: int | None = None) -> list[Batch]:
    """Sort by length (ties by id), chunk into batches, optionally shuffle batch order."""
    ordered = sorted(examples, key=lambda ex: (ex.num_frames, ex.utterance_id))
    batches = [pad_batch(ordered[i:i + batch_size]) for i in range(0, len(ordered), batch_size)]
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(batches))
        batches = [batches[i] for i in order]
    return batches


def batch_loss_and_grad(model: AcousticModel, batch: Batch, mode: str = "train", rng=None):
    """Per-example CTC losses and the logit gradient of their batch mean."""
    logits = model.forward_batch(batch.features, batch.lengths, mode=mode, rng=rng)
    out_lengths = model.output_lengths(batch.lengths)
    blank = model.config.vocab_size - 1
    dlogits = np.zeros_like(logits)
    losses = np.empty(len(batch))
    for b, labels in enumerate(batch.labels):
        n = int(out_lengths[b])
        losses[b], grad = ctc_loss_and_grad(log_softmax(logits[b, :n]), labels, blank)
        dlogits[b, :n] = grad / len(batch)
    return losses, dlogits


def train_step(model: AcousticModel, batch: Batch, config: TrainConfig) -> np.ndarray:
    losses, dlogits = batch_loss_and_grad(model, batch, mode="train")
    if not np.all(np.isfinite(losses)):
        raise FloatingPointError("non-finite CTC loss")
    model.params.zero_grad()
    model.backward(dlogits)
    model.optimizer_steps += 1
    adam_step(model.params, config, model.optimizer_steps)
    return losses


def train_epoch(model: AcousticModel, batches, config: TrainConfig) -> float:
    """One pass over `batches`; returns the example-weighted mean training loss."""
    batches = list(batches)
    if not batches:
        raise ValueError("train_epoch needs at least one batch")
    total, count = 0.0, 0
    for batch in batches:
        losses = train_step(model, batch, config)
        total += float(losses.sum())
        count += len(losses)
    return total / count


def mean_loss(model: AcousticModel, examples, batch_size: int = 80) -> float:
    """Inference-mode mean CTC loss."""
    examples = list(examples)
    if not examples:
        return math.nan
    total = 0.0
    for batch in make_batches(examples, batch_size):
        losses, _ = batch_loss_and_grad(model, batch, mode="infer")
        total += float(losses.sum())
    return total / len(examples)


def transcribe_posteriors(posteriors, vocab: Vocabulary, beam_width: int | None) -> str:
    if beam_width is None:
        return greedy_decode(posteriors, vocab)
    return beam_search_decode(posteriors, vocab, beam_width)


def evaluate(model, examples, vocab: Vocabulary, beam_width: int | None = 50):
    """Decode every example in inference mode.

    Returns ``(aggregate_cer, results)``; ``beam_width=None`` means greedy.
    """
    examples = list(examples)
    if not examples:
        raise ValueError("evaluate needs at least one example")
    results = []
    for ex in examples:
        posteriors = model.forward(ex.features, mode="infer")
        reference = ex.transcription or decode_ids(ex.labels, vocab)
        results.append(score(reference, transcribe_posteriors(posteriors, vocab, beam_width)))
    return aggregate_cer(results), results


def fit(model: AcousticModel, train_examples, test_examples, vocab: Vocabulary,
        config: TrainConfig, out_dir, beam_width: int | None = 50):
    """Train for ``config.max_epochs`` epochs, checkpointing every epoch.

    Each epoch writes ``epoch_NNN.ckpt``, refreshes ``best.ckpt`` when the
    held-out loss reaches a new minimum, and appends a row to ``metrics.csv``.
    Returns the list of metric rows.
    """
    from .checkpoint import save_checkpoint

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"
    with open(metrics_path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerow(METRICS_HEADER)

    held_out = list(test_examples) or list(train_examples)
    best = math.inf
    rows = []
    for epoch in range(1, config.max_epochs + 1):
        batches = make_batches(train_examples, config.batch_size, seed=config.seed + epoch)
        train_loss = train_epoch(model, batches, config)
        test_loss = mean_loss(model, held_out, config.batch_size)
        test_cer, _ = evaluate(model, held_out, vocab, beam_width)
        row = (epoch, train_loss, test_loss, test_cer)
        rows.append(row)
        with open(metrics_path, "a", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerow([epoch] + [repr(float(v)) for v in row[1:]])
        save_checkpoint(model, vocab, out / f"epoch_{epoch:03d}.ckpt")
        if test_loss < best:
            best = test_loss
            save_checkpoint(model, vocab, out / "best.ckpt")
        log.info("epoch %d train_loss %.4f test_loss %.4f test_cer %.4f", *row)
    return rows

