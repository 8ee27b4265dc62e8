"""Connectionist temporal classification: loss, gradient and decoders.

All probability arithmetic happens in log space. Posterior matrices are
``(T, V)`` with one distribution per frame; label sequences never contain the
blank id.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .textcodec import Vocabulary, decode_ids

NEG_INF = -math.inf


class CTCInfeasibleError(ValueError):
    """The target needs more frames than the posterior matrix has."""


def logaddexp(a: float, b: float) -> float:
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def collapse(path, blank_id: int) -> list[int]:
    """Merge runs of equal tokens, then drop blanks."""
    out = []
    prev = None
    for tok in path:
        tok = int(tok)
        if tok != prev and tok != blank_id:
            out.append(tok)
        prev = tok
    return out


def min_frames(target) -> int:
    """Shortest alignment length for `target`: one frame per label plus a blank between repeats."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _check_target(num_frames: int, target, blank_id: int) -> list[int]:
    target = [int(t) for t in target]
    if blank_id in target:
        raise ValueError("target must not contain the blank id")
    need = min_frames(target)
    if num_frames < need:
        raise CTCInfeasibleError(
            f"target of length {len(target)} needs at least {need} frames, got {num_frames}"
        )
    return target


def _extend(target, blank_id):
    ext = np.full(2 * len(target) + 1, blank_id, dtype=np.int64)
    ext[1::2] = target
    # a label may be reached directly from two slots back unless it repeats the label there
    skip = np.zeros(ext.shape[0], dtype=bool)
    skip[2:] = (ext[2:] != blank_id) & (ext[2:] != ext[:-2])
    return ext, skip


def _forward_backward(log_probs: np.ndarray, target, blank_id: int):
    """Log alpha (emission at t included) and log beta (emission at t excluded)."""
    T = log_probs.shape[0]
    ext, skip = _extend(target, blank_id)
    S = ext.shape[0]
    emit = log_probs[:, ext]  # (T, S)

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc

    if S > 1:
        log_p = np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    else:
        log_p = alpha[T - 1, 0]
    return alpha, beta, float(log_p), ext


def ctc_loss_and_grad(log_probs: np.ndarray, target, blank_id: int):
    """Loss ``-log p(target | X)`` and its gradient w.r.t. the pre-softmax logits.

    `log_probs` is a ``(T, V)`` matrix of log-softmax outputs. The gradient is
    ``softmax - occupancy`` where ``occupancy[t, k]`` is the posterior mass of
    alignments emitting `k` at frame `t`.
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    T, V = log_probs.shape
    target = _check_target(T, target, blank_id)
    with np.errstate(invalid="ignore", divide="ignore"):
        alpha, beta, log_p, ext = _forward_backward(log_probs, target, blank_id)
        if log_p == NEG_INF:
            raise FloatingPointError("CTC target has zero probability under the posteriors")
        occ_ext = np.exp(alpha + beta - log_p)
    occupancy = np.zeros((T, V))
    for s, k in enumerate(ext):
        occupancy[:, k] += occ_ext[:, s]
    grad = np.exp(log_probs) - occupancy
    return -log_p, grad


def ctc_loss(posteriors, target, blank_id: int) -> float:
    """Negative log of the summed probability of every alignment collapsing to `target`."""
    posteriors = np.asarray(posteriors, dtype=np.float64)
    with np.errstate(divide="ignore"):
        log_probs = np.log(posteriors)
    target = _check_target(posteriors.shape[0], target, blank_id)
    with np.errstate(invalid="ignore"):
        _, _, log_p, _ = _forward_backward(log_probs, target, blank_id)
    return -log_p


def ctc_grad(posteriors, target, blank_id: int) -> np.ndarray:
    """Gradient of `ctc_loss` w.r.t. the logits that produced `posteriors` by softmax."""
    posteriors = np.asarray(posteriors, dtype=np.float64)
    with np.errstate(divide="ignore"):
        log_probs = np.log(posteriors)
    return ctc_loss_and_grad(log_probs, target, blank_id)[1]


def best_path(posteriors) -> np.ndarray:
    """Per-frame argmax; ties go to the lowest token id."""
    return np.argmax(np.asarray(posteriors), axis=1)


def greedy_decode(posteriors, vocab: Vocabulary) -> str:
    return decode_ids(collapse(best_path(posteriors), vocab.blank_id), vocab)


@dataclass
class BeamHypothesis:
    prefix: tuple
    log_p_blank: float = NEG_INF
    log_p_nonblank: float = NEG_INF

    @property
    def total(self) -> float:
        return logaddexp(self.log_p_blank, self.log_p_nonblank)


def _rank(hyp: BeamHypothesis):
    return (-hyp.total, len(hyp.prefix), hyp.prefix)


def beam_search(log_probs, beam_width: int, blank_id: int) -> list[BeamHypothesis]:
    """Prefix beam search over a ``(T, V)`` log-posterior matrix.

    Alignment mass is merged per labeling prefix, split by whether the
    alignment currently ends in blank. After each frame the `beam_width`
    prefixes with the largest total mass survive (ties: shorter prefix, then
    smaller token ids). Returns the final beam, best first.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    log_probs = np.asarray(log_probs, dtype=np.float64)
    V = log_probs.shape[1]
    beam = [BeamHypothesis((), 0.0, NEG_INF)]
    for row in log_probs:
        row = row.tolist()
        nxt: dict[tuple, BeamHypothesis] = {}

        def slot(prefix):
            hyp = nxt.get(prefix)
            if hyp is None:
                hyp = nxt[prefix] = BeamHypothesis(prefix)
            return hyp

        for hyp in beam:
            prefix = hyp.prefix
            total = hyp.total
            last = prefix[-1] if prefix else None
            same = slot(prefix)
            same.log_p_blank = logaddexp(same.log_p_blank, total + row[blank_id])
            for k in range(V):
                if k == blank_id:
                    continue
                lp = row[k]
                if lp == NEG_INF:
                    continue
                if k == last:
                    same.log_p_nonblank = logaddexp(same.log_p_nonblank, hyp.log_p_nonblank + lp)
                    if hyp.log_p_blank != NEG_INF:
                        ext = slot(prefix + (k,))
                        ext.log_p_nonblank = logaddexp(ext.log_p_nonblank, hyp.log_p_blank + lp)
                else:
                    ext = slot(prefix + (k,))
                    ext.log_p_nonblank = logaddexp(ext.log_p_nonblank, total + lp)
        beam = sorted(nxt.values(), key=_rank)[:beam_width]
    return beam


def beam_search_decode(posteriors, vocab: Vocabulary, beam_width: int = 50) -> str:
    posteriors = np.asarray(posteriors, dtype=np.float64)
    with np.errstate(divide="ignore"):
        log_probs = np.log(posteriors)
    best = beam_search(log_probs, beam_width, vocab.blank_id)[0]
    return decode_ids(best.prefix, vocab)
