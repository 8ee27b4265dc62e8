"""Levenshtein distance and character error rate over Unicode code points."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class EvalResult:
    reference: str
    hypothesis: str
    edits: int
    cer: float
    empty_reference: bool = False


def edit_distance(ref: str, hyp: str) -> int:
    """Minimum unit-cost insertions, deletions and substitutions turning `ref` into `hyp`."""
    if len(ref) < len(hyp):
        ref, hyp = hyp, ref
    prev = list(range(len(hyp) + 1))
    for i, rc in enumerate(ref, start=1):
        cur = [i]
        for j, hc in enumerate(hyp, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (rc != hc)))
        prev = cur
    return prev[-1]


def score(ref: str, hyp: str) -> EvalResult:
    """CER is ``edits / len(ref)``.

    An empty reference has no defined rate; it is scored as ``len(hyp) / 1``
    and flagged with ``empty_reference``.
    """
    edits = edit_distance(ref, hyp)
    return EvalResult(ref, hyp, edits, edits / max(1, len(ref)), empty_reference=not ref)


def cer(ref: str, hyp: str) -> float:
    return score(ref, hyp).cer


def aggregate_cer(results) -> float:
    """Corpus CER: total edits over total reference length (not a mean of rates)."""
    results = list(results)
    total_ref = sum(len(r.reference) for r in results)
    total_edits = sum(r.edits for r in results)
    if total_ref == 0:
        return 0.0 if total_edits == 0 else float(total_edits)
    return total_edits / total_ref
