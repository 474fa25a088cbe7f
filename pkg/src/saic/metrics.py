"""BLEU, repetition rate and the aggregate evaluation report."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

from .errors import ContractError

SMOOTH_EPS = 1e-9


def ngrams(seq, n: int) -> Counter:
    seq = tuple(seq)
    return Counter(seq[i:i + n] for i in range(len(seq) - n + 1))


def _stats(candidate, references, max_n):
    """Clipped matches and totals per order, plus candidate/closest-ref lengths."""
    match, total = [0] * max_n, [0] * max_n
    for n in range(1, max_n + 1):
        cand = ngrams(candidate, n)
        best = Counter()
        for ref in references:
            best |= ngrams(ref, n)
        match[n - 1] = sum(min(c, best[g]) for g, c in cand.items())
        total[n - 1] = max(len(candidate) - n + 1, 0)
    c = len(candidate)
    r = min((abs(len(ref) - c), len(ref)) for ref in references)[1]
    return match, total, c, r


def _combine(match, total, c, r, max_n) -> float:
    if c == 0 or match[0] == 0:
        return 0.0
    # orders longer than the candidate have no n-grams and are left out
    orders = [(m, t) for m, t in zip(match, total) if t > 0]
    log_p = sum(math.log(m / t if m > 0 else SMOOTH_EPS) for m, t in orders)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p / len(orders))


def bleu(candidate, references, max_n: int = 4) -> float:
    """Sentence BLEU: geometric mean of clipped n-gram precisions times the
    brevity penalty.  Zero precisions are floored at 1e-9; no unigram match
    (or an empty candidate) scores exactly 0.  Candidates shorter than
    ``max_n`` average over the orders they actually have."""
    references = [list(r) for r in references]
    if not references:
        raise ContractError("need at least one reference")
    return _combine(*_stats(list(candidate), references, max_n), max_n)


def corpus_bleu(candidates, references_list, max_n: int = 4) -> float:
    """Corpus BLEU with counts pooled over all sentences."""
    M, T, C, R = [0] * max_n, [0] * max_n, 0, 0
    for cand, refs in zip(candidates, references_list):
        m, t, c, r = _stats(list(cand), [list(x) for x in refs], max_n)
        M = [a + b for a, b in zip(M, m)]
        T = [a + b for a, b in zip(T, t)]
        C += c
        R += r
    return _combine(M, T, C, R, max_n)


def repetition_rate(seq) -> float:
    """Fraction of adjacent token pairs that are duplicates."""
    pairs = len(seq) - 1
    if pairs < 1:
        return 0.0
    return sum(a == b for a, b in zip(seq, seq[1:])) / pairs


@dataclass
class EvalReport:
    exact_match: float
    bleu4: float
    repetition_rate: float
    mean_length: float
    n: int = 0

    def row(self) -> dict:
        return {"n": self.n, "exact_match": f"{self.exact_match:.4f}", "bleu4": f"{self.bleu4:.4f}",
                "repetition_rate": f"{self.repetition_rate:.4f}", "mean_length": f"{self.mean_length:.3f}"}


def evaluate(outputs, references) -> EvalReport:
    """Aggregate metrics of ``outputs`` against single references."""
    outputs = [list(o) for o in outputs]
    references = [list(r) for r in references]
    if not outputs or len(outputs) != len(references):
        raise ContractError("evaluate needs equally many (>0) outputs and references")
    dup = sum(sum(a == b for a, b in zip(o, o[1:])) for o in outputs)
    pairs = sum(max(len(o) - 1, 0) for o in outputs)
    return EvalReport(
        exact_match=sum(o == r for o, r in zip(outputs, references)) / len(outputs),
        bleu4=corpus_bleu(outputs, [[r] for r in references]),
        repetition_rate=dup / pairs if pairs else 0.0,
        mean_length=sum(map(len, outputs)) / len(outputs),
        n=len(outputs),
    )
