"""Corpus BLEU-4 and ROUGE-L on whitespace-tokenized text."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence, Union


@dataclass(frozen=True)
class EvalPair:
    hypothesis: tuple
    reference: tuple

    @classmethod
    def from_strings(cls, hyp: str, ref: str) -> "EvalPair":
        return cls(tuple(hyp.split()), tuple(ref.split()))


PairLike = Union[EvalPair, tuple]


def _pairs(corpus: Iterable[PairLike]) -> list:
    out = []
    for p in corpus:
        if isinstance(p, EvalPair):
            out.append(p)
        else:
            h, r = p
            h = h.split() if isinstance(h, str) else h
            r = r.split() if isinstance(r, str) else r
            out.append(EvalPair(tuple(h), tuple(r)))
    if not out:
        raise ValueError("empty evaluation corpus")
    return out


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(corpus: Iterable[PairLike], max_n: int = 4) -> float:
    """Corpus BLEU in [0, 100]: clipped n-gram precisions, geometric mean,
    brevity penalty; no smoothing, so any empty n-gram order gives 0."""
    pairs = _pairs(corpus)
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for p in pairs:
        hyp_len += len(p.hypothesis)
        ref_len += len(p.reference)
        for n in range(1, max_n + 1):
            h = _ngrams(p.hypothesis, n)
            r = _ngrams(p.reference, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(p.hypothesis) - n + 1, 0)
    if min(matches) == 0 or min(totals) == 0:
        return 0.0
    log_prec = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_n
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_prec)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(corpus: Iterable[PairLike], beta: float = 1.2) -> float:
    """Mean sentence-level LCS F-score (recall weighted by beta²), × 100."""
    pairs = _pairs(corpus)
    total = 0.0
    for p in pairs:
        lcs = lcs_length(p.hypothesis, p.reference)
        if lcs == 0:
            continue
        prec = lcs / len(p.hypothesis)
        rec = lcs / len(p.reference)
        b2 = beta * beta
        total += (1 + b2) * prec * rec / (rec + b2 * prec)
    return 100.0 * total / len(pairs)
