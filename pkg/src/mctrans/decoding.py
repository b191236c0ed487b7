"""Greedy and beam-search generation with a length penalty.

Decoders only need an object exposing ``next_token_logprobs(enc, prefixes)``
returning ``[n_prefixes, G]`` log-probabilities; :class:`mctrans.model.Model`
implements it, and tests use small rigged tables.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import BOS, EOS, PAD, make_batches
from .metrics import bleu, rouge_l

DEFAULT_MAX_LEN = 60
BANNED = (PAD, BOS)


def length_penalty(length: int, alpha: float) -> float:
    """((5 + length) / 6) ** alpha."""
    return ((5.0 + length) / 6.0) ** alpha


@dataclass
class Hypothesis:
    tokens: list            # starts with <bos>; ends with <eos> when finished
    logprob: float
    finished: bool = False
    score: float = 0.0

    @property
    def output(self) -> list:
        body = self.tokens[1:]
        return body[:-1] if self.finished else body

    @property
    def truncated(self) -> bool:
        return not self.finished


def _ban(lp: np.ndarray) -> np.ndarray:
    lp = np.array(lp, dtype=np.float64, copy=True)
    lp[:, list(BANNED)] = -np.inf
    return lp


def greedy_decode(model, enc_out, max_len: int = DEFAULT_MAX_LEN) -> list:
    """Append the argmax token (lowest id on ties) until <eos> or ``max_len``
    tokens; returns the ids without <bos>/<eos>."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    seq = [BOS]
    for _ in range(max_len):
        lp = _ban(model.next_token_logprobs(enc_out, np.array([seq])))[0]
        tok = int(np.argmax(lp))
        if tok == EOS:
            break
        seq.append(tok)
    return seq[1:]


def beam_search(model, enc_out, width: int = 5, alpha: float = 0.0,
                max_len: int = DEFAULT_MAX_LEN, return_hypothesis: bool = False):
    """Beam search over cumulative log-probabilities.

    Widths 0 and 1 both give the greedy path. Hypotheses ending in <eos> are
    parked; the result is the highest length-penalized score among parked
    hypotheses and, if ``max_len`` ran out, the surviving unfinished ones
    (flagged via ``Hypothesis.truncated``). Ties go to the lexicographically
    smaller token sequence.
    """
    if not 0 <= width:
        raise ValueError("beam width must be >= 0")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    width = max(width, 1)
    alive = [Hypothesis([BOS], 0.0)]
    finished: list[Hypothesis] = []
    for step in range(1, max_len + 1):
        alive.sort(key=lambda h: h.tokens)
        lp = _ban(model.next_token_logprobs(enc_out, np.array([h.tokens for h in alive])))
        cum = np.array([h.logprob for h in alive])[:, None] + lp
        flat = cum.reshape(-1)
        order = np.argsort(-flat, kind="stable")[:width]
        vocab = lp.shape[1]
        next_alive = []
        for k in order:
            if not np.isfinite(flat[k]):
                continue
            h = alive[k // vocab]
            tok = int(k % vocab)
            hyp = Hypothesis(h.tokens + [tok], float(flat[k]))
            if tok == EOS:
                hyp.finished = True
                hyp.score = hyp.logprob / length_penalty(step, alpha)
                finished.append(hyp)
            else:
                next_alive.append(hyp)
        alive = next_alive
        if not alive:
            break
    for h in alive:
        h.score = h.logprob / length_penalty(max_len, alpha)
    pool = finished + alive
    best = pool[0]
    for h in pool[1:]:
        if h.score > best.score or (h.score == best.score and h.tokens < best.tokens):
            best = h
    return best if return_hypothesis else best.output


def greedy_decode_batch(model, enc_out, max_len: int = DEFAULT_MAX_LEN) -> list:
    """Greedy decoding of a whole encoded batch at once."""
    n = enc_out.batch_size
    seqs = np.full((n, 1), BOS, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    for _ in range(max_len):
        lp = _ban(model.next_token_logprobs(enc_out, seqs))
        tok = np.argmax(lp, axis=1)
        tok[done] = PAD
        done |= tok == EOS
        seqs = np.concatenate([seqs, tok[:, None]], axis=1)
        if done.all():
            break
    out = []
    for row in seqs[:, 1:]:
        ids = []
        for t in row:
            if t in (EOS, PAD):
                break
            ids.append(int(t))
        out.append(ids)
    return out


def translate_corpus(model, corpus, vocab, width: int = 1, alpha: float = 0.0,
                     max_len: int = DEFAULT_MAX_LEN, batch_size: int = 64) -> list:
    """Token-string translations in corpus order."""
    results = []
    for batch in make_batches(corpus, None, batch_size, shuffle=False):
        enc = model.encode(batch.features, batch.channel_masks, mode="infer")
        if width <= 1:
            ids = greedy_decode_batch(model, enc, max_len)
        else:
            ids = [beam_search(model, enc.take([b]), width, alpha, max_len)
                   for b in range(batch.size)]
        results.extend(vocab.decode(s) for s in ids)
    return results


def evaluate_greedy(model, corpus, vocab, max_len: int = DEFAULT_MAX_LEN) -> tuple:
    """(BLEU-4, ROUGE-L) of greedy translations against the corpus targets."""
    hyps = translate_corpus(model, corpus, vocab, 1, 0.0, max_len)
    pairs = [(h, s.target) for h, s in zip(hyps, corpus)]
    return bleu(pairs), rouge_l(pairs)
