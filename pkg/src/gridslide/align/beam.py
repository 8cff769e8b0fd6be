"""Greedy and length-normalized beam decoding over a next-token log-prob function."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from gridslide.errors import ConfigError

# prefixes (all of equal length) -> (n_prefixes, V) next-token log-probabilities
StepFn = Callable[[list[list[int]]], np.ndarray]


@dataclass
class Hypothesis:
    tokens: list[int]  # generated tokens (without the start token)
    logprob: float

    @property
    def score(self) -> float:
        """Mean log-probability per generated token (length exponent 1)."""
        return self.logprob / max(len(self.tokens), 1)


def greedy_decode(step: StepFn, bos: int, eos: int, max_len: int) -> Hypothesis:
    seq, total = [], 0.0
    for _ in range(max_len):
        lp = np.asarray(step([[bos] + seq]))[0]
        tok = int(np.argmax(lp))
        seq.append(tok)
        total += float(lp[tok])
        if tok == eos:
            break
    return Hypothesis(seq, total)


def beam_search(step: StepFn, bos: int, eos: int, beams: int = 5, max_len: int = 128) -> Hypothesis:
    """Single-group beam search ranked by cumulative log-prob during the search
    and by length-normalized log-prob among finished hypotheses.

    The greedy hypothesis seeds the finished pool, so the result never scores
    below greedy decoding; with ``beams=1`` the search follows the greedy path
    exactly. Candidate ties resolve to the earlier beam, then the lower token id.
    """
    if beams < 1:
        raise ConfigError("beams must be >= 1")
    if max_len < 1:
        raise ConfigError("max_len must be >= 1")
    finished = [greedy_decode(step, bos, eos, max_len)]
    alive = [Hypothesis([], 0.0)]
    searched = 0
    for _ in range(max_len):
        lp = np.asarray(step([[bos] + h.tokens for h in alive]))
        V = lp.shape[1]
        total = np.array([h.logprob for h in alive])[:, None] + lp
        flat = total.ravel()
        # lexsort: primary key -score, then beam index, then token id (= flat order)
        order = np.lexsort((np.arange(flat.size), -flat))[:beams]
        nxt = []
        for f in order:
            b, tok = divmod(int(f), V)
            hyp = Hypothesis(alive[b].tokens + [tok], float(flat[f]))
            if tok == eos:
                finished.append(hyp)
                searched += 1
            else:
                nxt.append(hyp)
        alive = nxt
        if not alive or searched >= beams:
            break
    else:
        finished.extend(alive)  # hit max_len without an end token
    best = finished[0]
    for h in finished[1:]:
        if h.score > best.score:
            best = h
    return best


def sequence_logprob(step: StepFn, bos: int, tokens: Sequence[int]) -> float:
    """Log-probability of ``tokens`` under ``step`` (teacher-forced)."""
    total, prefix = 0.0, []
    for tok in tokens:
        total += float(np.asarray(step([[bos] + prefix]))[0, tok])
        prefix.append(int(tok))
    return total
