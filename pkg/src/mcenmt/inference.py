"""Greedy and beam-search decoding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import decoder as dec
from .corpus import BOS, EOS, pad_ids
from .encoder import sub
from .model import Model


@dataclass
class Hypothesis:
    tokens: list[int]      # emitted ids after BOS, EOS included once finished
    state: np.ndarray      # decoder state (d,)
    logp: float            # cumulative log-probability
    finished: bool = False
    order: int = 0         # insertion order, the last tie-breaker

    @property
    def score(self) -> float:
        """Length-normalized score; EOS counts toward the length."""
        return self.logp / max(len(self.tokens), 1)

    @property
    def output(self) -> list[int]:
        return self.tokens[:-1] if self.finished else list(self.tokens)


def default_max_len(src_len: int) -> int:
    return 2 * src_len + 5


class _Decoder:
    """Encoded source plus cached decoder-side tensors for step-by-step use."""

    def __init__(self, model: Model, src_ids):
        src, mask, _ = pad_ids([list(src_ids)], model.dtype)
        if mask.sum() == 0:
            raise ValueError("cannot decode an empty source sentence")
        enc = model.encode(src, mask)
        self.model = model
        self.A = enc.A
        self.mask = mask
        self.keys = dec.attention_keys(self.A, sub(model.params, "dec.att."))
        s0, _ = dec.initial_state(self.A, mask, sub(model.params, "dec.init."), model.config.zero_init_state)
        self.s0 = s0[0]

    def step(self, states: np.ndarray, prev: np.ndarray):
        st, _ = dec.decoder_step_forward(states, prev, self.A, self.mask, self.model.params, self.keys)
        return st.logp, st.state


def greedy_decode(src_ids, model: Model, max_len: int | None = None) -> list[int]:
    """Argmax decoding; ties go to the lowest token id. EOS is not returned."""
    if max_len is None:
        max_len = default_max_len(len(src_ids))
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    d = _Decoder(model, src_ids)
    state = d.s0[None, :]
    prev = BOS
    out = []
    for _ in range(max_len):
        logp, state = d.step(state, np.array([prev]))
        prev = int(np.argmax(logp[0]))
        if prev == EOS:
            break
        out.append(prev)
    return out


def greedy_decode_batch(sources, model: Model, max_len: int | None = None) -> list[list[int]]:
    """Batched argmax decoding, identical in result to :func:`greedy_decode` per sentence."""
    src, mask, lengths = pad_ids([list(s) for s in sources], model.dtype)
    if (lengths == 0).any():
        raise ValueError("cannot decode an empty source sentence")
    limits = np.array([default_max_len(int(n)) if max_len is None else max_len for n in lengths])
    enc = model.encode(src, mask)
    keys = dec.attention_keys(enc.A, sub(model.params, "dec.att."))
    state, _ = dec.initial_state(enc.A, mask, sub(model.params, "dec.init."), model.config.zero_init_state)
    B = len(sources)
    prev = np.full(B, BOS)
    done = np.zeros(B, dtype=bool)
    outs: list[list[int]] = [[] for _ in range(B)]
    for j in range(int(limits.max())):
        st, _ = dec.decoder_step_forward(state, prev, enc.A, mask, model.params, keys)
        state = st.state
        prev = st.logp.argmax(axis=1)
        for b in range(B):
            if done[b]:
                continue
            if prev[b] == EOS or j >= limits[b]:
                done[b] = True
            else:
                outs[b].append(int(prev[b]))
        if done.all():
            break
    return outs


def beam_search(src_ids, model: Model, beam: int = 10, max_len: int | None = None,
                expand: int | None = None) -> tuple[list[int], float]:
    """Beam search ranked by length-normalized log-probability.

    Each live hypothesis proposes its ``expand`` best tokens (default
    ``2 * beam``); the best ``beam - len(finished)`` proposals survive. A
    proposal ending in EOS moves to the finished pool. The search ends when no
    live hypothesis remains or ``max_len`` tokens were emitted. Unfinished
    hypotheses are only considered when nothing finished.

    Returns the best token ids (EOS stripped) and their normalized score.
    """
    if beam < 1:
        raise ValueError("beam must be at least 1")
    if max_len is None:
        max_len = default_max_len(len(src_ids))
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    d = _Decoder(model, src_ids)
    expand = 2 * beam if expand is None else expand
    counter = 0
    live = [Hypothesis([], d.s0, 0.0, order=counter)]
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        room = beam - len(finished)
        if room <= 0 or not live:
            break
        states = np.stack([h.state for h in live])
        prev = np.array([h.tokens[-1] if h.tokens else BOS for h in live])
        logp, new_states = d.step(states, prev)
        V = logp.shape[1]
        k = min(expand, V)
        # per hypothesis: best k tokens, ties to the lower id
        top = np.argsort(-logp, axis=1, kind="stable")[:, :k]
        hyp_idx = np.repeat(np.arange(len(live)), k)
        tok = top.reshape(-1)
        step_lp = logp[hyp_idx, tok]
        total = np.array([live[h].logp for h in hyp_idx]) + step_lp
        # rank by total, then step score (keeps beam=1 identical to argmax), token id, hypothesis
        order = np.lexsort((hyp_idx, tok, -step_lp, -total))[:room]
        nxt = []
        for i in order:
            h, t = int(hyp_idx[i]), int(tok[i])
            counter += 1
            hyp = Hypothesis(live[h].tokens + [t], new_states[h], float(total[i]), t == EOS, counter)
            (finished if hyp.finished else nxt).append(hyp)
        live = nxt
    pool = finished if finished else live
    best = max(pool, key=lambda h: (h.score, -h.order))
    return best.output, best.score
