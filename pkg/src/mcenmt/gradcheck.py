"""Finite-difference verification of every parameterized operation.

Each check builds a small random instance (dims <= 6, length <= 4), projects
the operation's outputs onto fixed random weights to get a scalar, and
compares the hand-written backward pass against central differences.
Inputs are checked alongside parameters.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import decoder as dec
from . import encoder as enc
from .corpus import RESERVED, Vocabulary, make_batch
from .encoder import SYSTEMS, ChannelConfig, Prefixed, sub
from .model import Model, ModelConfig
from .numerics import Rng, grad_check

TOLERANCE = 1e-4
DIM = 5
LENGTH = 4
BATCH = 2


@dataclass
class CheckResult:
    name: str
    max_error: float
    seconds: float

    @property
    def ok(self) -> bool:
        return self.max_error < TOLERANCE


def _rand(rng: Rng, *shape, scale: float = 0.5):
    return rng.uniform(-scale, scale, shape)


def _zeros(params: dict) -> dict:
    return {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}


def _mask() -> np.ndarray:
    m = np.ones((BATCH, LENGTH))
    m[1, LENGTH - 1] = 0.0   # one padded position
    return m


# -- components ------------------------------------------------------------------------------------


def check_gru(rng: Rng) -> float:
    p = {k: _rand(rng, *shape) for k, shape in enc.gru_shapes(DIM - 1, DIM).items()}
    p["x"] = _rand(rng, BATCH, DIM - 1)
    p["s"] = _rand(rng, BATCH, DIM)
    P = _rand(rng, BATCH, DIM, scale=1.0)

    def f(q):
        return (P * enc.gru_forward(q["x"], q["s"], q)[0]).sum()

    _, cache = enc.gru_forward(p["x"], p["s"], p)
    g = _zeros(p)
    g["x"], g["s"] = enc.gru_backward(P, cache, p, g)
    return grad_check(f, p, g)


def check_memory(rng: Rng, literal: bool) -> float:
    """Read followed by write, with a state update in between as in the encoder."""
    p = {k: _rand(rng, *shape) for k, shape in enc.memory_shapes(DIM, DIM, DIM).items()}
    p["M"] = _rand(rng, BATCH, LENGTH, DIM)
    p["s"] = _rand(rng, BATCH, DIM)
    p["s_new"] = _rand(rng, BATCH, DIM)
    mask = _mask()
    P_c = _rand(rng, BATCH, DIM, scale=1.0)
    P_M = _rand(rng, BATCH, LENGTH, DIM, scale=1.0)

    def f(q):
        (w, _, Mt, c), _ = enc.memory_read_forward(q["M"], q["s"], mask, q, literal)
        M_new, _ = enc.memory_write_forward(Mt, q["s_new"], w, q)
        return (P_c * c).sum() + (P_M * M_new).sum()

    (w, _, Mt, _), rc = enc.memory_read_forward(p["M"], p["s"], mask, p, literal)
    _, wc = enc.memory_write_forward(Mt, p["s_new"], w, p)
    g = _zeros(p)
    dMt, dw, g["s_new"] = enc.memory_write_backward(P_M, wc, p, g)
    g["M"], g["s"] = enc.memory_read_backward(P_c, dMt, dw, rc, p, g)
    return grad_check(f, p, g)


def check_combiner(rng: Rng, system: str) -> float:
    cfg = ChannelConfig.for_system(system, emb_dim=3, hidden_dim=3, mem_dim=3)
    D = cfg.annotation_dim
    p = {}
    for gname in cfg.gates:
        p.update({f"{gname}.W": _rand(rng, D, D), f"{gname}.U": _rand(rng, D, D), f"{gname}.b": _rand(rng, D)})
    for ch in ("E2", "h", "M"):
        p[ch] = _rand(rng, BATCH, LENGTH, D, scale=1.0)
    P = _rand(rng, BATCH, LENGTH, D, scale=1.0)

    def nested(q):
        return {gname: sub(q, gname + ".") for gname in cfg.gates}

    def f(q):
        return (P * enc.combine_channels_forward(q["E2"], q["h"], q["M"], nested(q), cfg)[0]).sum()

    _, cache = enc.combine_channels_forward(p["E2"], p["h"], p["M"], nested(p), cfg)
    g = _zeros(p)
    grads = {gname: Prefixed(g, gname + ".") for gname in cfg.gates}
    dE2, dh, dM = enc.combine_channels_backward(P, cache, nested(p), grads, cfg)
    for ch, d in (("E2", dE2), ("h", dh), ("M", dM)):
        if d is not None:
            g[ch] = d
    return grad_check(f, p, g)


def check_attention(rng: Rng) -> float:
    D, d = DIM + 1, DIM
    p = {"W_a": _rand(rng, D, d), "U_a": _rand(rng, d, d), "b_a": _rand(rng, d), "V_a": _rand(rng, d)}
    p["A"] = _rand(rng, BATCH, LENGTH, D, scale=1.0)
    p["s"] = _rand(rng, BATCH, d, scale=1.0)
    mask = _mask()
    P = _rand(rng, BATCH, D, scale=1.0)

    def f(q):
        return (P * dec.attend(q["s"], q["A"], mask, q)[1]).sum()

    alpha, _, hid = dec.attend(p["s"], p["A"], mask, p)
    g = _zeros(p)
    dalpha = np.einsum("bd,bnd->bn", P, p["A"])
    dkeys, g["s"] = enc.attention_weights_backward(dalpha, alpha, hid, p["s"], p["U_a"], p["V_a"], g)
    g["W_a"] += np.einsum("bnd,bnk->dk", p["A"], dkeys)
    g["b_a"] += dkeys.sum(axis=(0, 1))
    g["A"] = alpha[:, :, None] * P[:, None, :] + dkeys @ p["W_a"].T
    return grad_check(f, p, g)


def check_decoder_step(rng: Rng) -> float:
    V, e, d, D = 6, 4, DIM, 6
    shapes = dec.decoder_shapes(V, e, d, D)
    p = {k: _rand(rng, *shape) for k, shape in shapes.items()}
    p["A"] = _rand(rng, BATCH, LENGTH, D, scale=1.0)
    p["s_prev"] = _rand(rng, BATCH, d, scale=1.0)
    y_prev = np.array([1, 4])
    mask = _mask()
    drop = np.array(rng.uniform(0, 1, (BATCH, d)) > 0.3, dtype=np.float64) / 0.7
    P_lp = _rand(rng, BATCH, V, scale=1.0)
    P_s = _rand(rng, BATCH, d, scale=1.0)

    def f(q):
        st, _ = dec.decoder_step_forward(q["s_prev"], y_prev, q["A"], mask, q, drop=drop)
        return (P_lp * st.logp).sum() + (P_s * st.state).sum()

    st, cache = dec.decoder_step_forward(p["s_prev"], y_prev, p["A"], mask, p, drop=drop)
    g = _zeros(p)
    prob = np.exp(st.logp)
    dlogits = P_lp - prob * P_lp.sum(axis=1, keepdims=True)
    g["s_prev"], dA_ctx, dkeys, demb = dec.decoder_step_backward(dlogits, P_s, cache, p["A"], p, g)
    g["dec.att.W_a"] += np.einsum("bnd,bnk->dk", p["A"], dkeys)
    g["dec.att.b_a"] += dkeys.sum(axis=(0, 1))
    g["A"] = dA_ctx + dkeys @ p["dec.att.W_a"].T
    dtable, dbias = enc.embed_backward(demb, y_prev, p["tgt_emb"].shape, with_bias=True)
    g["tgt_emb"] += dtable
    g["tgt_emb_bias"] += dbias
    return grad_check(f, p, g)


# -- whole model ---------------------------------------------------------------------------------------


def toy_batch():
    src_vocab = Vocabulary(list(RESERVED) + ["a", "b", "c", "d"])
    tgt_vocab = Vocabulary(list(RESERVED) + ["x", "y", "z"])
    pairs = [("a b c d".split(), "x y".split()), ("d a b".split(), "z z x".split())]
    return make_batch(pairs, src_vocab, tgt_vocab), len(src_vocab), len(tgt_vocab)


def check_full_loss(rng: Rng, system: str, read_weighting: str = "literal", stacked: bool = False) -> float:
    batch, sv, tv = toy_batch()
    channels = ChannelConfig.for_system(system, emb_dim=4, hidden_dim=4, mem_dim=4,
                                        read_weighting=read_weighting, stacked_bidir=stacked)
    cfg = ModelConfig(channels, sv, tv, dropout=0.3, init_scale=0.5)
    model = Model.init(cfg, rng.child(0))
    # a fresh stream per evaluation keeps the dropout masks fixed
    _, grads, _ = model.loss_and_grads(batch, rng.child(1), True)

    def f(q):
        return Model(cfg, q).forward(batch, rng.child(1), True)[0]

    return grad_check(f, model.params, grads)


def all_checks(seed: int = 7):
    """Yield ``(name, thunk)`` for every check, each with its own random stream."""
    root = Rng(seed, 101)
    yield "gru_step", lambda: check_gru(root.child(0))
    yield "memory_read_write[literal]", lambda: check_memory(root.child(1), True)
    yield "memory_read_write[single]", lambda: check_memory(root.child(2), False)
    for i, system in enumerate(("NTM-RNN", "RNN-EMB", "NTM-EMB", "NTM-RNN-EMB")):
        yield f"combine[{system}]", lambda i=i, s=system: check_combiner(root.child(3, i), s)
    yield "attention", lambda: check_attention(root.child(4))
    yield "decoder_step", lambda: check_decoder_step(root.child(5))
    for i, system in enumerate(SYSTEMS):
        yield f"loss[{system}]", lambda i=i, s=system: check_full_loss(root.child(6, i), s)
    yield "loss[NTM-RNN-EMB,single,stacked]", lambda: check_full_loss(root.child(7), "NTM-RNN-EMB", "single", True)


def run_all(seed: int = 7) -> list[CheckResult]:
    results = []
    for name, thunk in all_checks(seed):
        t0 = time.perf_counter()
        err = thunk()
        results.append(CheckResult(name, err, time.perf_counter() - t0))
    return results
